"""Miniature dual encoder: a prompted vision transformer and a tiny text transformer.

Both towers share the pre-layer-norm :class:`Block`.  The vision tower accepts
one learnable prompt matrix per layer; the prompt outputs of each block are
dropped and the next layer's prompts appended in their place.  The text tower
reads a fixed four-token template followed by one class token, optionally
prefixed by generated domain tokens.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor

TEMPLATE_LEN = 4  # "a photo of a"


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    channels: int = 3
    patch: int = 8
    width: int = 64
    vision_layers: int = 4
    heads: int = 4
    text_layers: int = 2
    context_length: int = 8
    embed_dim: int = 64
    prompt_tokens: int = 4
    text_prompt_tokens: int = 2
    n_classes: int = 8
    mlp_ratio: int = 4
    generator_hidden: int = 128
    prompt_init_std: float = 0.02

    def __post_init__(self):
        if self.image_size % self.patch:
            raise ValueError("image_size must be a multiple of patch")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        if self.text_prompt_tokens + TEMPLATE_LEN + 1 > self.context_length:
            raise ValueError("context_length too short for template plus prompt tokens")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch) ** 2

    def to_dict(self) -> dict:
        return asdict(self)


def _param(rng: np.random.Generator, shape, std: float, name: str) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, name=name)


def _const(value: float, shape, name: str) -> Tensor:
    return Tensor(np.full(shape, value), requires_grad=True, name=name)


class Block:
    """Pre-LN transformer block: x + MHSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, width: int, heads: int, mlp_ratio: int, rng: np.random.Generator, prefix: str):
        d, h = width, mlp_ratio * width
        self.heads = heads
        std = d ** -0.5
        self.ln1_w = _const(1.0, (d,), f"{prefix}.ln1.w")
        self.ln1_b = _const(0.0, (d,), f"{prefix}.ln1.b")
        self.qkv_w = _param(rng, (d, 3 * d), std, f"{prefix}.attn.qkv.w")
        self.qkv_b = _const(0.0, (3 * d,), f"{prefix}.attn.qkv.b")
        self.out_w = _param(rng, (d, d), std, f"{prefix}.attn.out.w")
        self.out_b = _const(0.0, (d,), f"{prefix}.attn.out.b")
        self.ln2_w = _const(1.0, (d,), f"{prefix}.ln2.w")
        self.ln2_b = _const(0.0, (d,), f"{prefix}.ln2.b")
        self.fc1_w = _param(rng, (d, h), std, f"{prefix}.mlp.fc1.w")
        self.fc1_b = _const(0.0, (h,), f"{prefix}.mlp.fc1.b")
        self.fc2_w = _param(rng, (h, d), h ** -0.5, f"{prefix}.mlp.fc2.w")
        self.fc2_b = _const(0.0, (d,), f"{prefix}.mlp.fc2.b")

    def parameters(self) -> list[Tensor]:
        return [self.ln1_w, self.ln1_b, self.qkv_w, self.qkv_b, self.out_w, self.out_b,
                self.ln2_w, self.ln2_b, self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b]

    def attention(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        h = self.heads
        dh = d // h
        qkv = nx.matmul(x, self.qkv_w) + self.qkv_b
        qkv = nx.transpose(qkv.reshape(b, n, 3, h, dh), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = nx.scale(nx.matmul(q, nx.swapaxes(k, -1, -2)), dh ** -0.5)
        attn = nx.softmax(scores)
        ctx = nx.transpose(nx.matmul(attn, v), (0, 2, 1, 3)).reshape(b, n, d)
        return nx.matmul(ctx, self.out_w) + self.out_b

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attention(nx.layer_norm(x, self.ln1_w, self.ln1_b))
        hdn = nx.gelu(nx.matmul(nx.layer_norm(x, self.ln2_w, self.ln2_b), self.fc1_w) + self.fc1_b)
        return x + nx.matmul(hdn, self.fc2_w) + self.fc2_b


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) images to (B, n_patches, patch*patch*C), row-major over the patch grid."""
    b, hgt, wid, c = images.shape
    gh, gw = hgt // patch, wid // patch
    x = images.reshape(b, gh, patch, gw, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, gh * gw, patch * patch * c)


class PromptedVisionEncoder:
    """Vision transformer whose layers optionally take learnable prompt tokens.

    ``prompts`` is ``None`` for the plain backbone, or a list of ``vision_layers``
    tensors of shape ``(prompt_tokens, width)``.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.width
        patch_dim = cfg.patch * cfg.patch * cfg.channels
        self.patch_w = _param(rng, (patch_dim, d), patch_dim ** -0.5, "vision.patch.w")
        self.class_token = _param(rng, (d,), d ** -0.5, "vision.class_token")
        self.pos = _param(rng, (cfg.n_patches + 1, d), 0.02, "vision.pos")
        self.ln_pre_w = _const(1.0, (d,), "vision.ln_pre.w")
        self.ln_pre_b = _const(0.0, (d,), "vision.ln_pre.b")
        self.blocks = [Block(d, cfg.heads, cfg.mlp_ratio, rng, f"vision.block{k}")
                       for k in range(cfg.vision_layers)]
        self.ln_post_w = _const(1.0, (d,), "vision.ln_post.w")
        self.ln_post_b = _const(0.0, (d,), "vision.ln_post.b")
        self.proj = _param(rng, (d, cfg.embed_dim), d ** -0.5, "vision.proj")
        self.prompts: list[Tensor] | None = None

    def parameters(self) -> list[Tensor]:
        ps = [self.patch_w, self.class_token, self.pos, self.ln_pre_w, self.ln_pre_b]
        for blk in self.blocks:
            ps.extend(blk.parameters())
        ps.extend([self.ln_post_w, self.ln_post_b, self.proj])
        return ps

    def init_prompts(self, rng: np.random.Generator) -> list[Tensor]:
        cfg = self.cfg
        return [_param(rng, (cfg.prompt_tokens, cfg.width), cfg.prompt_init_std, f"prompt.vision{k}")
                for k in range(cfg.vision_layers)]

    def sequence_length(self, prompted: bool = True) -> int:
        return 1 + self.cfg.n_patches + (self.cfg.prompt_tokens if prompted else 0)

    def __call__(self, images: np.ndarray, prompts: Sequence[Tensor] | None = None) -> Tensor:
        return encode_image(images, self, prompts)


def encode_image(images: np.ndarray, encoder: PromptedVisionEncoder,
                 prompts: Sequence[Tensor] | None = None) -> Tensor:
    """Unit-norm joint-space features for a batch of (B, H, W, C) images."""
    cfg = encoder.cfg
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    expected = (cfg.image_size, cfg.image_size, cfg.channels)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ShapeError("encode_image", images.shape, (None,) + expected)
    if prompts is None:
        prompts = encoder.prompts
    if prompts is not None and len(prompts) != cfg.vision_layers:
        raise ValueError(f"need {cfg.vision_layers} prompt tensors, got {len(prompts)}")
    b = images.shape[0]
    d = cfg.width
    n0 = 1 + cfg.n_patches
    patches = Tensor(patchify(images, cfg.patch))
    tokens = nx.matmul(patches, encoder.patch_w)
    cls = nx.broadcast_to(encoder.class_token.reshape(1, 1, d), (b, 1, d))
    x = nx.concat([cls, tokens], axis=1) + encoder.pos
    x = nx.layer_norm(x, encoder.ln_pre_w, encoder.ln_pre_b)
    for k, block in enumerate(encoder.blocks):
        if prompts is not None:
            p = prompts[k]
            x = nx.concat([x, nx.broadcast_to(p.reshape(1, *p.shape), (b,) + p.shape)], axis=1)
        x = block(x)
        if prompts is not None:
            x = x[:, :n0]
    c = nx.layer_norm(x[:, 0], encoder.ln_post_w, encoder.ln_post_b)
    return nx.l2_normalize(nx.matmul(c, encoder.proj))


@dataclass(frozen=True)
class ClassDescriptor:
    """Token ids for the template "a photo of a" followed by one class token."""

    class_id: int
    token_ids: tuple[int, ...]

    @classmethod
    def for_class(cls, class_id: int) -> "ClassDescriptor":
        if class_id < 0:
            raise ValueError(f"class id must be non-negative, got {class_id}")
        return cls(class_id, tuple(range(TEMPLATE_LEN)) + (TEMPLATE_LEN + class_id,))


class TextEncoder:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.width
        self.vocab_size = TEMPLATE_LEN + cfg.n_classes
        self.token_embedding = _param(rng, (self.vocab_size, d), 0.5, "text.token_embedding")
        self.pos = _param(rng, (cfg.context_length, d), 0.02, "text.pos")
        self.blocks = [Block(d, cfg.heads, cfg.mlp_ratio, rng, f"text.block{k}")
                       for k in range(cfg.text_layers)]
        self.ln_final_w = _const(1.0, (d,), "text.ln_final.w")
        self.ln_final_b = _const(0.0, (d,), "text.ln_final.b")
        self.proj = _param(rng, (d, cfg.embed_dim), d ** -0.5, "text.proj")

    def parameters(self) -> list[Tensor]:
        ps = [self.token_embedding, self.pos]
        for blk in self.blocks:
            ps.extend(blk.parameters())
        ps.extend([self.ln_final_w, self.ln_final_b, self.proj])
        return ps

    def descriptors(self) -> list[ClassDescriptor]:
        return [ClassDescriptor.for_class(c) for c in range(self.cfg.n_classes)]

    def __call__(self, class_ids, domain_prompt: Tensor | None = None) -> Tensor:
        return encode_text(class_ids, self, domain_prompt)


def encode_text(class_ids, encoder: TextEncoder, domain_prompt: Tensor | None = None) -> Tensor:
    """Unit-norm text features for descriptors of ``class_ids``.

    ``domain_prompt`` is either ``(L_v, width)``, shared by every descriptor, or
    ``(n, L_v, width)`` with one prompt per descriptor.  Prompt tokens are
    prepended before positional embeddings are added, so the template shifts
    right by ``L_v`` positions.  The output is read at the class-token position.
    """
    cfg = encoder.cfg
    if isinstance(class_ids, ClassDescriptor):
        class_ids = [class_ids.class_id]
    ids = np.asarray(class_ids, dtype=np.int64).reshape(-1)
    if ids.size == 0 or ids.min() < 0 or ids.max() >= cfg.n_classes:
        raise ValueError(f"class ids must lie in [0, {cfg.n_classes})")
    n = ids.size
    d = cfg.width
    tok = np.stack([ClassDescriptor.for_class(int(c)).token_ids for c in ids])
    x = nx.getitem(encoder.token_embedding, tok)
    if domain_prompt is not None:
        if domain_prompt.shape[-1] != d:
            raise ShapeError("encode_text", domain_prompt.shape, (cfg.text_prompt_tokens, d))
        if domain_prompt.ndim == 2:
            dp = nx.broadcast_to(domain_prompt.reshape(1, *domain_prompt.shape), (n,) + domain_prompt.shape)
        elif domain_prompt.ndim == 3 and domain_prompt.shape[0] == n:
            dp = domain_prompt
        else:
            raise ShapeError("encode_text", domain_prompt.shape, (n, cfg.text_prompt_tokens, d))
        x = nx.concat([dp, x], axis=1)
    length = x.shape[1]
    if length > cfg.context_length:
        raise ShapeError("encode_text", x.shape, (n, cfg.context_length, d))
    x = x + encoder.pos[:length]
    for block in encoder.blocks:
        x = block(x)
    last = nx.layer_norm(x[:, length - 1], encoder.ln_final_w, encoder.ln_final_b)
    return nx.l2_normalize(nx.matmul(last, encoder.proj))


class DualEncoder:
    """The stage-one backbone: image tower plus text tower with named parameters."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.vision = PromptedVisionEncoder(cfg, rng)
        self.text = TextEncoder(cfg, rng)

    def parameters(self) -> list[Tensor]:
        return self.vision.parameters() + self.text.parameters()

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None

    def class_text_features(self) -> Tensor:
        return encode_text(np.arange(self.cfg.n_classes), self.text)

    def encode_images(self, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
        """Plain (unprompted) image features, computed without a graph."""
        out = []
        with nx.no_grad():
            for s in range(0, len(images), batch_size):
                out.append(encode_image(images[s:s + batch_size], self.vision).data)
        return np.concatenate(out, axis=0)

    def fingerprint(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(p.name.encode())
            h.update(p.data.astype("<f8").tobytes())
        return h.hexdigest()
