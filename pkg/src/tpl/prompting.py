"""Domain-specific text-prompt generation and gated feature fusion."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor


class DomainPromptGenerator:
    """Three affine layers with GELU between: d_j -> hidden -> hidden -> L_v * width."""

    def __init__(self, in_dim: int, hidden: int, n_tokens: int, width: int, rng: np.random.Generator):
        self.in_dim = in_dim
        self.n_tokens = n_tokens
        self.width = width
        dims = [in_dim, hidden, hidden, n_tokens * width]
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            std = fan_in ** -0.5 if i < 2 else 0.02
            self.weights.append(Tensor(rng.normal(0.0, std, size=(fan_in, fan_out)),
                                       requires_grad=True, name=f"generator.fc{i}.w"))
            self.biases.append(Tensor(np.zeros(fan_out), requires_grad=True, name=f"generator.fc{i}.b"))

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def __call__(self, features: Tensor) -> Tensor:
        """Map (n, d_j) features to per-sample prompts of shape (n, L_v, width)."""
        if features.shape[-1] != self.in_dim:
            raise ShapeError("generator", features.shape, (None, self.in_dim))
        h = features
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = nx.matmul(h, w) + b
            if i < last:
                h = nx.gelu(h)
        return h.reshape(features.shape[0], self.n_tokens, self.width)


def generate_domain_prompt(features: Tensor | Sequence[Tensor], generator: DomainPromptGenerator) -> Tensor:
    """Average of the generator's outputs over one domain's image features.

    Returns an ``(L_v, width)`` prompt.  The mean is taken over generated
    prompts, not over the inputs.
    """
    if not isinstance(features, Tensor):
        feats = list(features)
        if not feats:
            raise ValueError("generate_domain_prompt: empty feature list")
        features = nx.concat([f.reshape(1, -1) for f in feats], axis=0)
    if features.ndim == 1:
        features = features.reshape(1, -1)
    if features.shape[0] == 0:
        raise ValueError("generate_domain_prompt: empty feature list")
    return generator(features).mean(axis=0)


class FusionGates:
    """Learnable per-dimension gates P (image), Q and R (text)."""

    def __init__(self, dim: int, init: float = 0.1):
        self.P = Tensor(np.full(dim, init), requires_grad=True, name="gate.P")
        self.Q = Tensor(np.full(dim, init), requires_grad=True, name="gate.Q")
        self.R = Tensor(np.full(dim, init), requires_grad=True, name="gate.R")

    def parameters(self) -> list[Tensor]:
        return [self.P, self.Q, self.R]

    def zero_(self) -> None:
        for g in self.parameters():
            g.data[:] = 0.0


def _check_dims(op: str, *ts: Tensor) -> None:
    d = ts[0].shape[-1]
    if any(t.shape[-1] != d for t in ts):
        raise ShapeError(op, *[t.shape for t in ts])


def fuse_image(image: Tensor, image_orig: Tensor, P: Tensor, normalize: bool = True) -> Tensor:
    """I' = I + P * I_orig, re-normalised unless ``normalize`` is False."""
    image, image_orig, P = nx.as_tensor(image), nx.as_tensor(image_orig), nx.as_tensor(P)
    _check_dims("fuse_image", image, image_orig, P)
    out = image + P * image_orig
    return nx.l2_normalize(out) if normalize else out


def fuse_text(specific: Tensor, agnostic: Tensor, Q: Tensor, R: Tensor,
              normalize: bool = True) -> tuple[Tensor, Tensor]:
    """(T_bar + Q * T, T + R * T_bar), both from the unfused inputs."""
    specific, agnostic = nx.as_tensor(specific), nx.as_tensor(agnostic)
    Q, R = nx.as_tensor(Q), nx.as_tensor(R)
    _check_dims("fuse_text", specific, agnostic, Q, R)
    spec_f = specific + Q * agnostic
    agn_f = agnostic + R * specific
    if normalize:
        return nx.l2_normalize(spec_f), nx.l2_normalize(agn_f)
    return spec_f, agn_f
