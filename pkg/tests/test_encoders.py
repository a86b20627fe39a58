import math

import numpy as np
import pytest

from tpl import numerics as nx
from tpl.encoders import (
    ClassDescriptor,
    DualEncoder,
    ModelConfig,
    encode_image,
    encode_text,
    patchify,
)
from tpl.numerics import ShapeError, Tensor

SMALL = ModelConfig(width=16, heads=2, vision_layers=2, text_layers=1, embed_dim=8, n_classes=3)


@pytest.fixture(scope="module")
def model():
    return DualEncoder(SMALL, seed=3)


def images(n, seed=0, cfg=SMALL):
    return np.random.default_rng(seed).uniform(0, 1, (n, cfg.image_size, cfg.image_size, cfg.channels))


def test_sequence_length_and_output_dim():
    m = DualEncoder(ModelConfig(), seed=0)
    assert m.vision.sequence_length() == 1 + 16 + 4 == 21
    feats = encode_image(images(2, cfg=m.cfg), m.vision, m.vision.init_prompts(np.random.default_rng(0)))
    assert feats.shape == (2, 64)


def test_features_unit_norm_and_deterministic(model):
    x = images(3)
    prompts = model.vision.init_prompts(np.random.default_rng(1))
    a = encode_image(x, model.vision, prompts).data
    b = encode_image(x, model.vision, prompts).data
    assert np.array_equal(a, b)
    assert np.all(np.abs(np.linalg.norm(a, axis=1) - 1) <= 1e-9)
    twins = encode_image(np.stack([x[0], x[0]]), model.vision).data
    assert np.array_equal(twins[0], twins[1])


def test_wrong_image_size_rejected(model):
    with pytest.raises(ShapeError):
        encode_image(np.zeros((1, 16, 16, 3)), model.vision)


def test_prompts_are_live_inputs(model):
    model.set_trainable(False)
    prompts = model.vision.init_prompts(np.random.default_rng(2))
    feats = encode_image(images(2, seed=5), model.vision, prompts)
    nx.backward(feats[:, 0].sum())
    assert prompts[0].grad is not None and np.abs(prompts[0].grad).max() > 0
    assert all(p.grad is None for p in model.parameters())


def test_patchify_row_major():
    img = np.arange(4 * 4 * 1, dtype=float).reshape(1, 4, 4, 1)
    p = patchify(img, 2)
    assert p.shape == (1, 4, 4)
    assert p[0, 1].tolist() == [2, 3, 6, 7]


def test_text_shapes_and_descriptors(model):
    t = encode_text([0, 1, 2], model.text).data
    assert t.shape == (3, SMALL.embed_dim)
    assert np.array_equal(t, encode_text([0, 1, 2], model.text).data)
    assert np.all(np.abs(np.linalg.norm(t, axis=1) - 1) <= 1e-9)
    descs = model.text.descriptors()
    assert len({d.token_ids for d in descs}) == SMALL.n_classes
    assert ClassDescriptor.for_class(2).token_ids == (0, 1, 2, 3, 6)


def test_zero_domain_prompt_differs_from_none(model):
    zero = Tensor(np.zeros((SMALL.text_prompt_tokens, SMALL.width)))
    a = encode_text([1], model.text).data
    b = encode_text([1], model.text, zero).data
    assert not np.allclose(a, b)


def test_domain_prompt_width_checked(model):
    with pytest.raises(ShapeError):
        encode_text([0], model.text, Tensor(np.zeros((2, SMALL.width + 1))))
    with pytest.raises(ValueError):
        encode_text([SMALL.n_classes], model.text)


def test_per_descriptor_prompts_match_shared(model):
    v = Tensor(np.random.default_rng(4).normal(0, 0.1, (SMALL.text_prompt_tokens, SMALL.width)))
    shared = encode_text([0, 2], model.text, v).data
    stacked = encode_text([0, 2], model.text, Tensor(np.stack([v.data, v.data]))).data
    np.testing.assert_allclose(shared, stacked, rtol=0, atol=1e-14)


def test_fingerprint_tracks_weights():
    m = DualEncoder(SMALL, seed=0)
    f = m.fingerprint()
    assert f == DualEncoder(SMALL, seed=0).fingerprint()
    m.vision.proj.data[0, 0] += 1e-12
    assert m.fingerprint() != f


# -- hand-computed oracle at width 2 -----------------------------------------
def _ln(v):
    mu = sum(v) / len(v)
    var = sum((a - mu) ** 2 for a in v) / len(v)
    return [(a - mu) / math.sqrt(var + 1e-5) for a in v]


def _gelu(a):
    return 0.5 * a * (1 + math.erf(a / math.sqrt(2)))


def _vec_mat(v, m):
    return [sum(v[i] * m[i][j] for i in range(len(v))) for j in range(len(m[0]))]


def test_tiny_vit_matches_hand_arithmetic():
    cfg = ModelConfig(image_size=1, channels=3, patch=1, width=2, vision_layers=1, heads=1, embed_dim=2,
                      prompt_tokens=1, mlp_ratio=1, text_layers=1, n_classes=2)
    m = DualEncoder(cfg, seed=0)
    v = m.vision
    blk = v.blocks[0]
    W = {
        "patch": [[0.5, -0.2], [0.1, 0.3], [-0.4, 0.2]],
        "cls": [0.3, -0.1],
        "pos": [[0.05, 0.0], [0.0, -0.05]],
        "qkv": [[0.2, -0.3, 0.5, 0.1, 0.4, -0.2], [0.1, 0.6, -0.2, 0.3, -0.5, 0.7]],
        "out": [[0.9, 0.1], [-0.3, 0.8]],
        "fc1": [[0.7, -0.4], [0.2, 0.5]],
        "fc2": [[0.3, 0.6], [-0.5, 0.2]],
        "proj": [[1.0, 0.5], [-0.5, 1.0]],
        "prompt": [[0.25, -0.75]],
    }
    v.patch_w.data[...] = W["patch"]
    v.class_token.data[...] = W["cls"]
    v.pos.data[...] = W["pos"]
    blk.qkv_w.data[...] = W["qkv"]
    blk.out_w.data[...] = W["out"]
    blk.fc1_w.data[...] = W["fc1"]
    blk.fc2_w.data[...] = W["fc2"]
    v.proj.data[...] = W["proj"]
    pixel = [0.2, 0.9, -0.3]
    got = encode_image(np.array(pixel).reshape(1, 1, 1, 3), v, [Tensor(W["prompt"])]).data[0]

    # sequence: class token, one patch, one prompt token; biases are zero and LN gains are one
    patch_tok = _vec_mat(pixel, W["patch"])
    seq = [[W["cls"][i] + W["pos"][0][i] for i in range(2)], [patch_tok[i] + W["pos"][1][i] for i in range(2)]]
    seq = [_ln(t) for t in seq] + [W["prompt"][0]]
    h = [_ln(t) for t in seq]
    qkv = [_vec_mat(t, W["qkv"]) for t in h]
    q, k, val = [r[0:2] for r in qkv], [r[2:4] for r in qkv], [r[4:6] for r in qkv]
    new = []
    for i in range(3):
        s = [(q[i][0] * k[j][0] + q[i][1] * k[j][1]) / math.sqrt(2) for j in range(3)]
        e = [math.exp(a - max(s)) for a in s]
        a = [x / sum(e) for x in e]
        ctx = [sum(a[j] * val[j][c] for j in range(3)) for c in range(2)]
        att = _vec_mat(ctx, W["out"])
        new.append([seq[i][c] + att[c] for c in range(2)])
    x0 = new[0]
    hid = [_gelu(z) for z in _vec_mat(_ln(x0), W["fc1"])]
    mlp = _vec_mat(hid, W["fc2"])
    x0 = [x0[c] + mlp[c] for c in range(2)]
    out = _vec_mat(_ln(x0), W["proj"])
    n = math.sqrt(out[0] ** 2 + out[1] ** 2)
    expected = [out[0] / n, out[1] / n]
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)
