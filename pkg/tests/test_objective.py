import math

import numpy as np
import pytest

from gradcheck import check_gradients
from tpl.numerics import Tensor
from tpl.objective import LossBatch, loss_ls, loss_lv, per_sample_total, total_loss


def unit(rng, *shape):
    x = rng.standard_normal(shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def test_uniform_similarity_is_ln_c():
    img = Tensor(np.array([[1.0, 0.0, 0.0]]))
    text = Tensor(np.tile([0.0, 1.0, 0.0], (8, 1)))
    batch = LossBatch(img, [0], [3], text, {0: text})
    assert abs(loss_lv(batch).item() - math.log(8)) < 1e-9
    assert abs(loss_ls(batch).item() - math.log(8)) < 1e-9


def test_two_sample_hand_value():
    # with identity texts the similarities are the image rows themselves
    img = Tensor(np.array([[0.8, 0.2], [0.1, 0.9]]))
    text = Tensor(np.eye(2))
    loss = loss_lv(LossBatch(img, [0, 0], [0, 1], text, tau=1.0)).item()
    # two-way softmax: -log sigma(margin), margins 0.6 and 0.8
    expected = math.log1p(math.exp(-0.6)) + math.log1p(math.exp(-0.8))
    assert loss == pytest.approx(expected, abs=1e-12)
    assert loss == pytest.approx(0.808589, abs=1e-6)


def test_hard_limit_tends_to_zero():
    img = Tensor(np.array([[1.0, 0.0]]))
    text = Tensor(np.array([[1.0, 0.0], [-1.0, 0.0]]))
    assert loss_lv(LossBatch(img, [0], [0], text, tau=1e-3)).item() < 1e-12


def test_ls_reduces_to_lv():
    rng = np.random.default_rng(0)
    img = Tensor(unit(rng, 5, 4))
    text = Tensor(unit(rng, 3, 4))
    dom = np.array([0, 1, 1, 2, 0])
    lab = np.array([0, 2, 1, 1, 0])
    batch = LossBatch(img, dom, lab, text, {m: text for m in range(3)})
    assert loss_ls(batch).item() == loss_lv(batch).item()


def test_mixed_domain_batch_against_brute_force():
    rng = np.random.default_rng(1)
    img = unit(rng, 3, 4)
    texts = {0: unit(rng, 2, 4), 1: unit(rng, 2, 4)}
    dom, lab, tau = np.array([1, 0, 1]), np.array([0, 1, 1]), 0.07
    got = loss_ls(LossBatch(Tensor(img), dom, lab, Tensor(texts[0]), {m: Tensor(t) for m, t in texts.items()}, tau),
                  reduction="none").data
    for i in range(3):
        z = texts[dom[i]] @ img[i] / tau
        ref = -(z[lab[i]] - math.log(sum(math.exp(v) for v in z)))
        assert abs(got[i] - ref) < 1e-12


def test_permutation_invariance_and_reductions():
    rng = np.random.default_rng(2)
    img, text = unit(rng, 6, 4), unit(rng, 3, 4)
    dom, lab = np.array([0, 1, 0, 1, 1, 0]), np.array([0, 1, 2, 2, 1, 0])
    spec = {0: Tensor(unit(rng, 3, 4)), 1: Tensor(unit(rng, 3, 4))}
    perm = rng.permutation(6)
    a = LossBatch(Tensor(img), dom, lab, Tensor(text), spec)
    b = LossBatch(Tensor(img[perm]), dom[perm], lab[perm], Tensor(text), spec)
    assert loss_ls(a).item() == pytest.approx(loss_ls(b).item(), abs=1e-12)
    assert loss_lv(a).item() == pytest.approx(loss_lv(b).item(), abs=1e-12)
    assert loss_lv(a, "mean").item() == pytest.approx(loss_lv(a).item() / 6, abs=1e-12)
    assert loss_lv(a).item() >= 0
    with pytest.raises(ValueError):
        loss_lv(a, "max")


def test_errors():
    img = Tensor(np.eye(2))
    with pytest.raises(ValueError):
        LossBatch(img, [0, 0], [0, 1], Tensor(np.eye(2)), tau=0.0)
    with pytest.raises(KeyError):
        loss_ls(LossBatch(img, [0, 1], [0, 1], Tensor(np.eye(2)), {0: Tensor(np.eye(2))}))
    with pytest.raises(ValueError):
        total_loss(Tensor(1.0), Tensor(1.0), (-0.5, 1.5))


def test_total_loss_arithmetic():
    lv, ls = Tensor(2.0), Tensor(4.0)
    assert total_loss(lv, ls, (0.25, 0.75)).item() == 3.5
    assert total_loss(lv, ls, (1.0, 0.0)).item() == 2.0
    assert total_loss(lv, ls, (0.0, 1.0)).item() == 4.0


def test_per_sample_weights():
    lv, ls = Tensor([1.0, 2.0]), Tensor([3.0, 5.0])
    got = per_sample_total(lv, ls, [0, 1], {0: (1.0, 0.0), 1: (0.5, 0.5)}).item()
    assert got == pytest.approx((1.0 + 3.5) / 2)


def test_loss_gradient_wrt_features():
    rng = np.random.default_rng(3)
    img = Tensor(unit(rng, 4, 5), requires_grad=True)
    text = Tensor(unit(rng, 3, 5), requires_grad=True)
    spec = {0: Tensor(unit(rng, 3, 5), requires_grad=True), 1: Tensor(unit(rng, 3, 5), requires_grad=True)}
    dom, lab = np.array([0, 1, 1, 0]), np.array([2, 0, 1, 1])

    def f():
        b = LossBatch(img, dom, lab, text, spec, tau=0.3)
        return total_loss(loss_lv(b), loss_ls(b), (0.3, 0.7))

    assert check_gradients(f, [img, text, spec[0], spec[1]]) < 1e-4
