"""Image-to-text contrastive losses and their weighted combination.

Class ids are 0-based throughout the package.  Features entering a
:class:`LossBatch` must be unit-norm, so cosine similarity is a dot product.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import numerics as nx
from .numerics import Tensor

DEFAULT_TAU = 0.07


@dataclass
class LossBatch:
    """One minibatch of fused features.

    ``text_agnostic`` is a ``(C, d)`` tensor shared by all samples, or a
    mapping from domain id to ``(C, d)`` when the fused domain-agnostic
    features depend on the domain.  ``text_specific`` maps each domain id to
    its ``(C, d)`` domain-specific text features.
    """

    image: Tensor
    domains: np.ndarray
    labels: np.ndarray
    text_agnostic: Tensor | Mapping[int, Tensor]
    text_specific: Mapping[int, Tensor] = field(default_factory=dict)
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        self.domains = np.asarray(self.domains, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        n = self.image.shape[0]
        if self.domains.shape != (n,) or self.labels.shape != (n,):
            raise ValueError("domains and labels must have one entry per image feature")


def _per_sample_nll(image: Tensor, text: Tensor, labels: np.ndarray, tau: float) -> Tensor:
    c = text.shape[0]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    logits = nx.scale(nx.matmul(image, nx.swapaxes(text, 0, 1)), 1.0 / tau)
    logp = nx.log_softmax(logits)
    return -logp[np.arange(len(labels)), labels]


def _grouped_nll(image: Tensor, texts: Mapping[int, Tensor], domains: np.ndarray,
                 labels: np.ndarray, tau: float) -> Tensor:
    """Per-sample NLL where sample i is scored against ``texts[domains[i]]``."""
    present = sorted(set(domains.tolist()))
    missing = [m for m in present if m not in texts]
    if missing:
        raise KeyError(f"no text features for domain(s) {missing}")
    if len(present) == 1:
        return _per_sample_nll(image, texts[present[0]], labels, tau)
    # score the whole batch against every domain's texts, then keep each sample's own
    # domain row; identical texts then give bit-identical values to the ungrouped loss
    parts, order = [], []
    for m in present:
        idx = np.flatnonzero(domains == m)
        parts.append(_per_sample_nll(image, texts[m], labels, tau)[idx])
        order.append(idx)
    nll = nx.concat(parts, axis=0)
    inverse = np.argsort(np.concatenate(order), kind="stable")
    return nll[inverse]


def _reduce(nll: Tensor, reduction: str) -> Tensor:
    if reduction == "sum":
        return nll.sum()
    if reduction == "mean":
        return nll.mean()
    if reduction == "none":
        return nll
    raise ValueError(f"unknown reduction {reduction!r}")


def loss_lv(batch: LossBatch, reduction: str = "sum") -> Tensor:
    """Cross-entropy of each image against the domain-agnostic class texts."""
    if isinstance(batch.text_agnostic, Tensor):
        nll = _per_sample_nll(batch.image, batch.text_agnostic, batch.labels, batch.tau)
    else:
        nll = _grouped_nll(batch.image, batch.text_agnostic, batch.domains, batch.labels, batch.tau)
    return _reduce(nll, reduction)


def loss_ls(batch: LossBatch, reduction: str = "sum") -> Tensor:
    """Cross-entropy of each image against its own domain's class texts."""
    nll = _grouped_nll(batch.image, batch.text_specific, batch.domains, batch.labels, batch.tau)
    return _reduce(nll, reduction)


def total_loss(lv: Tensor, ls: Tensor, weights: tuple[float, float]) -> Tensor:
    """w_V * lv + w_S * ls.  Weights are non-negative and sum to one."""
    w_v, w_s = float(weights[0]), float(weights[1])
    if w_v < 0 or w_s < 0:
        raise ValueError(f"loss weights must be non-negative, got {weights}")
    if abs(w_v + w_s - 1.0) > 1e-12:
        raise ValueError(f"loss weights must sum to 1, got {weights}")
    if w_s == 0.0:
        return nx.scale(lv, w_v)
    if w_v == 0.0:
        return nx.scale(ls, w_s)
    return nx.scale(lv, w_v) + nx.scale(ls, w_s)


def per_sample_total(lv: Tensor, ls: Tensor, domains: np.ndarray,
                     weights: Mapping[int, tuple[float, float]]) -> Tensor:
    """Mean over samples of w_V[m_i] * lv_i + w_S[m_i] * ls_i."""
    domains = np.asarray(domains)
    wv = np.array([weights[int(m)][0] for m in domains])
    ws = np.array([weights[int(m)][1] for m in domains])
    return (lv * Tensor(wv) + ls * Tensor(ws)).mean()
