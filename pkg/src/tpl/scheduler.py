"""Inter-domain distance measurement and loss-weight schedules.

The distance between two groups of unit-norm features is the normalised
cosine distance ``(1 - cos(mu_a, mu_b)) / 2`` between their re-normalised
centroids, so it lies in [0, 1].
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Mapping

import numpy as np

EPS = 1e-6
LAMBDA_MAX = math.log(1.0 / EPS)


class StrategyKind(str, enum.Enum):
    TRANSITIVE = "transitive"
    JOINT = "joint"
    ALTERNATING = "alternating"
    TWO_STAGE = "two_stage"
    CUMULATIVE = "cumulative"


def _unit(v: np.ndarray) -> np.ndarray | None:
    n = np.linalg.norm(v)
    return None if n < 1e-12 else v / n


def centroid_table(features: np.ndarray, group: np.ndarray, key: np.ndarray) -> dict[int, dict[int, np.ndarray]]:
    """Re-normalised centroids ``table[g][k]`` of rows with group g and key k.

    Cells whose centroid vanishes are omitted.
    """
    features = np.asarray(features, dtype=np.float64)
    group = np.asarray(group)
    key = np.asarray(key)
    table: dict[int, dict[int, np.ndarray]] = {}
    for g in np.unique(group):
        rows = group == g
        cells = {}
        for k in np.unique(key[rows]):
            u = _unit(features[rows & (key == k)].mean(axis=0))
            if u is not None:
                cells[int(k)] = u
        table[int(g)] = cells
    return table


def pair_distance(a: np.ndarray, b: np.ndarray) -> float:
    return float(min(max((1.0 - float(a @ b)) / 2.0, 0.0), 1.0))


def grouped_pair_distances(features, group, key) -> dict[int, float]:
    """Mean pairwise centroid distance over keys, for every group spanning >= 2 keys."""
    out = {}
    for g, cells in centroid_table(features, group, key).items():
        if len(cells) < 2:
            continue
        ds = [pair_distance(cells[a], cells[b]) for a, b in combinations(sorted(cells), 2)]
        out[g] = float(np.mean(ds))
    return out


def compute_domain_distance(features, classes, domains) -> float:
    """Average inter-domain distance: pairs of domains within a class, then over classes."""
    per_class = grouped_pair_distances(features, classes, domains)
    if not per_class:
        raise ValueError("no class is present in two or more domains")
    return float(np.mean(list(per_class.values())))


def per_domain_distances(features, classes, domains) -> dict[int, float]:
    """For each domain m, mean distance from its class centroids to other domains' same-class centroids."""
    table = centroid_table(features, classes, domains)
    sums: dict[int, list[float]] = {int(m): [] for m in np.unique(domains)}
    for cells in table.values():
        for m in cells:
            others = [pair_distance(cells[m], cells[o]) for o in cells if o != m]
            if others:
                sums[m].append(float(np.mean(others)))
    missing = [m for m, v in sums.items() if not v]
    if missing:
        raise ValueError(f"domain(s) {missing} share no class with another domain")
    return {m: float(np.mean(v)) for m, v in sums.items()}


def compute_lambda(d: float, t: int, total: int, theta: float) -> float:
    """-ln(d (T - t) / theta), with the argument floored at EPS and the result clamped to [0, LAMBDA_MAX]."""
    if t >= total or t < 0:
        raise ValueError(f"iteration {t} outside [0, {total})")
    if theta <= 0:
        raise ValueError("theta must be positive")
    if d < 0:
        raise ValueError("distance must be non-negative")
    arg = max(d * (total - t) / theta, EPS)
    return min(max(-math.log(arg), 0.0), LAMBDA_MAX) + 0.0  # + 0.0 turns -0.0 into 0.0


def compute_weights(lam: float) -> tuple[float, float]:
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    w_v = 1.0 / (1.0 + lam)
    return w_v, 1.0 - w_v


def strategy_weights(kind: StrategyKind | str, t: int, total: int, d: float | None = None,
                     theta: float | None = None, checkpoint_every: int = 100) -> tuple[float, float]:
    kind = StrategyKind(kind)
    if kind is StrategyKind.TRANSITIVE:
        if d is None or theta is None:
            raise ValueError("transitive weights need a distance and theta")
        return compute_weights(compute_lambda(d, min(t, total - 1), total, theta))
    if kind is StrategyKind.JOINT:
        return 0.5, 0.5
    if kind is StrategyKind.ALTERNATING:
        return (1.0, 0.0) if (t // checkpoint_every) % 2 == 0 else (0.0, 1.0)
    if kind is StrategyKind.TWO_STAGE:
        return (1.0, 0.0) if 2 * t < total else (0.0, 1.0)
    frac = (t / total) ** 2
    return 1.0 - frac, frac


def per_domain_weights(features, classes, domains, t: int, total: int, theta: float) -> dict[int, tuple[float, float]]:
    return {m: compute_weights(compute_lambda(dm, t, total, theta))
            for m, dm in per_domain_distances(features, classes, domains).items()}


@dataclass
class ScheduleState:
    """Loss-weight schedule for one training run.

    ``theta=None`` means it is fixed at the first checkpoint as ``d0 * T`` so
    that the transitive rule starts at lambda = 0.
    """

    total: int
    strategy: StrategyKind = StrategyKind.TRANSITIVE
    theta: float | None = None
    checkpoint_every: int = 100
    t: int = 0
    d: float = 1.0
    lam: float = 0.0
    weights: tuple[float, float] = (1.0, 0.0)
    domain_weights: dict[int, tuple[float, float]] | None = None
    history: list[tuple[int, float, float, float, float]] = field(default_factory=list)

    def __post_init__(self):
        self.strategy = StrategyKind(self.strategy)
        if self.total <= 0 or self.checkpoint_every <= 0:
            raise ValueError("total and checkpoint_every must be positive")

    def is_checkpoint(self, t: int) -> bool:
        return t % self.checkpoint_every == 0

    def checkpoint(self, t: int, d: float, domain_d: Mapping[int, float] | None = None) -> None:
        """Record a fresh distance measurement taken at iteration ``t``."""
        if not 0.0 <= d <= 1.0:
            raise ValueError(f"distance {d} outside [0, 1]")
        if self.theta is None:
            self.theta = max(d, EPS) * self.total
        self.t, self.d = t, d
        self.lam = compute_lambda(d, t, self.total, self.theta)
        if domain_d is not None:
            self.domain_weights = {m: compute_weights(compute_lambda(v, t, self.total, self.theta))
                                   for m, v in domain_d.items()}
        self.weights = self.current(t)
        self.history.append((t, d, self.lam, *self.weights))

    def current(self, t: int) -> tuple[float, float]:
        """Global (w_V, w_S) in effect at iteration ``t``."""
        if self.strategy is StrategyKind.TRANSITIVE:
            return compute_weights(self.lam)
        return strategy_weights(self.strategy, t, self.total, checkpoint_every=self.checkpoint_every)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "d", "lambda", "w_V", "w_S"])
        for row in self.history:
            w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])
        return buf.getvalue()
