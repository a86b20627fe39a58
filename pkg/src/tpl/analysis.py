"""Feature diagnostics: invariance and separability metrics, classical MDS,
confidence ellipses, a binary feature-dump format and report export.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .scheduler import grouped_pair_distances

log = logging.getLogger(__name__)

DUMP_MAGIC = b"TPLF"
DUMP_VERSION = 1
DUMP_MANIFEST = "manifest.json"
DUMP_BUFFER = "features.tplf"
SPLIT_TAGS = ("train", "val", "target")
CHI2_2DOF_95 = -2.0 * math.log(0.05)  # 0.95 quantile of chi-square with 2 dof, 5.9915


class DumpFormatError(ValueError):
    pass


class ConvergenceError(ArithmeticError):
    def __init__(self, component: int, iterations: int, residual: float):
        super().__init__(f"power iteration for component {component} did not converge after "
                         f"{iterations} iterations (residual {residual:.3e})")
        self.component, self.iterations, self.residual = component, iterations, residual


# -- feature dumps ------------------------------------------------------------
@dataclass
class FeatureDump:
    features: np.ndarray
    classes: np.ndarray
    domains: np.ndarray
    split: np.ndarray  # index into SPLIT_TAGS
    iteration: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")
        n = len(self.features)
        self.classes = np.asarray(self.classes, dtype=np.int64)
        self.domains = np.asarray(self.domains, dtype=np.int64)
        self.split = np.asarray(self.split, dtype=np.int64)
        self.iteration = np.asarray(self.iteration, dtype=np.int64)
        for name in ("classes", "domains", "split", "iteration"):
            a = getattr(self, name)
            if a.shape != (n,):
                raise ValueError(f"{name} has shape {a.shape}, expected ({n},)")
        if n and (self.split.min() < 0 or self.split.max() >= len(SPLIT_TAGS)):
            raise ValueError("split tags must index " + "/".join(SPLIT_TAGS))
        if n and (self.classes.min() < 0 or self.domains.min() < 0):
            raise ValueError("class and domain ids must be non-negative")

    def __len__(self):
        return len(self.features)

    @classmethod
    def build(cls, features, classes, domains, split: str | np.ndarray = "target", iteration=0, meta=None):
        n = len(features)
        if isinstance(split, str):
            split = np.full(n, SPLIT_TAGS.index(split))
        return cls(features, classes, domains, split, np.broadcast_to(np.asarray(iteration), (n,)), meta or {})

    def select(self, rows) -> "FeatureDump":
        return FeatureDump(self.features[rows], self.classes[rows], self.domains[rows],
                           self.split[rows], self.iteration[rows], dict(self.meta))

    def equals(self, other: "FeatureDump") -> bool:
        return all(np.array_equal(getattr(self, k), getattr(other, k))
                   for k in ("features", "classes", "domains", "split", "iteration"))


def save_dump(dump: FeatureDump, path: str | os.PathLike) -> Path:
    """Write ``manifest.json`` and ``features.tplf`` into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    n, d = dump.features.shape
    blob = b"".join([DUMP_MAGIC, bytes([DUMP_VERSION]), dump.features.astype("<f8").tobytes(),
                     dump.classes.astype("<u2").tobytes(), dump.domains.astype("<u2").tobytes(),
                     dump.split.astype("u1").tobytes(), dump.iteration.astype("<i4").tobytes()])
    manifest = {"n_rows": n, "dim": d, "buffer": DUMP_BUFFER, "buffer_bytes": len(blob),
                "split_tags": list(SPLIT_TAGS), "meta": dump.meta}
    (path / DUMP_BUFFER).write_bytes(blob)
    (path / DUMP_MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _dump_size(n: int, d: int) -> int:
    return 5 + n * (8 * d + 2 + 2 + 1 + 4)


def load_dump(path: str | os.PathLike) -> FeatureDump:
    path = Path(path)
    try:
        manifest = json.loads((path / DUMP_MANIFEST).read_text())
        blob = (path / manifest.get("buffer", DUMP_BUFFER)).read_bytes()
    except FileNotFoundError as e:
        raise DumpFormatError(f"{path}: missing {Path(e.filename).name}") from None
    except json.JSONDecodeError as e:
        raise DumpFormatError(f"{path / DUMP_MANIFEST}: invalid JSON ({e})") from None
    if blob[:4] != DUMP_MAGIC:
        raise DumpFormatError(f"bad magic {blob[:4]!r}, expected {DUMP_MAGIC!r}")
    if len(blob) < 5 or blob[4] != DUMP_VERSION:
        raise DumpFormatError(f"unsupported version {blob[4] if len(blob) > 4 else None}, expected {DUMP_VERSION}")
    n, d = int(manifest["n_rows"]), int(manifest["dim"])
    if len(blob) != _dump_size(n, d):
        raise DumpFormatError(f"buffer holds {len(blob)} bytes, expected {_dump_size(n, d)} for {n}x{d} rows")
    off = 5
    feats = np.frombuffer(blob, "<f8", n * d, off).reshape(n, d)
    off += 8 * n * d
    classes = np.frombuffer(blob, "<u2", n, off)
    domains = np.frombuffer(blob, "<u2", n, off + 2 * n)
    split = np.frombuffer(blob, "u1", n, off + 4 * n)
    iteration = np.frombuffer(blob, "<i4", n, off + 5 * n)
    try:
        return FeatureDump(feats.copy(), classes, domains, split, iteration, manifest.get("meta", {}))
    except ValueError as e:
        raise DumpFormatError(str(e)) from None


# -- metrics --------------------------------------------------------------
@dataclass
class GroupMetric:
    per_group: dict[int, float]
    mean: float


def domain_invariance_metric(dump: FeatureDump) -> GroupMetric:
    """Per class, mean pairwise distance between domain centroids.  Lower is more invariant."""
    per = grouped_pair_distances(dump.features, dump.classes, dump.domains)
    skipped = sorted(set(np.unique(dump.classes).tolist()) - set(per))
    if skipped:
        log.warning("classes %s appear in a single domain and are skipped", skipped)
    if not per:
        raise ValueError("no class spans two or more domains")
    return GroupMetric(per, float(np.mean(list(per.values()))))


def class_separability_metric(dump: FeatureDump) -> GroupMetric:
    """Per domain, mean pairwise distance between class centroids.  Higher is more separable."""
    per = grouped_pair_distances(dump.features, dump.domains, dump.classes)
    single = sorted(set(np.unique(dump.domains).tolist()) - set(per))
    if single:
        raise ValueError(f"domain(s) {single} hold a single class")
    return GroupMetric(per, float(np.mean(list(per.values()))))


# -- classical MDS --------------------------------------------------------
@dataclass
class Embedding2D:
    coords: np.ndarray
    eigenvalues: np.ndarray
    iterations: tuple[int, int] = (0, 0)


def _power_iteration(B: np.ndarray, component: int, tol: float, max_iter: int, rng) -> tuple[float, np.ndarray, int]:
    v = rng.standard_normal(len(B))
    v /= np.linalg.norm(v)
    rq_prev = float(v @ B @ v)
    for k in range(1, max_iter + 1):
        w = B @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0, v, k
        v = w / nw
        rq = float(v @ B @ v)
        if abs(rq - rq_prev) < tol:
            return rq, v, k
        rq_prev = rq
    raise ConvergenceError(component, max_iter, float(np.linalg.norm(B @ v - rq * v)))


def classical_mds(data, normalize: bool = True, tol: float = 1e-10, max_iter: int = 10_000,
                  seed: int = 0) -> Embedding2D:
    """2-D classical MDS via power iteration with deflation.

    ``data`` is a FeatureDump or an (n, d) array.  Rows are L2-normalised
    first unless ``normalize`` is False.  Power iteration returns the
    eigenvalue largest in magnitude; for Euclidean inputs B is positive
    semi-definite so this is the largest one.
    """
    x = data.features if isinstance(data, FeatureDump) else np.asarray(data, dtype=np.float64)
    n = len(x)
    if n < 3:
        raise ValueError(f"MDS needs at least 3 rows, got {n}")
    if normalize:
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        x = x / np.where(norms > 0, norms, 1.0)
    sq = np.sum(x * x, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0)
    J = np.eye(n) - 1.0 / n
    B = -0.5 * J @ d2 @ J
    B = 0.5 * (B + B.T)
    rng = np.random.default_rng(seed)
    vals, vecs, its = [], [], []
    for comp in range(2):
        lam, v, k = _power_iteration(B, comp, tol, max_iter, rng)
        vals.append(lam)
        vecs.append(v)
        its.append(k)
        B = B - lam * np.outer(v, v)
    vals = np.array(vals)
    coords = np.stack(vecs, axis=1) * np.sqrt(np.maximum(vals, 0.0))
    return Embedding2D(coords, vals, tuple(its))


# -- ellipses -------------------------------------------------------------
@dataclass
class Ellipse:
    mean: np.ndarray
    axes: np.ndarray  # semi-axes, major first
    angle: float  # radians in [0, pi), direction of the major axis
    degenerate: bool = False


def gaussian_ellipse(points, quantile: float = CHI2_2DOF_95, rel_tol: float = 1e-12) -> Ellipse:
    """95% Gaussian confidence ellipse of a 2-D point group."""
    p = np.asarray(points, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 2:
        raise ValueError(f"expected (n, 2) points, got {p.shape}")
    if len(p) < 3:
        raise ValueError(f"need at least 3 points, got {len(p)}")
    mean = p.mean(axis=0)
    cov = np.cov(p, rowvar=False)
    w, V = np.linalg.eigh(cov)
    w, V = w[::-1], V[:, ::-1]
    major = V[:, 0]
    angle = math.atan2(major[1], major[0]) % math.pi
    if w[0] <= 0.0 or w[1] <= rel_tol * w[0]:
        return Ellipse(mean, np.sqrt(quantile * np.maximum(w, 0.0)), angle, degenerate=True)
    return Ellipse(mean, np.sqrt(quantile * w), angle)


# -- report export --------------------------------------------------------
_PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
            "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]


def _f(x: float) -> str:
    return f"{x:.4f}"


def _marker(shape: int, x: float, y: float, color: str, r: float = 3.0) -> str:
    kind = shape % 4
    if kind == 0:
        return f'<circle cx="{_f(x)}" cy="{_f(y)}" r="{_f(r)}" fill="{color}"/>'
    if kind == 1:
        return f'<rect x="{_f(x - r)}" y="{_f(y - r)}" width="{_f(2 * r)}" height="{_f(2 * r)}" fill="{color}"/>'
    if kind == 2:
        pts = [(x, y - r), (x - r, y + r), (x + r, y + r)]
    else:
        pts = [(x, y - r), (x + r, y), (x, y + r), (x - r, y)]
    return f'<polygon points="{" ".join(f"{_f(a)},{_f(b)}" for a, b in pts)}" fill="{color}"/>'


def _svg(width: int, height: int, body: list[str], title: str) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">')
    return "\n".join([head, f"<title>{title}</title>",
                      f'<rect width="{width}" height="{height}" fill="white"/>', *body, "</svg>"]) + "\n"


def scatter_svg(emb: Embedding2D, classes, domains, size: int = 400, pad: int = 20) -> str:
    """MDS scatter: colour is class, marker shape is domain, one ellipse per class."""
    c = emb.coords
    lo, hi = c.min(axis=0), c.max(axis=0)
    span = float(np.max(hi - lo)) or 1.0
    k = (size - 2 * pad) / span

    def tx(p):
        return pad + (p[0] - lo[0]) * k, size - pad - (p[1] - lo[1]) * k

    body = []
    classes = np.asarray(classes)
    domains = np.asarray(domains)
    for cls in np.unique(classes):
        color = _PALETTE[int(cls) % len(_PALETTE)]
        pts = c[classes == cls]
        if len(pts) >= 3:
            e = gaussian_ellipse(pts)
            if not e.degenerate:
                cx, cy = tx(e.mean)
                deg = -math.degrees(e.angle)
                body.append(f'<ellipse cx="{_f(cx)}" cy="{_f(cy)}" rx="{_f(e.axes[0] * k)}" '
                            f'ry="{_f(e.axes[1] * k)}" transform="rotate({_f(deg)} {_f(cx)} {_f(cy)})" '
                            f'fill="none" stroke="{color}" stroke-width="1"/>')
    for p, cls, dom in zip(c, classes, domains):
        x, y = tx(p)
        body.append(_marker(int(dom), x, y, _PALETTE[int(cls) % len(_PALETTE)]))
    return _svg(size, size, body, "MDS feature map")


def bars_svg(metrics: dict[str, dict], width: int = 480, height: int = 240, pad: int = 30) -> str:
    """Grouped bars, one group per metric, one bar per key."""
    body = []
    groups = list(metrics.items())
    gw = (width - 2 * pad) / max(len(groups), 1)
    top = max((max(v.values()) for _, v in groups if v), default=1.0) or 1.0
    for gi, (name, vals) in enumerate(groups):
        keys = sorted(vals, key=str)
        bw = gw * 0.8 / max(len(keys), 1)
        for bi, key in enumerate(keys):
            h = (height - 2 * pad) * vals[key] / top
            x = pad + gi * gw + bi * bw
            body.append(f'<rect x="{_f(x)}" y="{_f(height - pad - h)}" width="{_f(bw * 0.9)}" '
                        f'height="{_f(h)}" fill="{_PALETTE[bi % len(_PALETTE)]}"/>')
        body.append(f'<text x="{_f(pad + gi * gw)}" y="{height - 8}" font-size="11">{name}</text>')
    return _svg(width, height, body, "feature metrics")


def lines_svg(series: dict[str, list[tuple[float, float]]], width: int = 480, height: int = 240,
              pad: int = 30) -> str:
    body = []
    pts = [p for s in series.values() for p in s]
    if pts:
        xs, ys = [p[0] for p in pts], [p[1] for p in pts]
        x0, x1 = min(xs), max(xs) if max(xs) > min(xs) else min(xs) + 1
        y0, y1 = min(ys), max(ys) if max(ys) > min(ys) else min(ys) + 1
        for i, (name, s) in enumerate(series.items()):
            coords = " ".join(f"{_f(pad + (x - x0) / (x1 - x0) * (width - 2 * pad))},"
                              f"{_f(height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad))}" for x, y in s)
            color = _PALETTE[i % len(_PALETTE)]
            body.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')
            body.append(f'<text x="{pad + 4}" y="{14 + 12 * i}" font-size="11" fill="{color}">{name}</text>')
    return _svg(width, height, body, "schedule traces")


def _csv(rows: list[list], header: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


SCHEDULE_COLUMNS = ["t", "d", "lambda", "w_V", "w_S"]


def export_report(metrics: dict[str, GroupMetric], embedding: Embedding2D | None, history,
                  path: str | os.PathLike, classes=None, domains=None) -> list[Path]:
    """Write metric/schedule/embedding CSVs and three SVG figures into ``path``.

    Everything is rendered in memory and staged in a temporary directory, so
    a failure leaves no partial output.
    """
    if not metrics or any(not m.per_group for m in metrics.values()):
        raise ValueError("metrics are empty")
    files: dict[str, str] = {}
    rows = [[name, g, v] for name, m in metrics.items() for g, v in sorted(m.per_group.items())]
    rows += [[name, "mean", m.mean] for name, m in metrics.items()]
    files["metrics.csv"] = _csv(rows, ["metric", "group", "value"])
    hist = [list(r) for r in (history or [])]
    files["schedule.csv"] = _csv(hist, SCHEDULE_COLUMNS)
    files["fig_metrics.svg"] = bars_svg({n: m.per_group for n, m in metrics.items()})
    if hist:
        files["fig_schedule.svg"] = lines_svg({
            "d": [(r[0], r[1]) for r in hist], "w_V": [(r[0], r[3]) for r in hist],
            "w_S": [(r[0], r[4]) for r in hist]})
    if embedding is not None:
        n = len(embedding.coords)
        classes = np.zeros(n, int) if classes is None else np.asarray(classes)
        domains = np.zeros(n, int) if domains is None else np.asarray(domains)
        files["embedding.csv"] = _csv([[x, y, int(c), int(d)] for (x, y), c, d in
                                       zip(embedding.coords, classes, domains)], ["x", "y", "class", "domain"])
        files["fig_mds.svg"] = scatter_svg(embedding, classes, domains)

    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".report-", dir=out))
    try:
        for name, text in files.items():
            (stage / name).write_text(text)
        written = []
        for name in sorted(files):
            os.replace(stage / name, out / name)
            written.append(out / name)
    finally:
        shutil.rmtree(stage, ignore_errors=True)
    return written


def read_metrics_csv(path: str | os.PathLike) -> dict[str, dict[str, float]]:
    out: dict[str, dict[str, float]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["metric"], {})[row["group"]] = float(row["value"])
    return out


def analyze_dump(dump: FeatureDump, out: str | os.PathLike, history=None, mds_rows: int = 400) -> dict:
    """Metrics, MDS and figures for a dump.  MDS uses an evenly strided row subset."""
    metrics = {"domain_invariance": domain_invariance_metric(dump),
               "class_separability": class_separability_metric(dump)}
    rows = np.arange(len(dump))
    if len(rows) > mds_rows:
        rows = rows[np.linspace(0, len(rows) - 1, mds_rows).astype(int)]
    emb = classical_mds(dump.features[rows])
    export_report(metrics, emb, history, out, dump.classes[rows], dump.domains[rows])
    return {k: {"per_group": {str(g): v for g, v in m.per_group.items()}, "mean": m.mean}
            for k, m in metrics.items()} | {"mds_eigenvalues": emb.eigenvalues.tolist()}
