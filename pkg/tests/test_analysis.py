import math
from itertools import combinations

import numpy as np
import pytest
from scipy.spatial import procrustes

from tpl.analysis import (
    CHI2_2DOF_95,
    ConvergenceError,
    DumpFormatError,
    FeatureDump,
    GroupMetric,
    class_separability_metric,
    classical_mds,
    domain_invariance_metric,
    export_report,
    gaussian_ellipse,
    load_dump,
    read_metrics_csv,
    save_dump,
)


def seeded_dump(seed=0, n=90, d=6, classes=3, domains=3):
    rng = np.random.default_rng(seed)
    f = rng.standard_normal((n, d))
    f /= np.linalg.norm(f, axis=1, keepdims=True)
    return FeatureDump.build(f, rng.integers(0, classes, n), rng.integers(0, domains, n), "val", 7)


def brute(f, group, key):
    out = {}
    for g in np.unique(group):
        cents = {}
        for k in np.unique(key[group == g]):
            m = f[(group == g) & (key == k)].mean(axis=0)
            cents[k] = m / np.linalg.norm(m)
        pairs = [(1 - cents[a] @ cents[b]) / 2 for a, b in combinations(sorted(cents), 2)]
        out[int(g)] = sum(pairs) / len(pairs)
    return out


def test_chi2_constant():
    assert CHI2_2DOF_95 == pytest.approx(5.991, abs=5e-4)


def test_metrics_against_brute_force():
    dump = seeded_dump()
    inv = domain_invariance_metric(dump)
    sep = class_separability_metric(dump)
    for g, v in brute(dump.features, dump.classes, dump.domains).items():
        assert abs(inv.per_group[g] - v) < 1e-12
    for g, v in brute(dump.features, dump.domains, dump.classes).items():
        assert abs(sep.per_group[g] - v) < 1e-12


def test_metric_trivial_values():
    same = FeatureDump.build(np.tile([[1.0, 0.0]], (4, 1)), [0, 0, 1, 1], [0, 1, 0, 1])
    assert domain_invariance_metric(same).mean == 0.0
    assert class_separability_metric(same).mean == 0.0
    anti = FeatureDump.build(np.array([[1.0, 0.0], [-1.0, 0.0]]), [0, 0], [0, 1])
    assert domain_invariance_metric(anti).per_group[0] == 1.0
    ortho = FeatureDump.build(np.array([[1.0, 0.0], [0.0, 1.0]]), [0, 1], [0, 0])
    assert class_separability_metric(ortho).per_group[0] == 0.5


def test_metric_errors_and_skips(caplog):
    single_domain_class = FeatureDump.build(np.eye(3), [0, 0, 1], [0, 1, 1])
    m = domain_invariance_metric(single_domain_class)
    assert set(m.per_group) == {0} and "skipped" in caplog.text
    with pytest.raises(ValueError):
        domain_invariance_metric(FeatureDump.build(np.eye(2), [0, 1], [0, 0]))
    with pytest.raises(ValueError):
        class_separability_metric(FeatureDump.build(np.eye(3), [0, 1, 0], [0, 0, 1]))


def test_metrics_rotation_invariant():
    dump = seeded_dump(1)
    q, _ = np.linalg.qr(np.random.default_rng(2).standard_normal((6, 6)))
    rot = FeatureDump(dump.features @ q, dump.classes, dump.domains, dump.split, dump.iteration)
    assert abs(domain_invariance_metric(rot).mean - domain_invariance_metric(dump).mean) < 1e-12
    assert abs(class_separability_metric(rot).mean - class_separability_metric(dump).mean) < 1e-12


def test_mds_recovers_planted_points():
    pts = np.random.default_rng(0).standard_normal((50, 2)) * [2.0, 1.0]
    emb = classical_mds(pts, normalize=False)
    assert procrustes(pts, emb.coords)[2] < 1e-6
    # without scaling: orthogonal alignment of the centred points
    ref = pts - pts.mean(axis=0)
    u, _, vt = np.linalg.svd(emb.coords.T @ ref)
    assert np.sqrt(np.mean((emb.coords @ u @ vt - ref) ** 2)) < 1e-6
    assert emb.eigenvalues[0] >= emb.eigenvalues[1] >= -1e-9
    mirrored = classical_mds(pts * [-1.0, 1.0], normalize=False)
    assert procrustes(pts, mirrored.coords)[2] < 1e-6


def test_mds_identical_points_and_errors():
    emb = classical_mds(np.ones((5, 3)))
    assert np.array_equal(np.abs(emb.coords), np.zeros((5, 2)))
    with pytest.raises(ValueError):
        classical_mds(np.ones((2, 3)))
    pts = np.random.default_rng(1).standard_normal((20, 2))
    with pytest.raises(ConvergenceError) as e:
        classical_mds(pts, normalize=False, tol=0.0, max_iter=3)
    assert "residual" in str(e.value)


def test_mds_on_dump_uses_unit_rows():
    dump = seeded_dump(3)
    scaled = FeatureDump(dump.features * 7.0, dump.classes, dump.domains, dump.split, dump.iteration)
    a, b = classical_mds(dump), classical_mds(scaled)
    np.testing.assert_allclose(a.eigenvalues, b.eigenvalues, rtol=1e-9)


def test_ellipse_isotropic_and_degenerate():
    x = np.random.default_rng(0).standard_normal((10_000, 2))
    e = gaussian_ellipse(x)
    assert np.all(np.abs(e.axes / math.sqrt(5.991) - 1) < 0.03)
    line = np.stack([np.arange(10.0), 2 * np.arange(10.0)], axis=1)
    assert gaussian_ellipse(line).degenerate
    with pytest.raises(ValueError):
        gaussian_ellipse(x[:2])


def test_ellipse_rotation_equivariance():
    x = np.random.default_rng(1).standard_normal((500, 2)) * [3.0, 1.0]
    a = gaussian_ellipse(x)
    b = gaussian_ellipse(x @ np.array([[0.0, 1.0], [-1.0, 0.0]]))  # rotate by +90 degrees
    np.testing.assert_allclose(a.axes, b.axes, rtol=1e-12)
    assert (b.angle - a.angle) % math.pi == pytest.approx(math.pi / 2, abs=1e-9)


def test_dump_round_trip_and_errors(tmp_path):
    dump = seeded_dump(4)
    save_dump(dump, tmp_path / "f")
    back = load_dump(tmp_path / "f")
    assert back.equals(dump) and back.features.tobytes() == dump.features.tobytes()
    blob = (tmp_path / "f" / "features.tplf").read_bytes()
    (tmp_path / "f" / "features.tplf").write_bytes(blob[:-1])
    with pytest.raises(DumpFormatError, match="expected"):
        load_dump(tmp_path / "f")
    (tmp_path / "f" / "features.tplf").write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(DumpFormatError, match="magic"):
        load_dump(tmp_path / "f")
    with pytest.raises(ValueError):
        FeatureDump(np.zeros((2, 3)), [0], [0, 0], [0, 0], [0, 0])


def _report_inputs():
    dump = seeded_dump(5)
    metrics = {"domain_invariance": domain_invariance_metric(dump),
               "class_separability": class_separability_metric(dump)}
    emb = classical_mds(dump)
    hist = [(0, 0.3, 0.0, 1.0, 0.0), (10, 0.25, 0.2, 1 / 1.2, 1 - 1 / 1.2)]
    return dump, metrics, emb, hist


def test_report_deterministic_and_round_trips(tmp_path):
    dump, metrics, emb, hist = _report_inputs()
    export_report(metrics, emb, hist, tmp_path / "a", dump.classes, dump.domains)
    export_report(metrics, emb, hist, tmp_path / "b", dump.classes, dump.domains)
    for name in ("fig_mds.svg", "fig_metrics.svg", "fig_schedule.svg", "metrics.csv", "schedule.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / "fig_mds.svg").read_text().startswith("<svg")
    back = read_metrics_csv(tmp_path / "a" / "metrics.csv")
    for name, m in metrics.items():
        for g, v in m.per_group.items():
            assert back[name][str(g)] == v
        assert back[name]["mean"] == m.mean


def test_report_empty_metrics_writes_nothing(tmp_path):
    _, _, emb, hist = _report_inputs()
    with pytest.raises(ValueError):
        export_report({}, emb, hist, tmp_path / "r")
    with pytest.raises(ValueError):
        export_report({"x": GroupMetric({}, 0.0)}, emb, hist, tmp_path / "r")
    assert not (tmp_path / "r").exists()


def test_report_unwritable_path(tmp_path):
    _, metrics, emb, hist = _report_inputs()
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        export_report(metrics, emb, hist, blocker / "sub")
