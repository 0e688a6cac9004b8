import numpy as np
import pytest

from igcn.mesh import MeshGraph
from igcn.metrics import (INITIAL, EvaluationReport, ReportRow, dice_coefficient, directed_distances,
                          evaluate_suite, mean_distance, rmse_corresponding)
from igcn.phantom import box_mesh, sphere_mesh


def sheet(z):
    v = np.array([[0, 0, z], [1, 0, z], [1, 1, z], [0, 1, z]], dtype=float)
    return MeshGraph(v, [[0, 1, 2], [0, 2, 3]])


def rotation(rng):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    return q * np.sign(np.linalg.det(q))


# ---------------------------------------------------------------------- MD

def test_md_identical_is_zero():
    m = sphere_mesh(10.0, n=162)
    assert mean_distance(m, m) == 0.0


def test_md_parallel_sheets():
    assert mean_distance(sheet(0.0), sheet(3.0)) == pytest.approx(3.0, abs=1e-9)


def test_md_concentric_spheres():
    inner = sphere_mesh(20.0)
    outer = inner.with_vertices(inner.vertices * 22.0 / 20.0)
    md = mean_distance(inner, outer)
    assert md == pytest.approx(2.0, abs=0.1)
    # brute force: dense barycentric samples of every triangle of the other mesh
    w = np.array([(i, j, 8 - i - j) for i in range(9) for j in range(9 - i)]) / 8.0

    def brute(a, b):
        pts = np.einsum("kc,tcd->tkd", w, b.triangle_points()).reshape(-1, 3)
        sub = a.vertices[::20]
        d = np.sqrt(((sub[:, None] - pts[None]) ** 2).sum(-1)).min(axis=1)
        return d, directed_distances(a, b)[::20]

    for a, b in ((outer, inner), (inner, outer)):
        approx, exact = brute(a, b)
        assert np.all(exact <= approx + 1e-12)
        assert np.all(approx - exact < 0.05)


def test_md_symmetric(rng):
    a = sphere_mesh(15.0, n=162)
    b = a.with_vertices(a.vertices * [1.2, 0.9, 1.0] + rng.normal(0, 0.3, size=a.vertices.shape))
    assert mean_distance(a, b) == pytest.approx(mean_distance(b, a), abs=1e-12)


def test_md_empty_rejected():
    with pytest.raises(ValueError):
        mean_distance(MeshGraph(np.zeros((0, 3)), np.zeros((0, 3))), sheet(0.0))


# -------------------------------------------------------------------- RMSE

def test_rmse_examples():
    v = np.zeros((2, 3))
    assert rmse_corresponding(v, v) == 0.0
    t = np.array([1.0, -2.0, 2.0])
    assert rmse_corresponding(v + t, v) == pytest.approx(3.0)
    assert rmse_corresponding([[1.0, 0, 0], [0, 2.0, 0]], v) == pytest.approx(np.sqrt(2.5))


def test_rmse_size_mismatch():
    with pytest.raises(ValueError):
        rmse_corresponding(np.zeros((2, 3)), np.zeros((3, 3)))


def test_rmse_bounds_directed_mean(rng):
    a = sphere_mesh(15.0, n=162)
    for _ in range(5):
        b = a.with_vertices(a.vertices + rng.normal(0, 1.0, size=a.vertices.shape))
        assert rmse_corresponding(b, a) >= directed_distances(b, a).mean()


# -------------------------------------------------------------------- Dice

def test_dice_identical_and_disjoint():
    a = box_mesh((0, 0, 0), (10, 10, 10))
    assert dice_coefficient(a, a) == 1.0
    assert dice_coefficient(a, box_mesh((20, 0, 0), (30, 10, 10))) == 0.0


def test_dice_half_overlapping_cubes():
    a = box_mesh((0, 0, 0), (1, 1, 1))
    b = box_mesh((0.5, 0, 0), (1.5, 1, 1))
    spacing = 0.05
    got = dice_coefficient(a, b, spacing)
    assert got == pytest.approx(0.5, abs=0.02)
    # brute-force count of lattice points inside each box
    g = np.arange(-0.5, 2.0, spacing) + spacing / 2
    x, y, z = np.meshgrid(g, g, g, indexing="ij")
    ina = (x > 0) & (x < 1) & (y > 0) & (y < 1) & (z > 0) & (z < 1)
    inb = (x > 0.5) & (x < 1.5) & (y > 0) & (y < 1) & (z > 0) & (z < 1)
    assert got == pytest.approx(2 * (ina & inb).sum() / (ina.sum() + inb.sum()), abs=0.02)


def test_dice_symmetric_and_rigid_invariant(rng):
    a = sphere_mesh(12.0, n=162)
    b = a.with_vertices(a.vertices + [4.0, 1.0, -2.0])
    d = dice_coefficient(a, b, 1.0)
    assert dice_coefficient(b, a, 1.0) == pytest.approx(d, abs=1e-12)
    r, t = rotation(rng), rng.normal(0, 20, size=3)
    ra, rb = (m.with_vertices(m.vertices @ r.T + t) for m in (a, b))
    assert dice_coefficient(ra, rb, 1.0) == pytest.approx(d, abs=0.02)


def test_dice_needs_closed_mesh():
    with pytest.raises(ValueError):
        dice_coefficient(sheet(0.0), box_mesh((0, 0, 0), (1, 1, 1)), 0.1)


# ------------------------------------------------------------------ report

class _Sample:
    def __init__(self, sid, initial, target):
        self.sample_id, self.initial_mesh, self.target_mesh = sid, initial, target


def _suite(rng, n=3):
    base = sphere_mesh(15.0, n=162)
    out = []
    for i in range(n):
        target = base.with_vertices(base.vertices + rng.normal(0, 2, size=3))
        out.append(_Sample(f"test_{i:03d}", base, target))
    return out


def test_report_oracle_column(rng):
    samples = _suite(rng)
    report = evaluate_suite({"Ground truth": lambda s: (s.target_mesh, 1.0)}, samples)
    assert report.variants == [INITIAL, "Ground truth"]
    assert len(report.rows) == len(samples) * 2
    assert report.aggregate("Ground truth", "md") == (0.0, 0.0)
    assert report.aggregate("Ground truth", "rmse") == (0.0, 0.0)
    assert report.aggregate("Ground truth", "dsc") == (1.0, 0.0)
    assert report.aggregate(INITIAL, "md")[0] > 0
    assert np.all(report.values(INITIAL, "dsc") <= 1.0)


def test_report_threads_match_serial(rng):
    samples = _suite(rng)
    pred = {"shifted": lambda s: (s.initial_mesh.with_vertices(s.initial_mesh.vertices + 0.5), 2.0)}
    a = evaluate_suite(pred, samples).to_csv()
    assert evaluate_suite(pred, samples, workers=3).to_csv() == a


def test_report_table_layout():
    rows = [ReportRow("s0", v, 1.0 + k, 2.0, 0.9, float("nan") if v == INITIAL else 30.0)
            for k, v in enumerate([INITIAL, "no-mapping", "full"])]
    report = EvaluationReport(rows, [INITIAL, "no-mapping", "full"])
    lines = report.to_text().splitlines()
    assert "Initial" in lines[1] and "no-mapping" in lines[1] and "full" in lines[1]
    assert lines[3].split()[:2] == ["MD", "[mm]"]
    assert "90.00 +- 0.00" in report.to_text()
    csv_lines = report.to_csv().splitlines()
    assert csv_lines[0] == "sample_id,variant,md_mm,rmse_mm,dsc_percent,time_ms"
    assert csv_lines[1].endswith(",")  # no timing for the Initial column
