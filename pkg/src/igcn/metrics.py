"""Shape-similarity metrics and the per-variant comparison report."""
from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .mesh import MeshGraph
from .phantom import VoxelVolume, voxelize_mesh

INITIAL = "Initial"


def directed_distances(a: MeshGraph, b: MeshGraph) -> np.ndarray:
    """Exact distance from every vertex of ``a`` to the surface of ``b``."""
    if a.n == 0 or len(b.triangles) == 0:
        raise ValueError("mean distance needs nonempty meshes")
    return kernels.point_mesh_distance(a.vertices, b.triangle_points())


def mean_distance(a: MeshGraph, b: MeshGraph) -> float:
    """Average of the two directed mean point-to-surface distances (mm)."""
    return 0.5 * (float(directed_distances(a, b).mean()) + float(directed_distances(b, a).mean()))


def rmse_corresponding(a: MeshGraph, b: MeshGraph) -> float:
    va = a.vertices if isinstance(a, MeshGraph) else np.asarray(a, dtype=float)
    vb = b.vertices if isinstance(b, MeshGraph) else np.asarray(b, dtype=float)
    if va.shape != vb.shape:
        raise ValueError(f"size mismatch {va.shape} vs {vb.shape}")
    return float(np.sqrt(((va - vb) ** 2).sum(axis=1).mean()))


def dice_coefficient(a: MeshGraph, b: MeshGraph, spacing: float = 2.0) -> float:
    """Dice overlap of the two meshes voxelized on one shared grid (fraction)."""
    lo = np.minimum(a.vertices.min(axis=0), b.vertices.min(axis=0))
    hi = np.maximum(a.vertices.max(axis=0), b.vertices.max(axis=0))
    # anchor the grid to multiples of the spacing so rigid shifts see the same lattice
    lo = np.floor(lo / spacing) * spacing
    hi = np.ceil(hi / spacing) * spacing
    grid = VoxelVolume.covering(lo, hi, spacing, margin=spacing)
    occ_a = voxelize_mesh(a, grid)
    occ_b = voxelize_mesh(b, grid)
    total = int(occ_a.sum()) + int(occ_b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((occ_a & occ_b).sum()) / total


@dataclass
class ReportRow:
    sample_id: str
    variant: str
    md: float
    rmse: float
    dsc: float
    time_ms: float = float("nan")


@dataclass
class EvaluationReport:
    rows: list = field(default_factory=list)
    variants: list = field(default_factory=list)

    def values(self, variant: str, metric: str) -> np.ndarray:
        return np.array([getattr(r, metric) for r in self.rows if r.variant == variant])

    def aggregate(self, variant: str, metric: str):
        v = self.values(variant, metric)
        v = v[np.isfinite(v)]
        if v.size == 0:
            return float("nan"), float("nan")
        return float(v.mean()), float(v.std())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id", "variant", "md_mm", "rmse_mm", "dsc_percent", "time_ms"])
        for r in self.rows:
            w.writerow([r.sample_id, r.variant, f"{r.md:.6f}", f"{r.rmse:.6f}", f"{100 * r.dsc:.4f}",
                        "" if not np.isfinite(r.time_ms) else f"{r.time_ms:.3f}"])
        return buf.getvalue()

    def to_text(self) -> str:
        """Table with metrics as rows and variants as columns (mean +- std)."""
        names = [("MD [mm]", "md", 1.0), ("RMSE [mm]", "rmse", 1.0), ("DSC [%]", "dsc", 100.0)]
        header = ["", *self.variants]
        body = []
        for label, key, mult in names:
            cells = [label]
            for v in self.variants:
                m, s = self.aggregate(v, key)
                cells.append(f"{m * mult:.2f} +- {s * mult:.2f}")
            body.append(cells)
        timing = ["time [ms]"]
        for v in self.variants:
            m, s = self.aggregate(v, "time_ms")
            timing.append("-" if not np.isfinite(m) else f"{m:.1f} +- {s:.1f}")
        body.append(timing)
        widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
        fmt = lambda r: "  ".join(c.ljust(widths[i]) if i == 0 else c.rjust(widths[i]) for i, c in enumerate(r))
        rule = "-" * len(fmt(header))
        return "\n".join([rule, fmt(header), rule, *map(fmt, body), rule]) + "\n"


def _score(sample_id, variant, pred: MeshGraph, target: MeshGraph, spacing, ms):
    return ReportRow(sample_id, variant, mean_distance(pred, target), rmse_corresponding(pred, target),
                     dice_coefficient(pred, target, spacing), ms)


def evaluate_suite(predictors: dict, samples, spacing: float = 2.0, workers: int = 1) -> EvaluationReport:
    """Score every sample under the Initial column and each predictor.

    ``predictors`` maps a variant name to ``fn(sample) -> (mesh, ms)``.
    Predictions run serially (timings stay comparable); metrics may use
    ``workers`` threads.
    """
    variants = [INITIAL, *predictors]
    jobs = []
    for s in samples:
        jobs.append((s.sample_id, INITIAL, s.initial_mesh, s.target_mesh, spacing, float("nan")))
        for name, fn in predictors.items():
            mesh, ms = fn(s)
            jobs.append((s.sample_id, name, mesh, s.target_mesh, spacing, ms))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(lambda j: _score(*j), jobs))
    else:
        rows = [_score(*j) for j in jobs]
    return EvaluationReport(rows, variants)
