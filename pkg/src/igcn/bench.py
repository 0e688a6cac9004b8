"""Timing of the numba kernels against their numpy twins, plus a model forward pass.

Both kernel forms are called directly, so one process measures both whatever
``IGCN_DISABLE_NUMBA`` says.  Inputs are the shapes a desk-scale run sees.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import _accel, kernels
from .camera import bilinear_stencil
from .dataset import DatasetConfig
from .phantom import (PhantomSpec, VoxelVolume, compose_attenuation_volume, generate_phantom_mesh,
                      phantom_grid, ray_segments)


@dataclass
class BenchRow:
    name: str
    numba_ms: float
    numpy_ms: float
    max_abs_diff: float

    @property
    def speedup(self) -> float:
        return self.numpy_ms / self.numba_ms if self.numba_ms > 0 else float("nan")


def _best_ms(fn, repeats: int) -> float:
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


def _cases(image_size: int, seed: int):
    rng = np.random.default_rng(seed)
    spec = PhantomSpec()
    mesh = generate_phantom_mesh(spec)
    tri = np.ascontiguousarray(mesh.triangle_points())

    grid = phantom_grid(spec)
    volume = compose_attenuation_volume(spec, mesh, grid)
    camera = DatasetConfig(image_size=image_size).camera()
    starts, dirs, t0, t1 = ray_segments(volume, camera)
    ray_args = (volume.values, volume.origin, np.asarray(volume.spacing, float), starts, dirs, t0, t1,
                0.5 * min(volume.spacing))

    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    vox = VoxelVolume.covering(lo, hi, 2.0, margin=2.0)
    parity_args = (tri, vox.origin, np.asarray(vox.spacing, float), np.asarray(vox.dims, dtype=np.int64),
                   *kernels._PARITY_JITTER)

    pts = mesh.vertices + rng.normal(0.0, 3.0, size=mesh.vertices.shape)

    size = image_size // 4
    grad = rng.normal(size=(mesh.n, 32))
    st = bilinear_stencil(rng.uniform(0, size - 1, size=(mesh.n, 2)), size, size)
    scatter_args = (grad, st.ix0, st.iy0, st.ix1, st.iy1, st.fx, st.fy, size, size)

    return [
        ("drr_line_integrals", kernels.integrate_rays_nb, kernels.integrate_rays_np, ray_args),
        ("voxel_parity", kernels.parity_counts_nb, kernels.parity_counts_np, parity_args),
        ("point_mesh_distance", kernels.point_mesh_distance_nb, kernels.point_mesh_distance_np, (pts, tri)),
        ("bilinear_scatter", kernels.bilinear_scatter_nb, kernels.bilinear_scatter_np, scatter_args),
    ]


def run_kernel_bench(image_size: int = 128, repeats: int = 3, seed: int = 0) -> list[BenchRow]:
    """Best-of-``repeats`` wall time per kernel form; numba is warmed up first."""
    rows = []
    for name, fn_nb, fn_np, args in _cases(image_size, seed):
        ref = fn_np(*args)
        if _accel.HAVE_NUMBA:
            out = fn_nb(*args)  # compile outside the timed region
            nb_ms = _best_ms(lambda: fn_nb(*args), repeats)
            diff = float(np.max(np.abs(np.asarray(out, float) - np.asarray(ref, float))))
        else:
            nb_ms, diff = float("nan"), float("nan")
        np_ms = _best_ms(lambda: fn_np(*args), repeats)
        rows.append(BenchRow(name, nb_ms, np_ms, diff))
    return rows


def forward_ms(image_size: int = 128, repeats: int = 5, seed: int = 0, mode: str = "full") -> float:
    """Best eval-mode forward time of an untrained desk model."""
    from .model import BackboneConfig, IgcnModel, ModelConfig
    from .train import predict

    cfg = DatasetConfig(image_size=image_size)
    mesh = generate_phantom_mesh(cfg.phantom)
    camera = cfg.camera()
    model = IgcnModel(ModelConfig(backbone=BackboneConfig(input_size=image_size), mode=mode), seed=seed)
    image = np.random.default_rng(seed).uniform(size=(image_size, image_size))
    scale = np.abs(mesh.vertices).max(axis=0)
    predict(model, mesh, image, camera, scale)
    return min(predict(model, mesh, image, camera, scale)[1] for _ in range(repeats))


def format_rows(rows) -> str:
    lines = [f"{'kernel':<22}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}{'max diff':>12}"]
    for r in rows:
        lines.append(f"{r.name:<22}{r.numba_ms:>12.2f}{r.numpy_ms:>12.2f}{r.speedup:>9.1f}x{r.max_abs_diff:>12.2e}")
    return "\n".join(lines)
