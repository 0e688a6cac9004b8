"""Projection cameras and bilinear sampling of image-space feature maps.

Pixel coordinates use a top-left origin, ``u`` to the right and ``v`` down.
Texel ``(row i, col j)`` of a map sits at the integer coordinate ``(u=j, v=i)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels


class ProjectionError(ValueError):
    """A point projects onto (or behind) the camera plane."""


@dataclass(frozen=True, eq=False)
class ProjectionCamera:
    matrix: np.ndarray
    image_width: int
    image_height: int

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64).reshape(3, 4)
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValueError("camera image dimensions must be positive")

    @property
    def is_affine(self) -> bool:
        return bool(np.all(self.matrix[2, :3] == 0.0))

    def scaled(self, width: int, height: int) -> "ProjectionCamera":
        """Same view rendered at a different image resolution."""
        s = np.diag([width / self.image_width, height / self.image_height, 1.0])
        return ProjectionCamera(s @ self.matrix, width, height)

    def rays(self, u, v):
        """Back-project pixel coordinates into (start point, unit direction) pairs."""
        u = np.asarray(u, dtype=np.float64).ravel()
        v = np.asarray(v, dtype=np.float64).ravel()
        m, p4 = self.matrix[:, :3], self.matrix[:, 3]
        if self.is_affine:
            top = m[:2]
            d = np.cross(top[0], top[1])
            d /= np.linalg.norm(d)
            rhs = np.stack([u * p4[2] - p4[0], v * p4[2] - p4[1]], axis=1)
            starts = rhs @ np.linalg.pinv(top).T
            dirs = np.broadcast_to(d, starts.shape).copy()
        else:
            minv = np.linalg.inv(m)
            center = -minv @ p4
            h = np.stack([u, v, np.ones_like(u)], axis=1)
            dirs = h @ minv.T
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            starts = np.broadcast_to(center, dirs.shape).copy()
        return starts, dirs


def orthographic_camera(width: int, height: int, pixel_mm: float = 1.0) -> ProjectionCamera:
    """Parallel projection along +y; image u follows +x, v follows -z."""
    s = 1.0 / pixel_mm
    matrix = [[s, 0, 0, width / 2], [0, 0, -s, height / 2], [0, 0, 0, 1]]
    return ProjectionCamera(np.array(matrix, dtype=float), width, height)


def perspective_camera(width: int, height: int, source_distance: float = 1000.0,
                       fov_mm: float = 320.0) -> ProjectionCamera:
    """Point source on the -y axis looking along +y through the origin.

    ``fov_mm`` is the horizontal extent covered at the isocenter (origin).
    """
    f = source_distance * width / fov_mm
    cx, cy = width / 2, height / 2
    matrix = [
        [f, cx, 0, cx * source_distance],
        [0, cy, -f, cy * source_distance],
        [0, 1, 0, source_distance],
    ]
    return ProjectionCamera(np.array(matrix, dtype=float), width, height)


def project_vertices(camera: ProjectionCamera, positions) -> np.ndarray:
    """(n, 3) mm positions to (n, 2) pixel coordinates ``(u, v)``."""
    x = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    h = x @ camera.matrix[:, :3].T + camera.matrix[:, 3]
    w = h[:, 2]
    if np.any(np.abs(w) < 1e-9):
        raise ProjectionError("point projects with zero homogeneous depth")
    return h[:, :2] / w[:, None]


def normalize_pixel(points, camera: ProjectionCamera) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    return p / np.array([camera.image_width, camera.image_height], dtype=np.float64)


@dataclass(frozen=True)
class BilinearStencil:
    """Texel indices and weights of a batch of bilinear lookups."""

    ix0: np.ndarray
    iy0: np.ndarray
    ix1: np.ndarray
    iy1: np.ndarray
    fx: np.ndarray
    fy: np.ndarray
    inside_u: np.ndarray
    inside_v: np.ndarray


def _axis_stencil(c, size):
    lo_ok = c >= 0
    hi_ok = c <= size - 1
    c = np.clip(c, 0, size - 1)
    if size == 1:
        i0 = np.zeros(c.shape, dtype=np.int64)
        return i0, i0, np.zeros_like(c), np.zeros(c.shape, dtype=bool)
    i0 = np.minimum(np.floor(c).astype(np.int64), size - 2)
    return i0, i0 + 1, c - i0, lo_ok & hi_ok


def bilinear_stencil(points, height: int, width: int) -> BilinearStencil:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if not np.all(np.isfinite(p)):
        raise FloatingPointError("non-finite sampling coordinates")
    ix0, ix1, fx, in_u = _axis_stencil(p[:, 0], width)
    iy0, iy1, fy, in_v = _axis_stencil(p[:, 1], height)
    return BilinearStencil(ix0, iy0, ix1, iy1, fx, fy, in_u, in_v)


def _as_hwc(fmap):
    fmap = np.asarray(fmap)
    return fmap[..., None] if fmap.ndim == 2 else fmap


def bilinear_sample(fmap, points, st: BilinearStencil | None = None) -> np.ndarray:
    """Sample an (H, W, C) map at (n, 2) map-space points; returns (n, C).

    Coordinates are clamped to ``[0, W-1] x [0, H-1]``.
    """
    fmap = _as_hwc(fmap)
    if fmap.size == 0:
        raise ValueError("cannot sample an empty map")
    h, w, _ = fmap.shape
    if st is None:
        st = bilinear_stencil(points, h, w)
    fx = st.fx[:, None].astype(fmap.dtype)
    fy = st.fy[:, None].astype(fmap.dtype)
    top = fmap[st.iy0, st.ix0] * (1 - fx) + fmap[st.iy0, st.ix1] * fx
    bot = fmap[st.iy1, st.ix0] * (1 - fx) + fmap[st.iy1, st.ix1] * fx
    return top * (1 - fy) + bot * fy


def bilinear_sample_backward(fmap, points, grad_out, st: BilinearStencil | None = None):
    """Vector-Jacobian products of :func:`bilinear_sample`.

    Returns ``(grad_map, grad_points)``; coordinate gradients vanish along any
    axis where the point was clamped.
    """
    fmap = _as_hwc(fmap)
    h, w, _ = fmap.shape
    if st is None:
        st = bilinear_stencil(points, h, w)
    grad_out = np.asarray(grad_out, dtype=fmap.dtype).reshape(-1, fmap.shape[2])
    grad_map = kernels.bilinear_scatter(grad_out, st.ix0, st.iy0, st.ix1, st.iy1, st.fx, st.fy, h, w)
    m00 = fmap[st.iy0, st.ix0]
    m01 = fmap[st.iy0, st.ix1]
    m10 = fmap[st.iy1, st.ix0]
    m11 = fmap[st.iy1, st.ix1]
    fx = st.fx[:, None].astype(fmap.dtype)
    fy = st.fy[:, None].astype(fmap.dtype)
    du = (1 - fy) * (m01 - m00) + fy * (m11 - m10)
    dv = (1 - fx) * (m10 - m00) + fx * (m11 - m01)
    gu = np.where(st.inside_u & (w > 1), (du * grad_out).sum(axis=1), 0.0)
    gv = np.where(st.inside_v & (h > 1), (dv * grad_out).sum(axis=1), 0.0)
    return grad_map, np.stack([gu, gv], axis=1).astype(fmap.dtype)


# ----------------------------------------------------------------------------
# I/O: 12 matrix numbers row-major, then width and height
# ----------------------------------------------------------------------------

def write_camera(path, camera: ProjectionCamera) -> None:
    rows = [" ".join(f"{x:.17g}" for x in row) for row in camera.matrix]
    Path(path).write_text("\n".join(rows) + f"\n{camera.image_width} {camera.image_height}\n")


def read_camera(path) -> ProjectionCamera:
    tokens = Path(path).read_text().split()
    if len(tokens) != 14:
        raise ValueError(f"{path}: expected 14 numbers, found {len(tokens)}")
    return ProjectionCamera(np.array([float(t) for t in tokens[:12]]).reshape(3, 4),
                            int(tokens[12]), int(tokens[13]))
