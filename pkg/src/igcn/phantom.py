"""Synthetic organ phantoms, attenuation volumes and ray-cast radiographs.

World frame (mm): x patient left-right, y anterior-posterior (the X-ray
direction), z craniocaudal.  The undeformed organ is centred on the origin,
which is also the camera isocenter.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull

from . import kernels
from .camera import ProjectionCamera
from .mesh import MeshError, MeshGraph


class WatertightnessError(MeshError):
    pass


class ExcessiveDeformationError(ValueError):
    """A deformation flipped at least one triangle."""


@dataclass(frozen=True, eq=False)
class VoxelVolume:
    """Scalar grid; ``origin`` is the centre of voxel (0, 0, 0)."""

    values: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        vals = np.asarray(self.values)
        if vals.ndim != 3 or min(vals.shape) <= 0:
            raise ValueError(f"volume must be 3-D and nonempty, got shape {vals.shape}")
        sp = tuple(float(s) for s in self.spacing)
        if min(sp) <= 0:
            raise ValueError("voxel spacing must be positive")
        if vals.dtype != bool and not np.all(np.isfinite(vals)):
            raise ValueError("volume values must be finite")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "spacing", sp)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @classmethod
    def empty(cls, dims, spacing, origin, dtype=np.float64) -> "VoxelVolume":
        return cls(np.zeros(tuple(int(d) for d in dims), dtype=dtype), spacing, origin)

    @classmethod
    def covering(cls, lo, hi, spacing, margin: float = 0.0) -> "VoxelVolume":
        """Zero grid whose voxel centres span the box ``[lo, hi]`` (plus margin)."""
        sp = np.broadcast_to(np.asarray(spacing, dtype=float), 3)
        lo = np.asarray(lo, dtype=float) - margin
        hi = np.asarray(hi, dtype=float) + margin
        dims = np.floor((hi - lo) / sp).astype(int) + 2
        return cls.empty(dims, tuple(sp), tuple(lo - 0.5 * sp))

    @property
    def dims(self):
        return self.values.shape

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    def axis_centers(self, axis: int) -> np.ndarray:
        return self.origin[axis] + self.spacing[axis] * np.arange(self.dims[axis])

    def centers(self):
        return np.meshgrid(*(self.axis_centers(a) for a in range(3)), indexing="ij")

    def support_bounds(self):
        """Box outside of which trilinear lookups are identically zero."""
        o, s = np.array(self.origin), np.array(self.spacing)
        return o - s, o + s * np.array(self.dims)

    def with_values(self, values) -> "VoxelVolume":
        return VoxelVolume(values, self.spacing, self.origin)


@dataclass(frozen=True)
class PhantomSpec:
    organ_axes: tuple = (80.0, 60.0, 55.0)
    organ_exponent: float = 2.5
    n_vertices: int = 450
    body_axes: tuple = (170.0, 125.0)
    body_center: tuple = (40.0, 10.0)
    spine_radius: float = 15.0
    spine_center: tuple = (40.0, 85.0)
    body_attenuation: float = 0.02
    organ_attenuation: float = 0.012
    spine_attenuation: float = 0.05
    grid_spacing: tuple = (2.0, 2.0, 2.0)
    z_half_extent: float = 130.0
    seed: int = 0

    def validate(self) -> None:
        geometric = [*self.organ_axes, self.organ_exponent, *self.body_axes, self.spine_radius,
                     *self.grid_spacing, self.z_half_extent]
        if min(geometric) <= 0:
            raise ValueError("phantom geometric parameters must be positive")
        if self.n_vertices < 4:
            raise ValueError("organ mesh needs at least 4 vertices")
        if min(self.body_attenuation, self.organ_attenuation, self.spine_attenuation) < 0:
            raise ValueError("attenuation levels must be non-negative")
        ax, ay, _ = self.organ_axes
        bx, by = self.body_axes
        cx, cy = self.body_center
        for sx in (-1, 1):
            for sy in (-1, 1):
                if ((sx * ax - cx) / bx) ** 2 + ((sy * ay - cy) / by) ** 2 >= 1.0:
                    raise ValueError("organ bounding box is not contained in the body ellipse")
        if self.organ_axes[2] >= self.z_half_extent:
            raise ValueError("organ exceeds the volume's craniocaudal extent")


@dataclass(frozen=True, eq=False)
class DeformationField:
    """Global translation plus a sum of Gaussian radial-basis displacements."""

    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    widths: np.ndarray = field(default_factory=lambda: np.zeros(0))
    amplitudes: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))
        object.__setattr__(self, "centers", np.asarray(self.centers, dtype=float).reshape(-1, 3))
        object.__setattr__(self, "widths", np.asarray(self.widths, dtype=float).reshape(-1))
        object.__setattr__(self, "amplitudes", np.asarray(self.amplitudes, dtype=float).reshape(-1, 3))
        k = len(self.centers)
        if len(self.widths) != k or len(self.amplitudes) != k:
            raise ValueError("centers, widths and amplitudes must have matching lengths")
        if np.any(self.widths <= 0):
            raise ValueError("RBF widths must be positive")

    def displacement(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        d = np.broadcast_to(self.translation, p.shape).copy()
        for c, w, a in zip(self.centers, self.widths, self.amplitudes):
            r2 = ((p - c) ** 2).sum(axis=1)
            d += np.exp(-r2 / (2.0 * w * w))[:, None] * a
        return d


# ----------------------------------------------------------------------------
# meshes
# ----------------------------------------------------------------------------

def fibonacci_sphere(n: int) -> np.ndarray:
    k = np.arange(n) + 0.5
    z = 1.0 - 2.0 * k / n
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * k
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def generate_phantom_mesh(spec: PhantomSpec) -> MeshGraph:
    """Closed superellipsoid surface, outward-oriented, ``spec.n_vertices`` vertices.

    Geometry depends only on the shape parameters; ``spec.seed`` is ignored.
    """
    spec.validate()
    dirs = fibonacci_sphere(spec.n_vertices)
    tris = ConvexHull(dirs).simplices.astype(np.int64)
    p = dirs[tris]
    normal = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    flip = (normal * p.mean(axis=1)).sum(axis=1) < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    tris = tris[np.lexsort(tris.T[::-1])]
    e = spec.organ_exponent
    axes = np.asarray(spec.organ_axes, dtype=float)
    scale = (np.abs(dirs / axes) ** e).sum(axis=1) ** (-1.0 / e)
    return MeshGraph(dirs * scale[:, None], tris)


def box_mesh(lo, hi) -> MeshGraph:
    """Axis-aligned box as 12 outward-oriented triangles."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    corners = np.array([[(hi if (k >> a) & 1 else lo)[a] for a in range(3)] for k in range(8)])
    quads = [(0, 2, 3, 1), (4, 5, 7, 6), (0, 1, 5, 4), (2, 6, 7, 3), (0, 4, 6, 2), (1, 3, 7, 5)]
    tris = []
    for a, b, c, d in quads:
        tris += [(a, b, c), (a, c, d)]
    return MeshGraph(corners, np.array(tris))


def sphere_mesh(radius: float, n: int = 642, center=(0.0, 0.0, 0.0)) -> MeshGraph:
    spec = PhantomSpec(organ_axes=(radius,) * 3, organ_exponent=2.0, n_vertices=n)
    m = generate_phantom_mesh(spec)
    return m.with_vertices(m.vertices + np.asarray(center, float))


def apply_deformation(mesh: MeshGraph, fld: DeformationField, check: bool = True) -> MeshGraph:
    moved = mesh.vertices + fld.displacement(mesh.vertices)
    if check:
        before = mesh.face_normals()
        after = mesh.face_normals(moved)
        flipped = int(np.sum((before * after).sum(axis=1) <= 0))
        if flipped:
            raise ExcessiveDeformationError(f"deformation flips {flipped} triangles")
    return mesh.with_vertices(moved)


# ----------------------------------------------------------------------------
# volumes
# ----------------------------------------------------------------------------

def voxelize_mesh(mesh: MeshGraph, grid: VoxelVolume) -> np.ndarray:
    """Boolean occupancy of voxel centres by crossing parity along +x."""
    if not mesh.is_watertight():
        raise WatertightnessError("mesh is not closed (some edge is not shared by exactly two triangles)")
    return kernels.parity_occupancy(mesh.triangle_points(), grid.origin, grid.spacing, grid.dims)


def phantom_grid(spec: PhantomSpec) -> VoxelVolume:
    bx, by = spec.body_axes
    cx, cy = spec.body_center
    lo = (cx - bx, cy - by, -spec.z_half_extent)
    hi = (cx + bx, cy + by, spec.z_half_extent)
    return VoxelVolume.covering(lo, hi, spec.grid_spacing)


def compose_attenuation_volume(spec: PhantomSpec, organ: MeshGraph,
                               grid: VoxelVolume | None = None) -> VoxelVolume:
    spec.validate()
    grid = phantom_grid(spec) if grid is None else grid
    x, y = grid.axis_centers(0)[:, None], grid.axis_centers(1)[None, :]
    bx, by = spec.body_axes
    body = ((x - spec.body_center[0]) / bx) ** 2 + ((y - spec.body_center[1]) / by) ** 2 <= 1.0
    spine = (x - spec.spine_center[0]) ** 2 + (y - spec.spine_center[1]) ** 2 <= spec.spine_radius ** 2
    plane = spec.body_attenuation * body + spec.spine_attenuation * spine
    values = np.repeat(plane[:, :, None], grid.dims[2], axis=2)
    if spec.organ_attenuation:
        values = values + spec.organ_attenuation * voxelize_mesh(organ, grid)
    return grid.with_values(values)


# ----------------------------------------------------------------------------
# radiographs
# ----------------------------------------------------------------------------

def _slab_interval(starts, dirs, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (lo - starts) * inv
        tb = (hi - starts) * inv
    tmin = np.where(dirs == 0, np.where((starts >= lo) & (starts <= hi), -np.inf, np.inf), np.minimum(ta, tb))
    tmax = np.where(dirs == 0, np.where((starts >= lo) & (starts <= hi), np.inf, -np.inf), np.maximum(ta, tb))
    return tmin.max(axis=1), tmax.min(axis=1)


def ray_segments(volume: VoxelVolume, camera: ProjectionCamera):
    """One ray per pixel clipped to the volume: ``(starts, dirs, t0, t1)``.

    Pixel (r, c) is the ray through (u=c, v=r).  Rays that miss get an empty
    interval ``t0 = t1 = 0``.
    """
    h, w = camera.image_height, camera.image_width
    vv, uu = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    starts, dirs = camera.rays(uu, vv)
    lo, hi = volume.support_bounds()
    t0, t1 = _slab_interval(starts, dirs, lo, hi)
    if not camera.is_affine:
        t0 = np.maximum(t0, 0.0)
    miss = ~(t1 > t0)
    return starts, dirs, np.where(miss, 0.0, t0), np.where(miss, 0.0, t1)


def line_integrals(volume: VoxelVolume, camera: ProjectionCamera, step: float | None = None) -> np.ndarray:
    """Raw (H, W) attenuation line integrals, trapezoidal with a fixed step."""
    starts, dirs, t0, t1 = ray_segments(volume, camera)
    step = 0.5 * min(volume.spacing) if step is None else float(step)
    vals = np.asarray(volume.values, dtype=np.float64)
    out = kernels.integrate_rays(vals, volume.origin, volume.spacing, starts, dirs, t0, t1, step)
    return out.reshape(camera.image_height, camera.image_width)


def normalize_display(raw) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    if hi <= lo:
        return np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


def render_drr(volume: VoxelVolume, camera: ProjectionCamera, step: float | None = None):
    """Returns ``(display image in [0, 1], raw line integrals)``."""
    raw = line_integrals(volume, camera, step)
    return normalize_display(raw), raw


# ----------------------------------------------------------------------------
# file formats
# ----------------------------------------------------------------------------

def write_volume(path, volume: VoxelVolume) -> None:
    """``<path>.raw`` (little-endian float32, C order over x, y, z) plus a ``<path>.hdr`` text header."""
    path = Path(path)
    np.ascontiguousarray(volume.values, dtype="<f4").tofile(path.with_suffix(".raw"))
    hdr = [
        "dims " + " ".join(str(d) for d in volume.dims),
        "spacing " + " ".join(f"{s:.17g}" for s in volume.spacing),
        "origin " + " ".join(f"{o:.17g}" for o in volume.origin),
        "dtype float32 little-endian",
        "order C (index = (ix * ny + iy) * nz + iz)",
    ]
    path.with_suffix(".hdr").write_text("\n".join(hdr) + "\n")


def read_volume(path) -> VoxelVolume:
    path = Path(path)
    meta = {}
    for line in path.with_suffix(".hdr").read_text().splitlines():
        key, _, rest = line.partition(" ")
        meta[key] = rest.split()
    dims = tuple(int(d) for d in meta["dims"])
    values = np.fromfile(path.with_suffix(".raw"), dtype="<f4")
    if values.size != np.prod(dims):
        raise ValueError(f"{path}: payload has {values.size} values, header expects {np.prod(dims)}")
    return VoxelVolume(values.reshape(dims).astype(np.float64),
                       tuple(float(s) for s in meta["spacing"]),
                       tuple(float(o) for o in meta["origin"]))


def write_pgm16(path, image) -> None:
    """Binary PGM (P5), maxval 65535, big-endian samples as the format requires."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.round(img * 65535).astype(">u2")
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm16(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while buf[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos].decode("ascii"))
    if tokens[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(buf[pos + 1:], dtype=dtype, count=w * h).reshape(h, w)
    return data.astype(np.float64) / maxval
