"""Hot numeric kernels, each with a numba loop form and a numpy vector form.

The public functions at the bottom pick one according to ``_accel.USE_NUMBA``.
Both forms are importable directly (``*_nb`` / ``*_np``) so tests and the
benchmark can compare them.
"""
import math

import numpy as np

from . import _accel
from ._accel import njit

# Column offsets that keep parity rays off mesh edges and vertices.
_PARITY_JITTER = (7.3e-7, 3.1e-7)


# ----------------------------------------------------------------------------
# bilinear scatter (backward of bilinear sampling w.r.t. the map)
# ----------------------------------------------------------------------------

@njit
def bilinear_scatter_nb(grad_out, ix0, iy0, ix1, iy1, fx, fy, height, width):
    n, c = grad_out.shape
    out = np.zeros((height, width, c), dtype=grad_out.dtype)
    for p in range(n):
        w00 = (1.0 - fx[p]) * (1.0 - fy[p])
        w01 = fx[p] * (1.0 - fy[p])
        w10 = (1.0 - fx[p]) * fy[p]
        w11 = fx[p] * fy[p]
        for k in range(c):
            g = grad_out[p, k]
            out[iy0[p], ix0[p], k] += w00 * g
            out[iy0[p], ix1[p], k] += w01 * g
            out[iy1[p], ix0[p], k] += w10 * g
            out[iy1[p], ix1[p], k] += w11 * g
    return out


def bilinear_scatter_np(grad_out, ix0, iy0, ix1, iy1, fx, fy, height, width):
    out = np.zeros((height, width, grad_out.shape[1]), dtype=grad_out.dtype)
    fx = fx[:, None].astype(grad_out.dtype)
    fy = fy[:, None].astype(grad_out.dtype)
    np.add.at(out, (iy0, ix0), (1 - fx) * (1 - fy) * grad_out)
    np.add.at(out, (iy0, ix1), fx * (1 - fy) * grad_out)
    np.add.at(out, (iy1, ix0), (1 - fx) * fy * grad_out)
    np.add.at(out, (iy1, ix1), fx * fy * grad_out)
    return out


# ----------------------------------------------------------------------------
# ray integration through a trilinear volume (DRR)
# ----------------------------------------------------------------------------

@njit
def _trilinear_nb(vol, gx, gy, gz):
    nx, ny, nz = vol.shape
    x0 = math.floor(gx)
    y0 = math.floor(gy)
    z0 = math.floor(gz)
    fx = gx - x0
    fy = gy - y0
    fz = gz - z0
    acc = 0.0
    for dx in range(2):
        ix = x0 + dx
        if ix < 0 or ix >= nx:
            continue
        wx = fx if dx else 1.0 - fx
        for dy in range(2):
            iy = y0 + dy
            if iy < 0 or iy >= ny:
                continue
            wy = fy if dy else 1.0 - fy
            for dz in range(2):
                iz = z0 + dz
                if iz < 0 or iz >= nz:
                    continue
                wz = fz if dz else 1.0 - fz
                acc += wx * wy * wz * vol[ix, iy, iz]
    return acc


@njit
def integrate_rays_nb(vol, origin, spacing, starts, dirs, t0, t1, step):
    m = starts.shape[0]
    out = np.zeros(m)
    for r in range(m):
        length = t1[r] - t0[r]
        if length <= 0.0:
            continue
        nseg = int(math.ceil(length / step))
        if nseg < 1:
            nseg = 1
        h = length / nseg
        total = 0.0
        for s in range(nseg + 1):
            t = t0[r] + s * h
            gx = (starts[r, 0] + t * dirs[r, 0] - origin[0]) / spacing[0]
            gy = (starts[r, 1] + t * dirs[r, 1] - origin[1]) / spacing[1]
            gz = (starts[r, 2] + t * dirs[r, 2] - origin[2]) / spacing[2]
            v = _trilinear_nb(vol, gx, gy, gz)
            if s == 0 or s == nseg:
                total += 0.5 * v
            else:
                total += v
        out[r] = total * h
    return out


def _trilinear_np(vol, g):
    """Zero-extended trilinear lookup; ``g`` is (k, 3) in voxel index units."""
    base = np.floor(g)
    frac = g - base
    base = base.astype(np.int64)
    shape = np.array(vol.shape)
    acc = np.zeros(g.shape[0])
    for corner in range(8):
        off = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        idx = base + off
        w = np.prod(np.where(off == 1, frac, 1.0 - frac), axis=1)
        ok = np.all((idx >= 0) & (idx < shape), axis=1)
        vals = np.zeros(g.shape[0])
        vals[ok] = vol[idx[ok, 0], idx[ok, 1], idx[ok, 2]]
        acc += w * vals
    return acc


def integrate_rays_np(vol, origin, spacing, starts, dirs, t0, t1, step, chunk=2048):
    m = starts.shape[0]
    out = np.zeros(m)
    length = t1 - t0
    active = np.flatnonzero(length > 0)
    for lo in range(0, active.size, chunk):
        rays = active[lo:lo + chunk]
        nseg = np.maximum(np.ceil(length[rays] / step).astype(np.int64), 1)
        h = length[rays] / nseg
        kmax = int(nseg.max()) + 1
        s = np.arange(kmax)
        valid = s[None, :] <= nseg[:, None]
        t = t0[rays, None] + s[None, :] * h[:, None]
        pts = starts[rays, None, :] + t[..., None] * dirs[rays, None, :]
        g = ((pts - origin) / spacing)[valid]
        vals = np.zeros(valid.shape)
        vals[valid] = _trilinear_np(vol, g)
        wts = valid.astype(float)
        wts[:, 0] = 0.5
        wts[np.arange(rays.size), nseg] = 0.5
        out[rays] = (vals * wts).sum(axis=1) * h
    return out


# ----------------------------------------------------------------------------
# crossing-parity voxelization, rays along +x
# ----------------------------------------------------------------------------

@njit
def parity_counts_nb(tri, origin, spacing, dims, jy, jz):
    nx, ny, nz = dims[0], dims[1], dims[2]
    counts = np.zeros((nx + 1, ny, nz), dtype=np.int32)
    for t in range(tri.shape[0]):
        x0, y0, z0 = tri[t, 0, 0], tri[t, 0, 1], tri[t, 0, 2]
        x1, y1, z1 = tri[t, 1, 0], tri[t, 1, 1], tri[t, 1, 2]
        x2, y2, z2 = tri[t, 2, 0], tri[t, 2, 1], tri[t, 2, 2]
        det = (y1 - y0) * (z2 - z0) - (y2 - y0) * (z1 - z0)
        if det == 0.0:
            continue
        ylo = min(y0, min(y1, y2))
        yhi = max(y0, max(y1, y2))
        zlo = min(z0, min(z1, z2))
        zhi = max(z0, max(z1, z2))
        iy_lo = max(0, int(math.ceil((ylo - origin[1]) / spacing[1] - jy)) - 1)
        iy_hi = min(ny - 1, int(math.floor((yhi - origin[1]) / spacing[1] - jy)) + 1)
        iz_lo = max(0, int(math.ceil((zlo - origin[2]) / spacing[2] - jz)) - 1)
        iz_hi = min(nz - 1, int(math.floor((zhi - origin[2]) / spacing[2] - jz)) + 1)
        for iy in range(iy_lo, iy_hi + 1):
            yc = origin[1] + (iy + jy) * spacing[1]
            for iz in range(iz_lo, iz_hi + 1):
                zc = origin[2] + (iz + jz) * spacing[2]
                l1 = ((yc - y0) * (z2 - z0) - (y2 - y0) * (zc - z0)) / det
                l2 = ((y1 - y0) * (zc - z0) - (yc - y0) * (z1 - z0)) / det
                l0 = 1.0 - l1 - l2
                if l0 < 0.0 or l1 < 0.0 or l2 < 0.0:
                    continue
                xh = l0 * x0 + l1 * x1 + l2 * x2
                ix = int(math.ceil((xh - origin[0]) / spacing[0]))
                if ix < 0:
                    ix = 0
                if ix < nx:
                    counts[ix, iy, iz] += 1
    return counts


def parity_counts_np(tri, origin, spacing, dims, jy, jz):
    nx, ny, nz = (int(d) for d in dims)
    counts = np.zeros((nx + 1, ny, nz), dtype=np.int32)
    p0, p1, p2 = tri[:, 0], tri[:, 1], tri[:, 2]
    det = (p1[:, 1] - p0[:, 1]) * (p2[:, 2] - p0[:, 2]) - (p2[:, 1] - p0[:, 1]) * (p1[:, 2] - p0[:, 2])
    lo = tri.min(axis=1)
    hi = tri.max(axis=1)
    iy_lo = np.maximum(0, np.ceil((lo[:, 1] - origin[1]) / spacing[1] - jy).astype(int) - 1)
    iy_hi = np.minimum(ny - 1, np.floor((hi[:, 1] - origin[1]) / spacing[1] - jy).astype(int) + 1)
    iz_lo = np.maximum(0, np.ceil((lo[:, 2] - origin[2]) / spacing[2] - jz).astype(int) - 1)
    iz_hi = np.minimum(nz - 1, np.floor((hi[:, 2] - origin[2]) / spacing[2] - jz).astype(int) + 1)
    for t in np.flatnonzero((det != 0) & (iy_hi >= iy_lo) & (iz_hi >= iz_lo)):
        iy, iz = np.meshgrid(np.arange(iy_lo[t], iy_hi[t] + 1),
                             np.arange(iz_lo[t], iz_hi[t] + 1), indexing="ij")
        yc = origin[1] + (iy + jy) * spacing[1]
        zc = origin[2] + (iz + jz) * spacing[2]
        x0, y0, z0 = p0[t]
        x1, y1, z1 = p1[t]
        x2, y2, z2 = p2[t]
        l1 = ((yc - y0) * (z2 - z0) - (y2 - y0) * (zc - z0)) / det[t]
        l2 = ((y1 - y0) * (zc - z0) - (yc - y0) * (z1 - z0)) / det[t]
        l0 = 1.0 - l1 - l2
        inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        if not inside.any():
            continue
        xh = l0[inside] * x0 + l1[inside] * x1 + l2[inside] * x2
        ix = np.maximum(np.ceil((xh - origin[0]) / spacing[0]).astype(int), 0)
        keep = ix < nx
        np.add.at(counts, (ix[keep], iy[inside][keep], iz[inside][keep]), 1)
    return counts


# ----------------------------------------------------------------------------
# exact point-to-triangle distance
# ----------------------------------------------------------------------------

@njit
def _closest_sq_nb(px, py, pz, a, b, c):
    abx, aby, abz = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    acx, acy, acz = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    apx, apy, apz = px - a[0], py - a[1], pz - a[2]
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        qx, qy, qz = a[0], a[1], a[2]
    else:
        bpx, bpy, bpz = px - b[0], py - b[1], pz - b[2]
        d3 = abx * bpx + aby * bpy + abz * bpz
        d4 = acx * bpx + acy * bpy + acz * bpz
        cpx, cpy, cpz = px - c[0], py - c[1], pz - c[2]
        d5 = abx * cpx + aby * cpy + abz * cpz
        d6 = acx * cpx + acy * cpy + acz * cpz
        vc = d1 * d4 - d3 * d2
        vb = d5 * d2 - d1 * d6
        va = d3 * d6 - d5 * d4
        if d3 >= 0.0 and d4 <= d3:
            qx, qy, qz = b[0], b[1], b[2]
        elif vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
            v = d1 / (d1 - d3)
            qx, qy, qz = a[0] + v * abx, a[1] + v * aby, a[2] + v * abz
        elif d6 >= 0.0 and d5 <= d6:
            qx, qy, qz = c[0], c[1], c[2]
        elif vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
            w = d2 / (d2 - d6)
            qx, qy, qz = a[0] + w * acx, a[1] + w * acy, a[2] + w * acz
        elif va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
            w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
            qx = b[0] + w * (c[0] - b[0])
            qy = b[1] + w * (c[1] - b[1])
            qz = b[2] + w * (c[2] - b[2])
        else:
            denom = 1.0 / (va + vb + vc)
            v = vb * denom
            w = vc * denom
            qx = a[0] + abx * v + acx * w
            qy = a[1] + aby * v + acy * w
            qz = a[2] + abz * v + acz * w
    dx, dy, dz = px - qx, py - qy, pz - qz
    return dx * dx + dy * dy + dz * dz


@njit
def point_mesh_distance_nb(points, tri):
    n = points.shape[0]
    out = np.empty(n)
    for i in range(n):
        best = np.inf
        for t in range(tri.shape[0]):
            d = _closest_sq_nb(points[i, 0], points[i, 1], points[i, 2], tri[t, 0], tri[t, 1], tri[t, 2])
            if d < best:
                best = d
        out[i] = math.sqrt(best)
    return out


def closest_point_on_triangles(p, a, b, c):
    """Closest points for broadcast arrays ``p``, ``a``, ``b``, ``c`` of shape (..., 3)."""
    ab, ac = b - a, c - a
    ap, bp, cp = p - a, p - b, p - c
    d1 = np.einsum("...i,...i", ab, ap)
    d2 = np.einsum("...i,...i", ac, ap)
    d3 = np.einsum("...i,...i", ab, bp)
    d4 = np.einsum("...i,...i", ac, bp)
    d5 = np.einsum("...i,...i", ab, cp)
    d6 = np.einsum("...i,...i", ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4
    shape = np.broadcast_shapes(p.shape, a.shape)
    out = np.empty(shape)
    done = np.zeros(shape[:-1], dtype=bool)

    def take(mask, value):
        sel = mask & ~done
        out[sel] = np.broadcast_to(value, shape)[sel]
        done[sel] = True

    with np.errstate(divide="ignore", invalid="ignore"):
        take((d1 <= 0) & (d2 <= 0), a)
        take((d3 >= 0) & (d4 <= d3), b)
        v = d1 / (d1 - d3)
        take((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[..., None] * ab)
        take((d6 >= 0) & (d5 <= d6), c)
        w = d2 / (d2 - d6)
        take((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[..., None] * ac)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        take((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w[..., None] * (c - b))
        denom = 1.0 / (va + vb + vc)
        take(np.ones_like(done), a + (vb * denom)[..., None] * ab + (vc * denom)[..., None] * ac)
    return out


def point_mesh_distance_np(points, tri, chunk=64):
    out = np.empty(points.shape[0])
    a, b, c = tri[None, :, 0], tri[None, :, 1], tri[None, :, 2]
    for lo in range(0, points.shape[0], chunk):
        p = points[lo:lo + chunk, None, :]
        q = closest_point_on_triangles(p, a, b, c)
        out[lo:lo + chunk] = np.sqrt(((p - q) ** 2).sum(-1).min(axis=1))
    return out


# ----------------------------------------------------------------------------
# dispatch
# ----------------------------------------------------------------------------

def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def bilinear_scatter(grad_out, ix0, iy0, ix1, iy1, fx, fy, height, width):
    fn = bilinear_scatter_nb if _accel.USE_NUMBA else bilinear_scatter_np
    return fn(np.ascontiguousarray(grad_out), ix0, iy0, ix1, iy1,
              np.ascontiguousarray(fx, dtype=grad_out.dtype),
              np.ascontiguousarray(fy, dtype=grad_out.dtype), int(height), int(width))


def integrate_rays(vol, origin, spacing, starts, dirs, t0, t1, step):
    fn = integrate_rays_nb if _accel.USE_NUMBA else integrate_rays_np
    return fn(_f64(vol), _f64(origin), _f64(spacing), _f64(starts), _f64(dirs),
              _f64(t0), _f64(t1), float(step))


def parity_occupancy(tri, origin, spacing, dims):
    """Inside mask of a closed triangle soup sampled at voxel centers."""
    fn = parity_counts_nb if _accel.USE_NUMBA else parity_counts_np
    counts = fn(_f64(tri), _f64(origin), _f64(spacing), np.asarray(dims, dtype=np.int64),
                _PARITY_JITTER[0], _PARITY_JITTER[1])
    return (np.cumsum(counts[:-1], axis=0) % 2).astype(bool)


def point_mesh_distance(points, tri):
    fn = point_mesh_distance_nb if _accel.USE_NUMBA else point_mesh_distance_np
    return fn(_f64(points), _f64(tri))
