"""The numba and numpy forms of every kernel agree, and the env flag picks one."""
import os
import subprocess
import sys

import numpy as np
import pytest

from igcn import _accel, kernels
from igcn.camera import bilinear_stencil, perspective_camera
from igcn.phantom import (PhantomSpec, VoxelVolume, compose_attenuation_volume, generate_phantom_mesh,
                          ray_segments, sphere_mesh)

needs_numba = pytest.mark.skipif(not _accel.HAVE_NUMBA, reason="numba not installed")


@pytest.fixture(scope="module")
def scene():
    spec = PhantomSpec(grid_spacing=(4.0, 4.0, 4.0))
    mesh = generate_phantom_mesh(spec)
    return spec, mesh, compose_attenuation_volume(spec, mesh)


@needs_numba
def test_integrate_rays_parity(scene):
    _, _, vol = scene
    starts, dirs, t0, t1 = ray_segments(vol, perspective_camera(24, 24))
    args = (vol.values, np.array(vol.origin), np.array(vol.spacing), starts, dirs, t0, t1, 2.0)
    a, b = kernels.integrate_rays_nb(*args), kernels.integrate_rays_np(*args)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
    assert a.max() > 0


@needs_numba
def test_parity_counts_parity(scene):
    _, mesh, _ = scene
    grid = VoxelVolume.covering(mesh.vertices.min(0), mesh.vertices.max(0), 3.0, margin=3.0)
    args = (mesh.triangle_points(), np.array(grid.origin), np.array(grid.spacing),
            np.array(grid.dims, dtype=np.int64), *kernels._PARITY_JITTER)
    np.testing.assert_array_equal(kernels.parity_counts_nb(*args), kernels.parity_counts_np(*args))


@needs_numba
def test_point_mesh_distance_parity(rng):
    mesh = sphere_mesh(10.0, n=80)
    pts = rng.normal(0, 12, size=(60, 3))
    tri = mesh.triangle_points()
    np.testing.assert_allclose(kernels.point_mesh_distance_nb(pts, tri), kernels.point_mesh_distance_np(pts, tri),
                               rtol=1e-12, atol=1e-12)


@needs_numba
def test_bilinear_scatter_parity(rng):
    st = bilinear_stencil(rng.uniform(-1, 9, size=(40, 2)), 8, 9)
    g = rng.normal(size=(40, 3))
    args = (g, st.ix0, st.iy0, st.ix1, st.iy1, st.fx, st.fy, 8, 9)
    np.testing.assert_allclose(kernels.bilinear_scatter_nb(*args), kernels.bilinear_scatter_np(*args), atol=1e-13)


def test_point_triangle_distance_regions():
    tri = np.array([[[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]])
    pts = np.array([
        [0.2, 0.2, 3.0],     # face
        [-1.0, -1.0, 0.0],   # vertex a
        [2.0, -0.5, 0.0],    # vertex b
        [0.5, -2.0, 0.0],    # edge ab
        [1.0, 1.0, 0.0],     # edge bc
        [-0.5, 0.5, 1.0],    # edge ca, off plane
    ])
    expected = [3.0, np.sqrt(2), np.sqrt(1.25), 2.0, np.sqrt(0.5), np.sqrt(1.25)]
    for fn in (kernels.point_mesh_distance_np, kernels.point_mesh_distance):
        np.testing.assert_allclose(fn(pts, tri), expected, atol=1e-12)


def test_occupancy_is_bool(scene):
    _, mesh, _ = scene
    grid = VoxelVolume.covering(mesh.vertices.min(0), mesh.vertices.max(0), 5.0)
    occ = kernels.parity_occupancy(mesh.triangle_points(), grid.origin, grid.spacing, grid.dims)
    assert occ.dtype == bool and occ.shape == grid.dims and occ.any()


@pytest.mark.parametrize("flag,expected", [("1", "numpy"), ("0", "numba" if _accel.HAVE_NUMBA else "numpy")])
def test_env_flag_selects_backend(flag, expected):
    env = dict(os.environ, IGCN_DISABLE_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", "from igcn import _accel; print(_accel.backend_name())"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == expected


def test_numpy_backend_end_to_end():
    """A DRR rendered under the numpy fallback matches the in-process result."""
    code = ("import numpy as np; from igcn.phantom import *; from igcn.camera import perspective_camera;"
            "s=PhantomSpec(grid_spacing=(5.0,5.0,5.0)); v=compose_attenuation_volume(s, generate_phantom_mesh(s));"
            "print(repr(float(line_integrals(v, perspective_camera(12,12)).sum())))")
    env = dict(os.environ, IGCN_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    from igcn.phantom import line_integrals
    s = PhantomSpec(grid_spacing=(5.0, 5.0, 5.0))
    ref = line_integrals(compose_attenuation_volume(s, generate_phantom_mesh(s)), perspective_camera(12, 12)).sum()
    assert float(out.stdout) == pytest.approx(ref, rel=1e-12)
