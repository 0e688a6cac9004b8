import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from igcn.camera import (ProjectionCamera, ProjectionError, bilinear_sample, bilinear_sample_backward,
                         bilinear_stencil, normalize_pixel, orthographic_camera, perspective_camera, project_vertices,
                         read_camera, write_camera)

ORTHO = ProjectionCamera(np.array([[1, 0, 0, 320], [0, 1, 0, 320], [0, 0, 0, 1]], float), 640, 640)
MAP = np.array([[0.0, 1.0], [2.0, 3.0]])


def reference_bilinear(fmap, u, v):
    """Textbook bilinear lookup with clamping, one point at a time."""
    h, w = fmap.shape[:2]
    u = min(max(u, 0.0), w - 1)
    v = min(max(v, 0.0), h - 1)
    i0, j0 = int(np.floor(v)), int(np.floor(u))
    i1, j1 = min(i0 + 1, h - 1), min(j0 + 1, w - 1)
    a, b = v - i0, u - j0
    return ((1 - a) * (1 - b) * fmap[i0, j0] + (1 - a) * b * fmap[i0, j1]
            + a * (1 - b) * fmap[i1, j0] + a * b * fmap[i1, j1])


class TestProjection:
    def test_orthographic_origin(self):
        np.testing.assert_allclose(project_vertices(ORTHO, [[0, 0, 0]]), [[320, 320]])

    def test_orthographic_ignores_z(self):
        np.testing.assert_allclose(project_vertices(ORTHO, [[10, -5, 99]]), [[330, 315]])

    def test_perspective_by_hand(self):
        cam = ProjectionCamera(np.array([[100, 0, 0, 0], [0, 100, 0, 0], [0, 0, 1, 0]], float), 10, 10)
        np.testing.assert_allclose(project_vertices(cam, [[1, 2, 50]]), [[2, 4]])

    def test_zero_depth_rejected(self):
        cam = ProjectionCamera(np.array([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0]], float), 10, 10)
        with pytest.raises(ProjectionError):
            project_vertices(cam, [[1, 1, 0]])

    @given(st.floats(-50, 50), st.floats(-50, 50))
    @settings(max_examples=30, deadline=None)
    def test_orthographic_in_plane_translation(self, dx, dy):
        pts = np.array([[1.0, 2.0, 3.0], [-4.0, 0.5, 7.0]])
        shifted = project_vertices(ORTHO, pts + [dx, dy, 0]) - project_vertices(ORTHO, pts)
        np.testing.assert_allclose(shifted, [[dx, dy], [dx, dy]], atol=1e-9)

    def test_default_cameras_center_origin(self):
        for cam in (orthographic_camera(128, 128, 2.0), perspective_camera(128, 128, 1000, 360)):
            np.testing.assert_allclose(project_vertices(cam, [[0, 0, 0]]), [[64, 64]], atol=1e-9)

    def test_perspective_magnification(self):
        cam = perspective_camera(128, 128, 1000.0, 320.0)
        # 160 mm at the isocenter spans half the image width
        u = project_vertices(cam, [[160, 0, 0]])[0, 0]
        assert u == pytest.approx(128, abs=1e-9)
        # closer to the source magnifies
        assert project_vertices(cam, [[160, -100, 0]])[0, 0] > u

    def test_superior_is_up(self):
        cam = perspective_camera(128, 128)
        assert project_vertices(cam, [[0, 0, 30]])[0, 1] < 64

    @pytest.mark.parametrize("cam", [orthographic_camera(64, 48, 1.5), perspective_camera(64, 48, 900, 200)])
    def test_rays_project_back_to_their_pixel(self, cam, rng):
        u, v = rng.uniform(0, 64, 20), rng.uniform(0, 48, 20)
        starts, dirs = cam.rays(u, v)
        np.testing.assert_allclose(np.linalg.norm(dirs, axis=1), 1.0, atol=1e-12)
        for t in (10.0, 250.0):
            pts = starts + t * dirs
            np.testing.assert_allclose(project_vertices(cam, pts), np.stack([u, v], 1), atol=1e-8)


class TestNormalize:
    @pytest.mark.parametrize("p,q", [((320, 320), (0.5, 0.5)), ((0, 0), (0, 0)), ((640, 320), (1.0, 0.5))])
    def test_examples(self, p, q):
        np.testing.assert_allclose(normalize_pixel([p], ORTHO), [q])


class TestBilinear:
    def test_center_of_2x2(self):
        assert bilinear_sample(MAP, [[0.5, 0.5]])[0, 0] == pytest.approx(1.5)

    def test_along_u(self):
        assert bilinear_sample(MAP, [[0.25, 0.0]])[0, 0] == pytest.approx(0.25)

    def test_integer_texels_exact(self, rng):
        fmap = rng.normal(size=(5, 7, 3))
        jj, ii = np.meshgrid(np.arange(7), np.arange(5))
        pts = np.stack([jj.ravel(), ii.ravel()], 1).astype(float)
        np.testing.assert_array_equal(bilinear_sample(fmap, pts), fmap.reshape(-1, 3))

    def test_clamps_out_of_bounds(self):
        np.testing.assert_allclose(bilinear_sample(MAP, [[-3.0, -2.0], [9.0, 0.5], [0.5, 40.0]])[:, 0],
                                   [0.0, 2.0, 2.5])

    @given(st.floats(-2, 8), st.floats(-2, 6))
    @settings(max_examples=60, deadline=None)
    def test_matches_reference(self, u, v):
        fmap = np.arange(35, dtype=float).reshape(5, 7) ** 1.3
        got = bilinear_sample(fmap, [[u, v]])[0, 0]
        assert got == pytest.approx(reference_bilinear(fmap, u, v), abs=1e-9)

    @given(st.floats(0, 1), st.integers(0, 5), st.integers(0, 3))
    @settings(max_examples=40, deadline=None)
    def test_piecewise_linear_on_segment(self, t, j, i):
        fmap = np.random.default_rng(3).normal(size=(4, 6))
        a, b = bilinear_sample(fmap, [[j, i + 0.3], [j + 1 if j < 5 else j, i + 0.3]])[:, 0]
        mid = bilinear_sample(fmap, [[j + t if j < 5 else j, i + 0.3]])[0, 0]
        assert mid == pytest.approx((1 - t) * a + t * b, abs=1e-12)

    def test_gradients_match_finite_differences(self, rng):
        fmap = rng.normal(size=(6, 5, 2))
        pts = np.stack([rng.integers(0, 4, 9) + rng.uniform(0.01, 0.99, 9),
                        rng.integers(0, 5, 9) + rng.uniform(0.01, 0.99, 9)], 1)
        g = rng.normal(size=(9, 2))
        gm, gp = bilinear_sample_backward(fmap, pts, g)
        h = 1e-6
        fd_p = np.zeros_like(pts)
        for k in range(pts.size):
            d = np.zeros(pts.size)
            d[k] = h
            d = d.reshape(pts.shape)
            fd_p.flat[k] = ((bilinear_sample(fmap, pts + d) - bilinear_sample(fmap, pts - d)) * g).sum() / (2 * h)
        fd_m = np.zeros_like(fmap)
        for k in range(fmap.size):
            d = np.zeros(fmap.size)
            d[k] = h
            d = d.reshape(fmap.shape)
            fd_m.flat[k] = ((bilinear_sample(fmap + d, pts) - bilinear_sample(fmap - d, pts)) * g).sum() / (2 * h)
        assert np.linalg.norm(gp - fd_p) / np.linalg.norm(fd_p) < 1e-4
        assert np.linalg.norm(gm - fd_m) / np.linalg.norm(fd_m) < 1e-4

    def test_clamped_axis_has_no_coordinate_gradient(self):
        _, gp = bilinear_sample_backward(MAP, [[-1.0, 0.5], [0.5, 3.0]], np.ones((2, 1)))
        assert gp[0, 0] == 0 and gp[0, 1] != 0
        assert gp[1, 1] == 0 and gp[1, 0] != 0

    def test_lower_resolution_map_alignment(self):
        # a 4x-downsampled map addressed at p * (map size / image size)
        img = np.add.outer(np.arange(64.0), np.arange(64.0))
        small = img[::4, ::4]
        p = np.array([[20.0, 36.0]])
        assert bilinear_sample(small, p / 4)[0, 0] == pytest.approx(img[36, 20])


def test_camera_file_round_trip(tmp_path):
    cam = perspective_camera(96, 80, 950.0, 300.0)
    write_camera(tmp_path / "c.txt", cam)
    text = (tmp_path / "c.txt").read_text().split()
    assert len(text) == 14 and text[-2:] == ["96", "80"]
    back = read_camera(tmp_path / "c.txt")
    np.testing.assert_array_equal(back.matrix, cam.matrix)
    assert (back.image_width, back.image_height) == (96, 80)


def test_stencil_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        bilinear_stencil(np.array([[np.nan, 1.0]]), 4, 4)
