import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from incnerf.camera import (
    Intrinsics, Pose, Ray, gram_schmidt_basis, gram_schmidt_basis_batch, image_rays, pixel_ray,
    principal_ray, sample_nonprincipal,
)

INTR = Intrinsics(f=64.0, W=64, H=48)


def unit_vectors(n, rng):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def rot_y(deg):
    a = np.deg2rad(deg)
    return np.array([[np.cos(a), 0, np.sin(a)], [0, 1, 0], [-np.sin(a), 0, np.cos(a)]])


def angle(a, b):
    return np.arccos(np.clip(np.sum(a * b, axis=-1), -1, 1))


class TestIntrinsicsPose:
    @pytest.mark.parametrize("kw", [dict(f=0, W=4, H=4), dict(f=1, W=0, H=4), dict(f=1, W=4, H=4, cx=5)])
    def test_invalid_intrinsics(self, kw):
        with pytest.raises(ValueError):
            Intrinsics(**kw)

    def test_reflection_rejected(self):
        with pytest.raises(ValueError):
            Pose(np.zeros(3), np.diag([1.0, 1.0, -1.0]))

    def test_pose_list_round_trip(self):
        p = Pose.look_at([1.0, 0.5, -2.0], [0.0, 0.0, 0.0])
        q = Pose.from_list(p.to_list())
        assert np.array_equal(p.rotation, q.rotation) and np.array_equal(p.origin, q.origin)


class TestPixelRay:
    def test_centre_pixel_identity(self):
        intr = Intrinsics(f=10.0, W=4, H=4)
        r = pixel_ray(intr, Pose.identity(), 1.5, 1.5)
        np.testing.assert_allclose(r.direction, [0, 0, 1], atol=1e-15)

    def test_unit_norm(self):
        rng = np.random.default_rng(0)
        pose = Pose.look_at([1.0, 2.0, 3.0], [0.0, 0.0, 0.0])
        for _ in range(50):
            r = pixel_ray(INTR, pose, rng.integers(0, INTR.W), rng.integers(0, INTR.H))
            assert abs(np.linalg.norm(r.direction) - 1) < 1e-12

    def test_adjacent_pixel_angle(self):
        pose = Pose.identity()
        u = INTR.cx - 0.5
        a = pixel_ray(INTR, pose, u, INTR.cy - 0.5).direction
        b = pixel_ray(INTR, pose, u + 1, INTR.cy - 0.5).direction
        assert angle(a, b) == pytest.approx(np.arctan(1 / INTR.f), rel=1e-9)

    @pytest.mark.parametrize("u,v", [(-1, 0), (64, 0), (0, 48)])
    def test_out_of_range(self, u, v):
        with pytest.raises(ValueError):
            pixel_ray(INTR, Pose.identity(), u, v)

    def test_image_rays_row_major(self):
        rays = image_rays(INTR, Pose.identity())
        np.testing.assert_array_equal(rays[INTR.W + 3].direction, pixel_ray(INTR, Pose.identity(), 3, 1).direction)


class TestPrincipalRay:
    def test_identity(self):
        r = principal_ray(INTR, Pose.identity())
        np.testing.assert_array_equal(r.origin, 0)
        np.testing.assert_array_equal(r.direction, [0, 0, 1])

    def test_rotated(self):
        r = principal_ray(INTR, Pose(np.zeros(3), rot_y(90)))
        np.testing.assert_allclose(r.direction, [1, 0, 0], atol=1e-15)

    def test_matches_pixel_convention(self):
        pose = Pose.look_at([0.3, -1.0, 2.0], [0.0, 0.2, 0.0])
        r = principal_ray(INTR, pose)
        q = pixel_ray(INTR, pose, INTR.cx - 0.5, INTR.cy - 0.5)
        np.testing.assert_array_equal(r.origin, pose.origin)
        np.testing.assert_allclose(r.direction, q.direction, atol=1e-9)


class TestGramSchmidt:
    def check(self, d, p1, p2):
        M = np.stack([d, p1, p2], axis=-2)
        np.testing.assert_allclose(M @ np.swapaxes(M, -1, -2), np.broadcast_to(np.eye(3), M.shape), atol=1e-9)

    def test_z_axis(self):
        d = np.array([0.0, 0.0, 1.0])
        self.check(d, *gram_schmidt_basis(d))

    @pytest.mark.parametrize("d", [[1, 0, 0], [0, 1, 0], [0, 0, -1], [-1, 0, 0], [0, -1, 0]])
    def test_axes(self, d):
        d = np.array(d, dtype=float)
        self.check(d, *gram_schmidt_basis(d))

    def test_near_seed_vector(self):
        d = np.array([1.0, 1e-9, -1e-9])
        d /= np.linalg.norm(d)
        self.check(d, *gram_schmidt_basis(d))

    def test_batch_matches_scalar(self):
        dirs = unit_vectors(200, np.random.default_rng(4))
        p1, p2 = gram_schmidt_basis_batch(dirs)
        for k in range(0, 200, 17):
            q1, q2 = gram_schmidt_basis(dirs[k])
            np.testing.assert_allclose(p1[k], q1, atol=1e-14)
            np.testing.assert_allclose(p2[k], q2, atol=1e-14)

    @settings(max_examples=200)
    @given(st.tuples(*[st.floats(-1, 1, allow_subnormal=False)] * 3).filter(lambda v: np.linalg.norm(v) > 1e-3))
    def test_property(self, v):
        d = np.asarray(v) / np.linalg.norm(v)
        self.check(d, *gram_schmidt_basis(d))


class TestSampleNonprincipal:
    def test_zero_offset_exact(self):
        r = Ray(np.array([1.0, 2.0, 3.0]), np.array([0.6, 0.0, 0.8]))
        out = sample_nonprincipal(r, INTR, 0.0, 1.234)
        assert np.array_equal(out.direction, r.direction)

    def test_origin_preserved(self):
        rng = np.random.default_rng(0)
        r = Ray(np.tile([1.0, -2.0, 0.5], (100, 1)), unit_vectors(100, rng))
        out = sample_nonprincipal(r, INTR, rng.uniform(0, INTR.s_max, 100), rng.uniform(0, 2 * np.pi, 100))
        assert np.array_equal(out.origin, r.origin)

    def test_45_degrees(self):
        r = Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]))
        intr = Intrinsics(f=30.0, W=64, H=64)
        out = sample_nonprincipal(r, intr, 30.0, 0.0)
        assert np.degrees(angle(out.direction, r.direction)) == pytest.approx(45.0, abs=1e-6)

    def test_out_of_range(self):
        r = Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]))
        with pytest.raises(ValueError):
            sample_nonprincipal(r, INTR, INTR.s_max * 1.01, 0.0)
        with pytest.raises(ValueError):
            sample_nonprincipal(r, INTR, -0.1, 0.0)

    def test_deterministic(self):
        r = Ray(np.zeros(3), np.array([0.0, 0.6, 0.8]))
        a = sample_nonprincipal(r, INTR, 12.5, 2.0)
        b = sample_nonprincipal(r, INTR, 12.5, 2.0)
        assert np.array_equal(a.direction, b.direction)
