import json
from pathlib import Path

import numpy as np
import pytest

from incnerf.camera import Ray, principal_ray
from incnerf.exceptions import NumericError
from incnerf.rgn import RayGenerator, equally_spaced_inputs, generate_past_rays, rgn_forward, rgn_update
from incnerf.scenes import reference_intrinsics, reference_trajectory

GOLDEN = json.loads((Path(__file__).parent / "golden" / "rgn_plateau.json").read_text())
INTR = reference_intrinsics()


def principals(T, N=5):
    return Ray.concat([principal_ray(INTR, p) for p in reference_trajectory(T, N).poses()])


@pytest.fixture(scope="module")
def single_pose_rgn():
    ray = principals(1)[2:3]
    g = RayGenerator(random_state=0).partial_fit(Ray.concat([ray] * 5), 5)
    return g, ray


class TestInputs:
    def test_one_task(self):
        np.testing.assert_array_equal(equally_spaced_inputs(1, 5), [0, 0.25, 0.5, 0.75, 1])

    def test_two_by_two(self):
        np.testing.assert_allclose(equally_spaced_inputs(2, 2), [0, 1 / 3, 2 / 3, 1])

    @pytest.mark.parametrize("T,N", [(1, 2), (3, 5), (7, 3)])
    def test_endpoints(self, T, N):
        x = equally_spaced_inputs(T, N)
        assert x[0] == 0 and x[-1] == 1 and len(x) == T * N

    def test_too_few(self):
        with pytest.raises(ValueError):
            equally_spaced_inputs(1, 1)


class TestForward:
    def test_unit_directions(self, single_pose_rgn):
        g, _ = single_pose_rgn
        d = g.predict(np.linspace(0, 1, 101)).direction
        np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1, atol=1e-12)

    def test_deterministic(self, single_pose_rgn):
        g, _ = single_pose_rgn
        a, b = rgn_forward(g, 0.37), rgn_forward(g, 0.37)
        assert np.array_equal(a.origin, b.origin) and np.array_equal(a.direction, b.direction)

    def test_single_pose_fit(self, single_pose_rgn):
        g, ray = single_pose_rgn
        assert g.loss_history_[-1] < 1e-4
        for x in (0.0, 1.0):
            r = rgn_forward(g, x)
            np.testing.assert_allclose(r.origin, ray.origin[0], atol=1e-2)
            np.testing.assert_allclose(r.direction, ray.direction[0], atol=1e-2)

    def test_input_range(self, single_pose_rgn):
        with pytest.raises(ValueError):
            single_pose_rgn[0].predict([1.5])

    def test_degenerate_direction(self, single_pose_rgn):
        g, _ = single_pose_rgn
        h = RayGenerator().load_bytes(g.to_bytes(), 5)
        w, b = h.net_.layers[-1]
        w[3:] = 0
        b[3:] = 0
        with pytest.raises(NumericError):
            h.predict([0.5])


class TestUpdate:
    def test_first_task_targets_are_current_rays(self, monkeypatch):
        seen = {}
        orig = RayGenerator._train

        def spy(self, x, targets):
            seen["x"], seen["t"] = x, targets.copy()
            return orig(self, x, targets)

        monkeypatch.setattr(RayGenerator, "_train", spy)
        pr = principals(1)
        RayGenerator(n_steps=5, random_state=0).partial_fit(pr, 5)
        np.testing.assert_array_equal(seen["t"], np.concatenate([pr.origin, pr.direction], axis=1))
        np.testing.assert_array_equal(seen["x"], equally_spaced_inputs(1, 5))

    def test_later_targets_are_distilled_then_current(self, monkeypatch):
        pr = principals(2)
        g = RayGenerator(n_steps=50, random_state=0).partial_fit(pr[:5], 5)
        past = g.predict(equally_spaced_inputs(1, 5))
        seen = {}
        orig = RayGenerator._train

        def spy(self, x, targets):
            seen["t"] = targets.copy()
            return orig(self, x, targets)

        monkeypatch.setattr(RayGenerator, "_train", spy)
        g.partial_fit(pr[5:], 5)
        np.testing.assert_array_equal(seen["t"][:5], np.concatenate([past.origin, past.direction], axis=1))
        np.testing.assert_array_equal(seen["t"][5:], np.concatenate([pr[5:].origin, pr[5:].direction], axis=1))

    def test_constant_bytes(self):
        pr = principals(5)
        g = RayGenerator(n_steps=20, random_state=0)
        sizes = [g.nbytes]
        for t in range(5):
            g.partial_fit(pr[5 * t:5 * t + 5], 5)
            sizes.append(g.nbytes)
            assert len(g.to_bytes()) == len(RayGenerator(random_state=1).partial_fit(pr[:5], 5).to_bytes())
        assert len(set(sizes)) == 1

    def test_architecture(self):
        g = RayGenerator(random_state=0)
        assert [o for o, _ in g._shapes()] == [16, 64, 32, 6]
        assert g._shapes()[0][1] == 1 + 2 * g.L

    def test_update_guards_task_count(self):
        pr = principals(2)
        g = RayGenerator(n_steps=5, random_state=0)
        with pytest.raises(ValueError):
            rgn_update(g, pr[:5], 2, 5)
        rgn_update(g, pr[:5], 1, 5)
        with pytest.raises(ValueError):
            g.partial_fit(pr[5:9], 4)

    def test_plateau_over_ten_tasks(self):
        pr = principals(10)
        g = RayGenerator(random_state=0)
        for t in range(10):
            g.partial_fit(pr[5 * t:5 * t + 5], 5)
        assert max(g.loss_history_) < GOLDEN["plateau"]

    def test_serialization_round_trip(self, single_pose_rgn):
        g, _ = single_pose_rgn
        h = RayGenerator().load_bytes(g.to_bytes(), 5)
        x = np.linspace(0, 1, 7)
        np.testing.assert_array_equal(h.predict(x).direction, g.predict(x).direction)
        assert h.n_tasks_ == g.n_tasks_

    def test_sklearn_params(self):
        g = RayGenerator(n_steps=7, lr=0.01)
        assert g.get_params()["n_steps"] == 7
        assert g.set_params(L=4).L == 4


class TestPastRays:
    def test_unit_and_same_origin(self, single_pose_rgn):
        g, ray = single_pose_rgn
        rays = generate_past_rays(g, INTR, 256, np.random.default_rng(0))
        assert len(rays) == 256
        np.testing.assert_allclose(np.linalg.norm(rays.direction, axis=1), 1, atol=1e-12)
        # x is continuous, so this includes interpolation between grid points (0.024 at calibration)
        np.testing.assert_allclose(rays.origin, np.broadcast_to(ray.origin, rays.origin.shape), atol=5e-2)

    def test_inside_cone(self, single_pose_rgn):
        g, _ = single_pose_rgn
        rays = generate_past_rays(g, INTR, 2000, np.random.default_rng(1))
        x = np.random.default_rng(1).random(2000)
        centre = g.predict(x).direction
        ang = np.arccos(np.clip(np.sum(rays.direction * centre, axis=1), -1, 1))
        assert np.all(ang <= np.arctan(INTR.s_max / INTR.f) + 1e-9)

    def test_deterministic(self, single_pose_rgn):
        g, _ = single_pose_rgn
        a = generate_past_rays(g, INTR, 64, np.random.default_rng(9))
        b = generate_past_rays(g, INTR, 64, np.random.default_rng(9))
        assert np.array_equal(a.direction, b.direction) and np.array_equal(a.origin, b.origin)

    def test_needs_positive_count(self, single_pose_rgn):
        with pytest.raises(ValueError):
            generate_past_rays(single_pose_rgn[0], INTR, 0, np.random.default_rng(0))
