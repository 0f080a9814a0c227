import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from incnerf import mlp
from incnerf.exceptions import ConfigurationError, NumericError

from oracles import central_difference


def tiny_net(L_pos=1, L_dir=1, depth=1, width=8, dir_width=4):
    return mlp.NetworkConfig(mlp.EncodingConfig(L_pos, L_dir, True), depth=depth, width=width,
                             dir_width=dir_width)


class TestEncode:
    def test_zero_input_one_band(self):
        out = mlp.encode(np.zeros(3), 1, True)
        np.testing.assert_array_equal(out, [0, 0, 0, 0, 0, 0, 1, 1, 1])

    def test_no_bands_is_identity(self):
        v = np.array([0.3, -1.2, 4.0])
        np.testing.assert_array_equal(mlp.encode(v, 0, True), v)

    def test_half_first_sin_band(self):
        out = mlp.encode(np.array([0.5, 0.0, 0.0]), 2, False)
        assert out.shape == (12,)
        assert out[0] == pytest.approx(1.0)

    @given(st.integers(0, 8), st.booleans())
    def test_dimension(self, L, ident):
        enc = mlp.EncodingConfig(L, L, ident)
        out = mlp.encode(np.ones((4, 3)), L, ident)
        assert out.shape == (4, enc.dim(L)) == (4, 3 * (int(ident) + 2 * L))


class TestForward:
    def test_zero_weights(self):
        net = tiny_net()
        params = mlp.ParamSet(net.layer_shapes(), dtype=np.float64)
        out = mlp.forward(params, net, np.ones(3), np.array([0, 0, 1.0]))
        np.testing.assert_allclose(out.color, 0.5)
        np.testing.assert_allclose(out.sigma, np.log(2))

    def test_deterministic(self):
        net = tiny_net()
        params = mlp.init_network(net, np.random.default_rng(0))
        p = np.random.default_rng(1).normal(size=(50, 3))
        d = np.tile([0, 0, 1.0], (50, 1))
        a = mlp.forward(params, net, p, d)
        b = mlp.forward(params, net, p, d)
        assert np.array_equal(a.color, b.color) and np.array_equal(a.sigma, b.sigma)

    def test_frozen_snapshot_unaffected_by_student_update(self):
        net = tiny_net()
        params = mlp.init_network(net, np.random.default_rng(0))
        snap = mlp.snapshot(params, 1)
        p, d = np.ones((3, 3)), np.tile([0, 1.0, 0], (3, 1))
        before = mlp.forward(snap, net, p, d).color.copy()
        params.data += 0.5
        np.testing.assert_array_equal(mlp.forward(snap, net, p, d).color, before)

    def test_layout_mismatch_is_config_error(self):
        params = mlp.init_network(tiny_net(width=8), np.random.default_rng(0))
        with pytest.raises(ConfigurationError):
            mlp.forward(params, tiny_net(width=16), np.ones(3), np.array([0, 0, 1.0]))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(-50, 50))
    def test_output_ranges(self, seed, scale):
        net = tiny_net()
        params = mlp.init_network(net, np.random.default_rng(seed), np.float64)
        params.data *= 4
        p = np.random.default_rng(seed).normal(size=(20, 3)) * scale
        d = np.random.default_rng(seed + 1).normal(size=(20, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        out = mlp.forward(params, net, p, d)
        assert np.all((out.color >= 0) & (out.color <= 1)) and np.all(out.sigma >= 0)
        assert np.all(np.isfinite(out.color)) and np.all(np.isfinite(out.sigma))


class TestBackward:
    def test_zero_upstream(self):
        net = tiny_net()
        params = mlp.init_network(net, np.random.default_rng(0))
        g = mlp.backward(params, net, np.ones((4, 3)), np.tile([0, 0, 1.0], (4, 1)),
                         np.zeros((4, 3)), np.zeros(4))
        assert not np.any(g.data)

    def test_linear_layer_outer_product(self):
        params = mlp.ParamSet([(2, 3)], np.arange(8, dtype=np.float64))
        x = np.array([[1.0, 2.0, 3.0]])
        up = np.array([[0.5, -1.0]])
        _, cache = mlp.mlp_forward(params, x)
        g = mlp.mlp_backward(params, cache, up)
        np.testing.assert_array_equal(g.layers[0][0], np.outer(up[0], x[0]))
        np.testing.assert_array_equal(g.layers[0][1], up[0])

    def test_non_finite_upstream(self):
        net = tiny_net()
        params = mlp.init_network(net, np.random.default_rng(0))
        gc = np.zeros((2, 3))
        gc[0, 1] = np.nan
        with pytest.raises(NumericError):
            mlp.backward(params, net, np.ones((2, 3)), np.tile([0, 0, 1.0], (2, 1)), gc, np.zeros(2))

    def test_finite_difference(self):
        rng = np.random.default_rng(3)
        net = tiny_net()
        params = mlp.init_network(net, rng, np.float64)
        assert params.size <= 500
        p = rng.normal(size=(6, 3))
        d = rng.normal(size=(6, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        gc, gs = rng.normal(size=(6, 3)), rng.normal(size=6)

        def f():
            out = mlp.forward(params, net, p, d)
            return float(np.sum(gc * out.color) + np.sum(gs * out.sigma))

        analytic = mlp.backward(params, net, p, d, gc, gs).data
        numeric = central_difference(f, params.data)
        rel = np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)
        assert rel.max() < 1e-4


class TestParamSet:
    def test_snapshot_independent(self):
        params = mlp.init_network(tiny_net(), np.random.default_rng(0))
        snap = mlp.snapshot(params, 2)
        params.data[:] = 0
        assert snap.frozen and snap.version == 2 and np.any(snap.data)

    def test_snapshot_of_snapshot(self):
        snap = mlp.snapshot(mlp.init_network(tiny_net(), np.random.default_rng(0)), 1)
        assert mlp.snapshot(snap, 1) == snap

    def test_snapshot_bytes(self):
        params = mlp.init_network(tiny_net(), np.random.default_rng(0))
        assert mlp.param_bytes(mlp.snapshot(params, 1)) == mlp.param_bytes(params)

    def test_frozen_is_read_only(self):
        snap = mlp.snapshot(mlp.init_network(tiny_net(), np.random.default_rng(0)), 1)
        with pytest.raises(ValueError):
            snap.data[0] = 1.0

    def test_param_bytes(self):
        assert mlp.param_bytes(mlp.ParamSet([], dtype=np.float64)) == 0
        assert mlp.param_bytes(mlp.ParamSet([(2, 3)], dtype=np.float64)) == 64

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_binary_round_trip(self, dtype):
        params = mlp.init_network(tiny_net(), np.random.default_rng(0), dtype)
        snap = mlp.snapshot(params, 7)
        back = mlp.ParamSet.from_bytes(snap.to_bytes())
        assert back == snap and back.frozen and back.version == 7 and back.dtype == dtype
        assert back.to_bytes() == snap.to_bytes()

    def test_binary_header(self):
        blob = mlp.ParamSet([(2, 3)], np.arange(8, dtype=np.float32)).to_bytes()
        assert blob[:4] == b"INPS"
        assert np.frombuffer(blob[-32:], "<f4").tolist() == list(range(8))

    def test_bad_magic(self):
        blob = bytearray(mlp.ParamSet([(2, 3)]).to_bytes())
        blob[:4] = b"XXXX"
        with pytest.raises(ValueError):
            mlp.ParamSet.from_bytes(bytes(blob))

    def test_snapshot_rejects_non_finite(self):
        params = mlp.ParamSet([(1, 1)], np.array([np.inf, 0.0]))
        with pytest.raises(NumericError):
            mlp.snapshot(params, 1)

    def test_checksum_tracks_content(self):
        params = mlp.init_network(tiny_net(), np.random.default_rng(0))
        c = params.checksum()
        assert params.copy().checksum() == c
        params.data[0] += 1
        assert params.checksum() != c
