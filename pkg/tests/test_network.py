import numpy as np
import pytest

from ladmmnet.cassi import dual_arm
from ladmmnet.network import (
    CheckpointError,
    LadmmNetParams,
    LayerParams,
    au_forward,
    init_f0,
    init_params,
    load_checkpoint,
    net_forward,
    nru_forward,
    save_checkpoint,
)
from ladmmnet.solver import FusionState, SolverConfig, ladmm_iterate
from ladmmnet.transforms import ConvTransform, DctTransform, dct_transform, soft_threshold
from oracles import dense_ops, unvec_cube, vec_cube, vec_shots


def _measure(ops, rng, noise=0.05):
    f = rng.random(ops.cube_shape)
    y_hs, y_ms = ops.measure(f)
    return f, (y_hs + noise * rng.standard_normal(y_hs.shape), y_ms + noise * rng.standard_normal(y_ms.shape))


def dct_network(n_layers, cfg: SolverConfig, dims):
    layers = [
        LayerParams(cfg.alpha, cfg.rho, cfg.lambda1, cfg.soft_lambda, DctTransform(), DctTransform(inverse=True))
        for _ in range(n_layers)
    ]
    return LadmmNetParams(layers, 0, dims)


class TestInit:
    def test_paper_scalars(self):
        params = init_params((8, 8, 4), feature_maps=4, n_layers=3, seed=0)
        for layer in params.layers:
            assert (layer.alpha, layer.rho, layer.lambda1, layer.soft_lambda) == (0.5, 0.1, 1.0, 0.01)

    def test_parameter_count(self):
        params = init_params((16, 16, 8), feature_maps=32, n_layers=3, seed=0)
        counted = sum(4 + sum(t.conv1.size + t.conv2.size for t in (l.nft, l.nit)) for l in params.layers)
        assert counted == params.n_params == 3 * (4 + 36 * 32 * 8) == 27660
        assert params.flat().size == 27660

    def test_deterministic(self):
        a = init_params((8, 8, 4), 4, 2, seed=5).flat()
        b = init_params((8, 8, 4), 4, 2, seed=5).flat()
        assert a.tobytes() == b.tobytes()
        assert not np.array_equal(a, init_params((8, 8, 4), 4, 2, seed=6).flat())

    def test_independent_layers(self):
        params = init_params((8, 8, 4), 4, 2, seed=0)
        assert not np.array_equal(params.layers[0].nft.conv1, params.layers[1].nft.conv1)
        assert not np.array_equal(params.layers[0].nft.conv1, params.layers[0].nit.conv1)

    @pytest.mark.parametrize("K,F", [(0, 4), (2, 0)])
    def test_invalid(self, K, F):
        with pytest.raises(ValueError):
            init_params((8, 8, 4), F, K)

    def test_flat_round_trip(self):
        params = init_params((8, 8, 4), 3, 2, seed=1)
        np.testing.assert_array_equal(params.with_flat(params.flat()).flat(), params.flat())


class TestInitF0:
    def test_zero(self, small_ops):
        y = (np.zeros(small_ops.hs.shot_shape), np.zeros(small_ops.ms.shot_shape))
        assert not np.any(init_f0(y, small_ops))

    def test_hs_only(self, small_ops, rng):
        y_hs = rng.random(small_ops.hs.shot_shape)
        out = init_f0((y_hs, np.zeros(small_ops.ms.shot_shape)), small_ops)
        np.testing.assert_allclose(out, 0.5 * small_ops.hs.adjoint(y_hs), atol=0)

    def test_dense_oracle(self, small_ops, rng):
        _, y = _measure(small_ops, rng)
        Hh, Hm = dense_ops(small_ops)
        expect = 0.5 * Hm.T @ vec_shots(y[1]) + 0.5 * Hh.T @ vec_shots(y[0])
        np.testing.assert_allclose(vec_cube(init_f0(y, small_ops)), expect, atol=1e-13)


class TestAU:
    def _layer(self, **kw):
        base = dict(alpha=2.0, rho=0.3, lambda1=0.7, soft_lambda=0.01, nft=None, nit=None)
        base.update(kw)
        return LayerParams(**base)

    def test_truth_is_fixed(self, small_ops, rng):
        f = rng.random(small_ops.cube_shape)
        out = au_forward(f, np.zeros_like(f), small_ops.measure(f), small_ops, self._layer())
        assert np.max(np.abs(out - f)) <= 1e-14

    def test_rho_zero_is_gradient_step(self, small_ops, rng):
        f, y = _measure(small_ops, rng)
        r = rng.standard_normal(f.shape)
        g_hs, g_ms = small_ops.residual_grads(f, y)
        out = au_forward(f, r, y, small_ops, self._layer(rho=0.0))
        np.testing.assert_allclose(out, f - (g_hs + 0.7 * g_ms) / 2.0, atol=1e-14)

    def test_dense_oracle(self, small_ops, rng):
        f, y = _measure(small_ops, rng)
        r = rng.standard_normal(f.shape)
        Hh, Hm = dense_ops(small_ops)
        x = vec_cube(f)
        grad = Hh.T @ (Hh @ x - vec_shots(y[0])) + 0.7 * Hm.T @ (Hm @ x - vec_shots(y[1])) + 0.3 * vec_cube(r)
        out = au_forward(f, r, y, small_ops, self._layer())
        np.testing.assert_allclose(out, unvec_cube(x - grad / 2.0, f.shape), atol=1e-12)

    def test_zero_alpha(self, small_ops, rng):
        f, y = _measure(small_ops, rng)
        with pytest.raises(ZeroDivisionError):
            au_forward(f, f, y, small_ops, self._layer(alpha=0.0))


class TestNRU:
    def _layer(self, rng, soft_lambda=0.05):
        return LayerParams(0.5, 0.1, 1.0, soft_lambda, ConvTransform.xavier(rng, 4, 5), ConvTransform.xavier(rng, 4, 5))

    def test_zero_inputs(self, rng):
        z = np.zeros((4, 8, 8))
        for out in nru_forward(z, z, self._layer(rng)):
            assert not np.any(out)

    def test_threshold_free_limit(self, rng):
        layer = self._layer(rng, soft_lambda=0.0)
        f = rng.standard_normal((4, 8, 8))
        b, d, r = nru_forward(f, np.zeros_like(f), layer)
        np.testing.assert_allclose(b, layer.nft(f), atol=1e-15)
        assert np.max(np.abs(d)) <= 1e-15 and np.max(np.abs(r)) <= 1e-15

    def test_threshold_free_with_multiplier(self, rng):
        # with a nonzero incoming multiplier the residual is Ginv(-d_prev), not zero
        layer = self._layer(rng, soft_lambda=0.0)
        f, d_prev = rng.standard_normal((2, 4, 8, 8))
        b, d, r = nru_forward(f, d_prev, layer)
        np.testing.assert_allclose(b, layer.nft(f) + d_prev, atol=1e-15)
        assert np.max(np.abs(d)) <= 1e-15
        np.testing.assert_allclose(r, layer.nit(-d_prev), atol=1e-14)

    def test_compositional_oracle(self, rng):
        layer = self._layer(rng, soft_lambda=0.1)
        f, d_prev = rng.standard_normal((2, 4, 8, 8))
        u = layer.nft(f)
        b0 = soft_threshold(u + d_prev, 0.1)
        d0 = d_prev + u - b0
        r0 = layer.nit(u + d0 - b0)
        b, d, r = nru_forward(f, d_prev, layer)
        np.testing.assert_allclose(b, b0, atol=1e-14)
        np.testing.assert_allclose(d, d0, atol=1e-14)
        np.testing.assert_allclose(r, r0, atol=1e-14)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            nru_forward(np.zeros((4, 8, 8)), np.zeros((4, 8, 7)), self._layer(rng))


class TestNetForward:
    def test_one_layer_collapses_to_gradient_step(self, small_ops, rng):
        _, y = _measure(small_ops, rng)
        params = LadmmNetParams(
            [LayerParams(2.0, 0.1, 1.0, 0.0, ConvTransform.delta(4, 4), ConvTransform.delta(4, 4))], 4, (8, 8, 4)
        )
        f0 = small_ops.initial(y)
        g_hs, g_ms = small_ops.residual_grads(f0, y)
        out, _ = net_forward(params, y, small_ops)
        np.testing.assert_allclose(out, f0 - (g_hs + g_ms) / 2.0, atol=1e-14)

    def test_zero_measurements(self, small_ops):
        y = (np.zeros(small_ops.hs.shot_shape), np.zeros(small_ops.ms.shot_shape))
        out, _ = net_forward(init_params((8, 8, 4), 4, 3, seed=0), y, small_ops)
        assert not np.any(out)

    def test_deterministic(self, small_ops, rng):
        _, y = _measure(small_ops, rng)
        params = init_params((8, 8, 4), 4, 3, seed=2)
        a, _ = net_forward(params, y, small_ops)
        b, _ = net_forward(params.copy(), y, small_ops)
        assert a.tobytes() == b.tobytes()

    def test_trace(self, small_ops, rng):
        _, y = _measure(small_ops, rng)
        params = init_params((8, 8, 4), 4, 3, seed=2)
        out, trace = net_forward(params, y, small_ops, with_inverse=True)
        assert len(trace) == 3 and trace[-1].f is not None
        np.testing.assert_allclose(trace[-1].f, out)
        np.testing.assert_allclose(trace[1].u, params.layers[1].nft(trace[1].f), atol=1e-14)
        np.testing.assert_allclose(trace[0].inv, params.layers[0].nit(trace[0].u), atol=1e-14)

    def test_dims_mismatch(self, small_ops, rng):
        _, y = _measure(small_ops, rng)
        with pytest.raises(ValueError, match="dims"):
            net_forward(init_params((8, 8, 8), 4, 1), y, small_ops)

    @pytest.mark.parametrize("K", [1, 3, 5])
    def test_unrolling_is_faithful(self, K, rng):
        ops = dual_arm((8, 8, 4), 2, 2, 0.5, aperture_seed=11)
        _, y = _measure(ops, rng)
        cfg = SolverConfig(alpha=3.0, rho=0.2, lambda1=0.8, lambda2=0.004)
        psi = DctTransform()
        f0 = ops.initial(y)
        state = FusionState(f0, dct_transform(f0), np.zeros_like(f0))
        for _ in range(K):
            state = ladmm_iterate(state, y, ops, cfg, psi)
        out, _ = net_forward(dct_network(K, cfg, (8, 8, 4)), y, ops)
        assert np.max(np.abs(out - state.f)) <= 1e-10


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        params = init_params((8, 8, 4), 3, 2, seed=4)
        params.layers[1].alpha = 0.123456789
        params.meta["note"] = "x"
        save_checkpoint(params, tmp_path / "m.ckpt")
        back = load_checkpoint(tmp_path / "m.ckpt")
        assert back.flat().tobytes() == params.flat().tobytes()
        assert back.dims == (8, 8, 4) and back.feature_maps == 3 and back.meta["note"] == "x"

    def test_wrong_layer_count(self, tmp_path):
        save_checkpoint(init_params((8, 8, 4), 3, 2), tmp_path / "m.ckpt")
        with pytest.raises(CheckpointError, match="shape mismatch"):
            load_checkpoint(tmp_path / "m.ckpt", n_layers=3)

    def test_wrong_dims(self, tmp_path):
        save_checkpoint(init_params((8, 8, 4), 3, 2), tmp_path / "m.ckpt")
        with pytest.raises(CheckpointError, match="shape mismatch"):
            load_checkpoint(tmp_path / "m.ckpt", dims=(16, 16, 4))

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(init_params((8, 8, 4), 3, 2), path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(CheckpointError, match="shape mismatch"):
            load_checkpoint(path)

    @pytest.mark.parametrize("blob", [b"", b"NOPE" + bytes(8)])
    def test_garbage(self, tmp_path, blob):
        (tmp_path / "g.ckpt").write_bytes(blob)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "g.ckpt")

    def test_version(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(init_params((8, 8, 4), 3, 1), path)
        raw = bytearray(path.read_bytes())
        raw[4] = 9
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_k5_reload_reproduces_forward(self, tmp_path, rng):
        ops = dual_arm((8, 8, 4), 2, 2, 0.5, aperture_seed=1)
        _, y = _measure(ops, rng)
        params = init_params((8, 8, 4), 4, 5, seed=8)
        save_checkpoint(params, tmp_path / "k5.ckpt")
        a, _ = net_forward(params, y, ops)
        b, _ = net_forward(load_checkpoint(tmp_path / "k5.ckpt"), y, ops)
        assert a.tobytes() == b.tobytes()

    def test_fixed_transforms_refused(self, tmp_path):
        with pytest.raises(CheckpointError):
            save_checkpoint(dct_network(1, SolverConfig(alpha=1.0), (8, 8, 4)), tmp_path / "d.ckpt")
