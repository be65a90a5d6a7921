import numpy as np
import pytest

from ladmmnet.cassi import (
    CassiOperator,
    CodedApertureStack,
    DualArm,
    add_noise,
    compression_ratio,
    design_apertures,
    dual_arm,
    hs_adjoint,
    hs_forward,
    hs_operator,
    load_apertures,
    ms_adjoint,
    ms_forward,
    ms_operator,
    save_apertures,
    shots_for_ratio,
)
from oracles import dense_hs, dense_ms, unvec_cube, unvec_shots, vec_cube, vec_shots


class TestApertures:
    def test_single_shot_passes_everything(self):
        ap = design_apertures(4, 5, 6, 1, seed=0)
        assert np.all(ap.mask == 1)

    def test_one_band_per_shot(self):
        ap = design_apertures(4, 4, 5, 5, seed=1)
        assert np.all(ap.mask.sum(axis=1) == 1)
        assert np.all(ap.mask.sum(axis=0) == 1)

    def test_single_pixel_partition(self):
        ap = design_apertures(1, 1, 4, 2, seed=0)
        sel = [set(np.flatnonzero(ap.mask[w, :, 0, 0])) for w in range(2)]
        assert len(sel[0]) == len(sel[1]) == 2
        assert sel[0].isdisjoint(sel[1]) and sel[0] | sel[1] == {0, 1, 2, 3}

    @pytest.mark.parametrize("L,W", [(31, 8), (16, 4), (7, 3), (4, 4)])
    def test_invariants(self, L, W):
        ap = design_apertures(6, 5, L, W, seed=L + W)
        assert ap.is_complementary()
        counts = ap.mask.sum(axis=1)
        assert set(np.unique(counts)) <= {L // W, -(-L // W)}

    def test_deterministic(self):
        a = design_apertures(5, 5, 8, 3, seed=9)
        b = design_apertures(5, 5, 8, 3, seed=9)
        np.testing.assert_array_equal(a.mask, b.mask)

    @pytest.mark.parametrize("W", [0, 5])
    def test_bad_shot_count(self, W):
        with pytest.raises(ValueError):
            design_apertures(2, 2, 4, W, seed=0)

    def test_non_binary_rejected(self):
        with pytest.raises(ValueError):
            CodedApertureStack(np.full((1, 1, 2, 2), 0.5))


class TestRatio:
    def test_paper_ratio(self):
        assert compression_ratio(4, 16) == 0.25

    def test_identity(self):
        assert compression_ratio(31, 31) == 1.0

    def test_half(self):
        assert compression_ratio(8, 16) == 0.5

    @pytest.mark.parametrize("ratio,L,W", [(0.25, 16, 4), (0.375, 16, 6), (0.5, 16, 8), (0.25, 31, 8)])
    def test_shots_for_ratio(self, ratio, L, W):
        assert shots_for_ratio(ratio, L) == W

    def test_zero_shots(self):
        with pytest.raises(ValueError):
            shots_for_ratio(0.01, 8)


class TestForward:
    def test_hs_ones(self):
        op = CassiOperator("hs", CodedApertureStack(np.ones((1, 1, 1, 1))), (2, 2, 1), p=2)
        assert hs_forward(np.ones((1, 2, 2)), op).ravel().tolist() == [1.0]

    def test_ms_band_mean(self):
        op = CassiOperator("ms", CodedApertureStack(np.ones((1, 1, 1, 1))), (1, 1, 2), q=2)
        assert ms_forward(np.array([2.0, 4.0]).reshape(2, 1, 1), op).ravel().tolist() == [3.0]

    def test_zero_cube(self, small_ops):
        z = np.zeros(small_ops.cube_shape)
        assert not np.any(hs_forward(z, small_ops.hs)) and not np.any(ms_forward(z, small_ops.ms))

    def test_hs_against_dense(self, small_ops, rng):
        f = rng.random(small_ops.cube_shape)
        H = dense_hs(small_ops.hs.apertures.mask, 8, 8, 4, 2)
        assert H.shape == (int(np.prod(small_ops.hs.shot_shape)), 8 * 8 * 4)
        got = vec_shots(hs_forward(f, small_ops.hs))
        assert np.max(np.abs(got - H @ vec_cube(f))) <= 1e-12

    def test_ms_against_dense(self, small_ops, rng):
        f = rng.random(small_ops.cube_shape)
        H = dense_ms(small_ops.ms.apertures.mask, 8, 8, 4, 2)
        assert H.shape == (int(np.prod(small_ops.ms.shot_shape)), 8 * 8 * 4)
        got = vec_shots(ms_forward(f, small_ops.ms))
        assert np.max(np.abs(got - H @ vec_cube(f))) <= 1e-12

    def test_wrong_arm(self, small_ops):
        with pytest.raises(ValueError):
            hs_forward(np.zeros(small_ops.cube_shape), small_ops.ms)

    def test_dimension_mismatch(self, small_ops):
        with pytest.raises(ValueError):
            small_ops.hs.forward(np.zeros((4, 8, 7)))
        with pytest.raises(ValueError):
            small_ops.ms.adjoint(np.zeros((3, 8, 8)))

    def test_bad_aperture_dims(self):
        with pytest.raises(ValueError):
            CassiOperator("hs", design_apertures(8, 8, 4, 2, 0), (8, 8, 4), p=2)


class TestAdjoint:
    def test_zero(self, small_ops):
        assert not np.any(hs_adjoint(np.zeros(small_ops.hs.shot_shape), small_ops.hs))
        assert not np.any(ms_adjoint(np.zeros(small_ops.ms.shot_shape), small_ops.ms))

    def test_inner_products(self, rng):
        ops = dual_arm((16, 16, 8), 2, 2, 0.25, aperture_seed=5)
        for op in (ops.hs, ops.ms):
            for _ in range(100):
                f = rng.standard_normal(op.cube_shape)
                y = rng.standard_normal(op.shot_shape)
                assert abs(np.vdot(op.forward(f), y) - np.vdot(f, op.adjoint(y))) <= 1e-10

    def test_against_dense_transpose(self, small_ops, rng):
        M, N, L = small_ops.full_dims
        for op, H in (
            (small_ops.hs, dense_hs(small_ops.hs.apertures.mask, M, N, L, 2)),
            (small_ops.ms, dense_ms(small_ops.ms.apertures.mask, M, N, L, 2)),
        ):
            y = rng.standard_normal(op.shot_shape)
            got = vec_cube(op.adjoint(y))
            assert np.max(np.abs(got - H.T @ vec_shots(y))) <= 1e-12


class TestProperties:
    def test_linearity(self, small_ops, rng):
        for op in (small_ops.hs, small_ops.ms):
            x, y = rng.standard_normal((2,) + op.cube_shape)
            a, b = rng.standard_normal(2)
            np.testing.assert_allclose(op(a * x + b * y), a * op(x) + b * op(y), atol=1e-12)

    @pytest.mark.parametrize("M,N,L,p,q,W", [
        (2, 2, 2, 1, 1, 1), (4, 2, 4, 2, 2, 2), (8, 8, 4, 2, 2, 2), (6, 4, 4, 2, 2, 1),
        (8, 4, 2, 4, 2, 1), (3, 3, 4, 3, 4, 1),
    ])
    def test_dense_equivalence_grid(self, M, N, L, p, q, W):
        for seed in range(5):
            hs = hs_operator((M, N, L), p, min(W, L), seed)
            ms = ms_operator((M, N, L), q, min(W, L // q), seed + 100)
            Hh = dense_hs(hs.apertures.mask, M, N, L, p)
            Hm = dense_ms(ms.apertures.mask, M, N, L, q)
            f = np.random.default_rng(seed).standard_normal((L, M, N))
            assert np.max(np.abs(vec_shots(hs(f)) - Hh @ vec_cube(f))) <= 1e-12
            assert np.max(np.abs(vec_shots(ms(f)) - Hm @ vec_cube(f))) <= 1e-12
            yh = np.random.default_rng(seed + 1).standard_normal(hs.shot_shape)
            assert np.max(np.abs(vec_cube(hs.adjoint(yh)) - Hh.T @ vec_shots(yh))) <= 1e-12

    def test_complementary_full_sampling_sums_bands(self, rng):
        op = hs_operator((6, 6, 5), 1, 5, seed=2)
        f = rng.random(op.cube_shape)
        np.testing.assert_allclose(op(f).sum(axis=0), f.sum(axis=0), atol=1e-12)

    def test_unvec_round_trip(self, rng):
        f = rng.random((3, 4, 5))
        np.testing.assert_array_equal(unvec_cube(vec_cube(f), f.shape), f)
        np.testing.assert_array_equal(unvec_shots(vec_shots(f), f.shape), f)


class TestNoise:
    def test_infinite_snr(self, rng):
        y = rng.random((2, 4, 4))
        np.testing.assert_array_equal(add_noise(y, np.inf, 0), y)

    def test_deterministic(self, rng):
        y = rng.random((2, 4, 4))
        np.testing.assert_array_equal(add_noise(y, 20, 3), add_noise(y, 20, 3))

    def test_empirical_snr(self, rng):
        y = rng.random((4, 50, 50)) + 0.1
        noisy = add_noise(y, 20.0, seed=11)
        snr = 10 * np.log10(np.mean(y**2) / np.mean((noisy - y) ** 2))
        assert abs(snr - 20.0) <= 0.5

    def test_zero_signal(self):
        with pytest.raises(ValueError):
            add_noise(np.zeros((1, 2, 2)), 30, 0)


def test_aperture_files_round_trip(tmp_path, small_ops):
    manifest = save_apertures(small_ops.hs, tmp_path)
    back = load_apertures(manifest)
    np.testing.assert_array_equal(back.apertures.mask, small_ops.hs.apertures.mask)
    assert back.manifest() == small_ops.hs.manifest()


def test_dual_arm_manifest_regenerates(small_ops):
    again = DualArm.from_manifest(small_ops.manifest())
    np.testing.assert_array_equal(again.hs.apertures.mask, small_ops.hs.apertures.mask)
    np.testing.assert_array_equal(again.ms.apertures.mask, small_ops.ms.apertures.mask)
