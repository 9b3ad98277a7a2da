import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmblock.factor import FactorModel, RankSpec, hooi_refine, mmode_svd, rank1_cp, reconstruct
from mmblock.tensor import matrixize, mode_product, multi_mode_product, orthonormality_residual
from oracles import tucker_loop


def _rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def _outer(*vs):
    out = vs[0]
    for v in vs[1:]:
        out = np.multiply.outer(out, v)
    return out


class TestMmodeSVD:
    def test_rank_one_unit_vectors(self, rng):
        vs = [v / np.linalg.norm(v) for v in (rng.standard_normal(n) for n in (4, 3, 2))]
        model = mmode_svd(_outer(*vs), (4, 3, 2))
        nz = np.abs(model.core) > 1e-12
        assert nz.sum() == 1
        assert abs(abs(model.core[nz][0]) - 1.0) < 1e-12

    def test_rank_one_scaled(self, rng):
        vs = [rng.standard_normal(n) for n in (4, 3, 2)]
        model = mmode_svd(_outer(*vs), (1, 1, 1))
        assert abs(abs(model.core.item()) - np.prod([np.linalg.norm(v) for v in vs])) < 1e-10

    def test_zero_tensor(self):
        model = mmode_svd(np.zeros((3, 2, 2)), (3, 2, 2))
        assert not np.any(model.core)
        assert not np.any(reconstruct(model))
        for U in model.factors:
            assert orthonormality_residual(U) < 1e-12

    def test_full_rank_reconstruction(self, rng):
        D = rng.standard_normal((5, 4, 3))
        model = mmode_svd(D, D.shape)
        assert _rel(reconstruct(model), D) < 1e-10
        for U in model.factors:
            assert orthonormality_residual(U) < 1e-10

    def test_factor_is_leading_singular_vectors(self, rng):
        D = rng.standard_normal((5, 4, 3))
        model = mmode_svd(D, (2, 2, 2))
        for m in range(3):
            U = np.linalg.svd(matrixize(D, m))[0][:, :2]
            assert np.allclose(np.abs(U.T @ model.factors[m]), np.eye(2), atol=1e-10)

    def test_rank_exceeds_extent(self, rng):
        with pytest.raises(ValueError, match="exceeds extent"):
            mmode_svd(rng.standard_normal((3, 2)), (4, 2))

    def test_non_finite(self):
        with pytest.raises(ValueError, match="non-finite"):
            mmode_svd(np.full((2, 2), np.nan), (1, 1))

    def test_energy_threshold(self, rng):
        D = rng.standard_normal((8, 6, 5))
        for tau in (0.5, 0.9, 0.99):
            model = mmode_svd(D, tau)
            for m in range(3):
                s = np.linalg.svd(matrixize(D, m), compute_uv=False)
                kept = np.sum(s[: model.ranks[m]] ** 2) / np.sum(s**2)
                assert kept >= tau
                # one fewer column would fall below the threshold
                assert np.sum(s[: model.ranks[m] - 1] ** 2) / np.sum(s**2) < tau

    def test_default_energy_is_099(self, rng):
        D = rng.standard_normal((8, 6, 5))
        assert mmode_svd(D).ranks == mmode_svd(D, 0.99).ranks

    def test_centering(self, rng):
        D = rng.standard_normal((6, 3, 2)) + 5.0
        model = mmode_svd(D, (6, 3, 2), center=True)
        assert np.allclose(model.mean, D.reshape(6, -1).mean(axis=1))
        assert _rel(reconstruct(model), D) < 1e-10


class TestRankSpec:
    def test_coerce(self):
        assert RankSpec.coerce(None).energy == 0.99
        assert RankSpec.coerce(0.5).energy == 0.5
        assert RankSpec.coerce([2, 3]).ranks == (2, 3)

    def test_invalid(self):
        with pytest.raises(ValueError):
            RankSpec(ranks=(0, 2))
        with pytest.raises(ValueError):
            RankSpec(energy=1.5)


class TestHOOI:
    def test_exact_rank_stops_immediately(self, rng):
        Z = rng.standard_normal((2, 2, 2))
        D = multi_mode_product(Z, [np.linalg.qr(rng.standard_normal((n, 2)))[0] for n in (5, 4, 3)])
        model = hooi_refine(D, mmode_svd(D, (2, 2, 2)))
        assert len(model.losses) == 2
        assert model.losses[-1] < 1e-20 * np.sum(D**2)

    def test_truncated_improves_and_is_monotone(self, rng):
        D = rng.standard_normal((6, 5, 4))
        init = mmode_svd(D, (2, 2, 2))
        loss0 = np.sum((D - reconstruct(init)) ** 2)
        model = hooi_refine(D, init, eps=1e-14, max_iters=200)
        assert model.losses[0] == pytest.approx(loss0, rel=1e-12)
        assert np.all(np.diff(model.losses) <= 1e-12 * np.sum(D**2))
        assert np.sum((D - reconstruct(model)) ** 2) <= loss0
        for U in model.factors:
            assert orthonormality_residual(U) < 1e-10

    def test_zero_iterations(self, rng):
        D = rng.standard_normal((4, 3, 2))
        init = mmode_svd(D, (2, 2, 2))
        assert hooi_refine(D, init, max_iters=0) is init

    def test_shape_mismatch(self, rng):
        init = mmode_svd(rng.standard_normal((4, 3, 2)), (2, 2, 2))
        with pytest.raises(ValueError, match="does not match"):
            hooi_refine(rng.standard_normal((4, 3, 3)), init)


class TestReconstruct:
    def test_identity_core_orthonormal_factors(self, rng):
        Us = [np.linalg.qr(rng.standard_normal((n, n)))[0] for n in (3, 2, 2)]
        Z = np.zeros((3, 2, 2))
        Z[0, 0, 0] = Z[1, 1, 1] = 1.0
        model = FactorModel(Z, Us, [np.ones(n) for n in (3, 2, 2)])
        assert np.allclose(reconstruct(model), tucker_loop(Z, Us), atol=1e-12)

    def test_zero_core_gives_mean(self):
        mean = np.array([1.0, 2.0, 3.0])
        model = FactorModel(np.zeros((3, 2)), [np.eye(3), np.eye(2)], [np.zeros(3), np.zeros(2)], mean=mean)
        assert np.array_equal(reconstruct(model), np.repeat(mean[:, None], 2, axis=1))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_equivalence_transform(self, seed):
        rng = np.random.default_rng(seed)
        D = rng.standard_normal((4, 3, 3))
        model = mmode_svd(D, (3, 2, 2))
        base = reconstruct(model)
        factors, core = list(model.factors), model.core
        for m in range(3):
            k = factors[m].shape[1]
            G = np.eye(k) + 0.3 * rng.standard_normal((k, k)) / np.sqrt(k)
            factors[m] = factors[m] @ G
            core = mode_product(core, m, np.linalg.inv(G))
        moved = reconstruct(FactorModel(core, factors, model.sigmas))
        assert np.max(np.abs(moved - base)) < 1e-10 * max(1.0, np.max(np.abs(base)))


class TestRank1CP:
    def test_exact_rank_one(self, rng):
        a, b, c = rng.standard_normal(4), rng.standard_normal(3), rng.standard_normal(5)
        fit = rank1_cp(_outer(a, b, c))
        assert fit.residual < 1e-10
        for u, v in zip(fit.factors[1:], (b, c)):
            assert abs(abs(u @ v) / np.linalg.norm(v) - 1.0) < 1e-10
            assert abs(np.linalg.norm(u) - 1.0) < 1e-12
        assert np.allclose(_outer(*fit.factors), _outer(a, b, c), atol=1e-10)
        assert not fit.degenerate

    def test_tie_is_flagged(self):
        e = np.eye(2)
        T = _outer(e[0], e[0], e[0]) + _outer(e[1], e[1], e[1])
        fit = rank1_cp(T)
        assert fit.degenerate
        assert fit.residual == pytest.approx(np.sqrt(0.5), abs=1e-8)

    def test_order_one(self):
        v = np.array([1.0, -2.0, 0.5])
        fit = rank1_cp(v)
        assert np.array_equal(fit.factors[0], v)

    def test_zero(self):
        with pytest.raises(ValueError, match="no direction"):
            rank1_cp(np.zeros((2, 2)))

    def test_residual_non_increasing(self, rng):
        fit = rank1_cp(rng.standard_normal((4, 3, 3)), eps=1e-15)
        assert np.all(np.diff(fit.losses) <= 1e-12)
