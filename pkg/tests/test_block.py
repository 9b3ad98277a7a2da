from dataclasses import replace

import numpy as np
import pytest

import mmblock.block as blockmod
from mmblock.block import (
    BlockFactorModel,
    BlockSolverConfig,
    block_loss,
    block_mmode_svd,
    factorize_independent_parts,
    factorize_overlapping_shared_rank,
    initialize_block,
    reconstruct_block,
    solve_core,
    update_mode_matrix,
)
from mmblock.factor import hooi_refine, mmode_svd, reconstruct
from mmblock.hierarchy import HierarchySpec, Node, subdivision
from mmblock.synth import SynthConfig, synth_generate
from mmblock.tensor import matrixize, mode_product, multi_mode_product, orthonormality_residual, pinv, subspace_angles


def _rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def _orth(rng, n, r):
    return np.linalg.qr(rng.standard_normal((n, r)))[0]


def _parts_data(rng, shared=(), size=16, parts=2, ranks=(3, 2, 2), extents=(5, 4)):
    """Disjoint parts over mode 0; modes listed in ``shared`` use one factor for all parts."""
    common = {c: _orth(rng, extents[c - 1], ranks[c]) for c in shared}
    n = size // parts
    D = np.zeros((size,) + extents)
    for s in range(parts):
        U0 = np.zeros((size, ranks[0]))
        U0[s * n:(s + 1) * n] = _orth(rng, n, ranks[0])
        Us = [U0] + [common.get(c, _orth(rng, extents[c - 1], ranks[c])) for c in range(1, len(ranks))]
        D += multi_mode_product(rng.standard_normal(ranks), Us)
    return D / np.linalg.norm(D)


def _whole(size):
    return HierarchySpec(size, [Node("w", None, range(size))])


class TestBlockSolver:
    def test_trivial_hierarchy_matches_hooi(self, rng):
        Z = rng.standard_normal((3, 2, 2))
        D = multi_mode_product(Z, [_orth(rng, n, r) for n, r in ((8, 3), (5, 2), (4, 2))])
        D = D + 1e-3 * rng.standard_normal(D.shape)
        flat = hooi_refine(D, mmode_svd(D, (3, 2, 2)), eps=1e-15, max_iters=500)
        model = block_mmode_svd(D, _whole(8), BlockSolverConfig(ranks=(3, 2, 2), eps=1e-15, max_iters=500))
        assert np.linalg.norm(reconstruct_block(model) - reconstruct(flat)) < 1e-8

    def test_known_block_model_shared(self, rng):
        D = _parts_data(rng, shared=(1,))
        spec = subdivision(16, 2, compositional={1: "shared"})
        model = block_mmode_svd(D, spec, BlockSolverConfig(ranks=(3, 2, 2), max_iters=200, eps=1e-16))
        assert model.losses[-1] < 1e-8
        assert model.factors[1][0] is model.factors[1][1]

    def test_known_block_model_overlapping_filters(self, rng):
        D = rng.standard_normal((8, 3, 2))
        model = block_mmode_svd(D, subdivision(8, 2, filter="pyramid"), BlockSolverConfig(max_iters=20))
        assert model.losses[-1] / np.sum(D**2) < 1e-8

    def test_max_iters_zero_is_initialization(self, rng):
        D = _parts_data(rng)
        spec = subdivision(16, 2)
        cfg = BlockSolverConfig(ranks=(2, 2, 2), max_iters=0)
        model = block_mmode_svd(D, spec, cfg)
        init = initialize_block(D, spec, cfg)
        for a, b in zip(model.cores, init.cores):
            assert np.array_equal(a, b)
        assert model.losses == [block_loss(D, init)]

    def test_monotone_and_orthonormal(self, rng):
        D = rng.standard_normal((12, 5, 4))
        spec = subdivision(12, 3, compositional={2: "shared"})
        model = block_mmode_svd(D, spec, BlockSolverConfig(ranks=(2, 2, 2), max_iters=30, eps=1e-300))
        assert np.all(np.diff(model.losses) <= 1e-10 * np.sum(D**2))
        for m in range(3):
            for s in range(model.S):
                U = model.factors[m][s]
                U = U[model.supports[s]] if m == 0 else U
                assert orthonormality_residual(U) < 1e-8
        assert model.report["penalty"] < 1e-20
        assert set(model.report) >= {"losses", "block_ranks", "orthonormality", "singularities"}

    def test_penalty_mode_monotone(self, rng):
        D = rng.standard_normal((12, 5, 4))
        cfg = BlockSolverConfig(ranks=(2, 2, 2), max_iters=30, orthonormalization="penalty")
        model = block_mmode_svd(D, subdivision(12, 2), cfg)
        assert np.all(np.diff(model.losses) <= 1e-10 * np.sum(D**2))

    def test_rank_exceeds_block(self, rng):
        with pytest.raises(ValueError, match="exceeds"):
            block_mmode_svd(rng.standard_normal((8, 3, 2)), subdivision(8, 2), BlockSolverConfig(ranks=(5, 2, 2)))

    def test_invalid_spec(self, rng):
        bad = HierarchySpec(8, [Node("r", None, range(8), "none"), Node("a", "r", range(5)), Node("b", "r", range(3, 8))])
        with pytest.raises(ValueError):
            block_mmode_svd(rng.standard_normal((8, 3)), bad)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            BlockSolverConfig(eps=0.0)
        with pytest.raises(ValueError):
            BlockSolverConfig(max_iters=-1)
        with pytest.raises(ValueError):
            BlockSolverConfig(orthonormalization="soft")


class TestUpdateModeMatrix:
    def test_fixed_point(self, rng):
        D = _parts_data(rng)
        spec = subdivision(16, 2)
        model = block_mmode_svd(D, spec, BlockSolverConfig(ranks=(3, 2, 2), max_iters=50, eps=1e-16))
        for c in range(3):
            X = update_mode_matrix(c, D, model)
            start = 0
            for s in range(model.S):
                w = model.factors[c][s].shape[1]
                ang = subspace_angles(X[:, start:start + w], model.factors[c][s])
                assert np.max(ang) < 1e-8
                start += w

    def test_single_segment_shared_is_tucker_als(self, rng):
        D = rng.standard_normal((6, 5, 4))
        spec = HierarchySpec(6, [Node("w", None, range(6))], {1: "shared", 2: "shared"})
        model = initialize_block(D, spec, BlockSolverConfig(ranks=(3, 2, 2)))
        for c in range(3):
            Y = multi_mode_product(D, model.segment_factors(0), transpose=True, skip=c)
            expected = matrixize(Y, c) @ pinv(matrixize(model.cores[0], c))
            assert np.allclose(update_mode_matrix(c, D, model), expected, atol=1e-10)

    def test_perturbation_decreases_loss(self, rng):
        D = _parts_data(rng) + 1e-2 * rng.standard_normal((16, 5, 4))
        spec = subdivision(16, 2)
        model = block_mmode_svd(D, spec, BlockSolverConfig(ranks=(3, 2, 2), max_iters=5))
        factors = [list(f) for f in model.factors]
        factors[1][0] = factors[1][0] + 0.3 * rng.standard_normal(factors[1][0].shape)
        pert = replace(model, factors=factors)
        before = block_loss(D, pert)
        X = update_mode_matrix(1, D, pert)
        factors[1] = [X[:, :2], X[:, 2:]]
        assert block_loss(D, replace(pert, factors=factors)) <= before

    def test_measurement_rows_respect_support(self, rng):
        D = rng.standard_normal((12, 3, 2))
        model = initialize_block(D, subdivision(12, 3), BlockSolverConfig(ranks=(2, 2, 2)))
        X = update_mode_matrix(0, D, model)
        for s, rows in enumerate(model.supports):
            outside = np.setdiff1d(np.arange(12), rows)
            assert not np.any(X[np.ix_(outside, range(2 * s, 2 * s + 2))])

    def test_all_zero_design(self, rng):
        D = rng.standard_normal((8, 3, 2))
        model = initialize_block(D, subdivision(8, 2), BlockSolverConfig(ranks=(2, 2, 2)))
        zeroed = replace(model, cores=[np.zeros_like(z) for z in model.cores])
        with pytest.raises(blockmod.SingularUpdateError):
            update_mode_matrix(1, D, zeroed)


class TestSolveCore:
    def test_single_segment_projection(self, rng):
        D = rng.standard_normal((6, 4, 3))
        model = initialize_block(D, _whole(6), BlockSolverConfig(ranks=(3, 2, 2)))
        (core,) = solve_core(D, model)
        assert np.max(np.abs(core - multi_mode_product(D, model.segment_factors(0), transpose=True))) < 1e-10

    def test_ground_truth_cores(self, rng):
        D, truth = synth_generate(SynthConfig(parts=2, part_ranks=(3, 2, 2), cardinalities=(4, 3, 3), I0=32))
        cores = solve_core(D, truth)
        assert _rel(reconstruct_block(replace(truth, cores=cores)), D) < 1e-8

    def test_coupled_segments_dense_and_gram_agree(self, rng, monkeypatch):
        D = _parts_data(rng, shared=(1, 2))
        spec = subdivision(16, 2, compositional={1: "shared", 2: "shared"})
        model = initialize_block(D, spec, BlockSolverConfig(ranks=(3, 2, 2)))
        model = replace(model, factors=[
            [U + 0.1 * rng.standard_normal(U.shape) * (U != 0) for U in model.factors[0]]
        ] + model.factors[1:])
        dense = solve_core(D, model)
        monkeypatch.setattr(blockmod, "DENSE_CORE_LIMIT", 0)
        gram = solve_core(D, model)
        for a, b in zip(dense, gram):
            assert np.allclose(a, b, atol=1e-8)

    def test_restricted_matches_explicit_kronecker(self, rng):
        # two segments sharing every mode: columns of the restricted Kronecker solve
        D = rng.standard_normal((6, 3, 2))
        Us = [[_orth(rng, n, 2) for _ in range(2)] for n in (6, 3, 2)]
        model = BlockFactorModel(["a", "b"], [np.zeros((2, 2, 2))] * 2, Us, (False,) * 3,
                                 [np.arange(6)] * 2)
        cores = solve_core(D, model)
        K = np.hstack([np.kron(np.kron(Us[2][s], Us[1][s]), Us[0][s]) for s in range(2)])
        z = np.linalg.lstsq(K, D.ravel(order="F"), rcond=None)[0]
        got = np.concatenate([c.ravel(order="F") for c in cores])
        assert np.allclose(got, z, atol=1e-10)

    def test_zero_data(self, rng):
        D = rng.standard_normal((8, 3, 2))
        model = initialize_block(D, subdivision(8, 2), BlockSolverConfig(ranks=(2, 2, 2)))
        assert all(not np.any(z) for z in solve_core(np.zeros_like(D), model))

    def test_empty_pattern(self):
        empty = BlockFactorModel([], [], [[], []], (False, False), [])
        with pytest.raises(ValueError, match="empty"):
            solve_core(np.zeros((2, 2)), empty)


class TestIndependentParts:
    def test_exact_reconstruction(self, rng):
        D = _parts_data(rng)
        model = factorize_independent_parts(D, subdivision(16, 2))
        assert _rel(reconstruct_block(model), D) < 1e-10

    def test_zero_part(self, rng):
        D = _parts_data(rng)
        D[8:] = 0.0
        model = factorize_independent_parts(D, subdivision(16, 2))
        assert not np.any(model.cores[1])

    def test_matches_block_solver(self, rng):
        D = _parts_data(rng) + 1e-3 * rng.standard_normal((16, 5, 4))
        spec = subdivision(16, 2)
        ranks = (3, 2, 2)
        parts = factorize_independent_parts(D, spec, ranks=ranks, eps=1e-15, max_iters=500)
        block = block_mmode_svd(D, spec, BlockSolverConfig(ranks=ranks, eps=1e-15, max_iters=500))
        assert _rel(reconstruct_block(block), reconstruct_block(parts)) < 1e-8

    def test_overlap_rejected(self, rng):
        spec = subdivision(8, 2, filter="pyramid")
        with pytest.raises(ValueError, match="overlap"):
            factorize_independent_parts(rng.standard_normal((8, 3)), spec)


class TestOverlappingSharedRank:
    def test_single_term_is_hooi(self, rng):
        D = multi_mode_product(rng.standard_normal((2, 2, 2)), [_orth(rng, n, 2) for n in (6, 5, 4)])
        D = D + 1e-3 * rng.standard_normal(D.shape)
        model = factorize_overlapping_shared_rank(D, 1, (2, 2, 2), eps=1e-15, max_iters=300)
        flat = hooi_refine(D, mmode_svd(D, (2, 2, 2)), eps=1e-15, max_iters=300)
        assert np.linalg.norm(reconstruct_block(model) - reconstruct(flat)) < 1e-8

    def test_two_components_recovered(self, rng):
        shape, r = (8, 7, 6), 2
        full = [_orth(rng, n, 2 * r) for n in shape]
        D = sum(multi_mode_product(rng.standard_normal((r,) * 3), [U[:, s * r:(s + 1) * r] for U in full])
                for s in range(2))
        model = factorize_overlapping_shared_rank(D, 2, (r, r, r))
        assert _rel(reconstruct_block(model), D) < 1e-6

    def test_monotone_twenty_sweeps(self, rng):
        D = rng.standard_normal((6, 5, 4))
        model = factorize_overlapping_shared_rank(D, 2, (2, 2, 2), eps=1e-300, max_iters=20)
        assert len(model.losses) == 21
        assert np.all(np.diff(model.losses) <= 1e-10 * np.sum(D**2))

    def test_inconsistent_ranks(self, rng):
        with pytest.raises(ValueError, match="share one rank"):
            factorize_overlapping_shared_rank(rng.standard_normal((4, 3, 3)), 2, [(2, 2, 2), (1, 2, 2)])


class TestModelInvariants:
    def test_equivalence_transform(self, rng):
        D = _parts_data(rng)
        model = factorize_independent_parts(D, subdivision(16, 2), ranks=(3, 2, 2))
        base = reconstruct_block(model)
        factors = [list(f) for f in model.factors]
        cores = list(model.cores)
        for c in range(3):
            for s in range(model.S):
                G = _orth(rng, factors[c][s].shape[1], factors[c][s].shape[1])
                factors[c][s] = factors[c][s] @ G
                cores[s] = mode_product(cores[s], c, G.T)
        moved = reconstruct_block(replace(model, factors=factors, cores=cores))
        assert np.max(np.abs(moved - base)) <= 1e-10

    def test_materialized_core(self, rng):
        D = _parts_data(rng)
        model = factorize_independent_parts(D, subdivision(16, 2), ranks=(3, 2, 2))
        Z = model.materialize_core()
        assert Z.shape == (6, 4, 4)
        assert np.array_equal(Z[:3, :2, :2], model.cores[0])
        assert np.array_equal(Z[3:, 2:, 2:], model.cores[1])
        assert not np.any(Z[:3, 2:]) and not np.any(Z[3:, :2])
        full = multi_mode_product(Z, [model.mode_matrix(c) for c in range(3)])
        assert np.allclose(full, reconstruct_block(model), atol=1e-12)
