"""M-mode Block SVD: block multilinear factorization over a whole/part hierarchy.

The data tensor is modelled as a sum of segment terms

    D ~ sum_s Z_s x_0 U_{0,s} x_1 U_{1,s} ... x_C U_{C,s}

where, for a fully compositional factor ``c``, the concatenated mode matrix is
``U_cx = [U_{c,1} | ... | U_{c,S}]`` and, for a shared factor, one ``U_c``
serves every segment.  The hierarchical data tensor and its super-diagonal
core are never materialised; segments are stored as lists.

Measurement-mode blocks ``U_{0,s}`` are confined to the rows their segment
filter can reach, so disjoint parts decouple exactly into independent
M-mode SVDs of the parts.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from .factor import RankSpec, hooi_refine, leading_left_vectors, mmode_svd
from .hierarchy import HierarchySpec, assemble_hierarchical, segment
from .tensor import (
    kronecker,
    matrixize,
    mode_product,
    multi_mode_product,
    orthonormality_residual,
    pinv,
    thin_svd,
    vec,
    unvec,
)

__all__ = [
    "BlockFactorModel",
    "BlockSolverConfig",
    "SingularUpdateError",
    "block_mmode_svd",
    "initialize_block",
    "update_mode_matrix",
    "solve_core",
    "block_loss",
    "reconstruct_block",
    "factorize_independent_parts",
    "factorize_overlapping_shared_rank",
    "numerical_rank",
]

RANK_TOL = 1e-10
# Above this many entries the explicit restricted Kronecker matrix is replaced
# by its Kronecker-structured normal equations.
DENSE_CORE_LIMIT = 20_000_000


class SingularUpdateError(RuntimeError):
    pass


@dataclass(frozen=True)
class BlockSolverConfig:
    """Settings for :func:`block_mmode_svd`.

    ``ranks`` is ``None`` (numerical rank of every segment), a per-mode
    sequence applied to every segment, or a mapping from segment id to a
    per-mode sequence.  ``orthonormalization`` is ``"hard"`` (QR of each
    block, with the triangular factor absorbed into the core) or
    ``"penalty"`` (a partial step toward orthonormality weighted by
    ``penalty / (1 + penalty)``; experimental).
    """

    eps: float = 1e-12
    max_iters: int = 100
    orthonormalization: str = "hard"
    penalty: float = 1.0
    ranks: Any = None
    rank_tol: float = RANK_TOL
    rcond: float | None = None

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")
        if self.orthonormalization not in ("hard", "penalty"):
            raise ValueError(f"unknown orthonormalization {self.orthonormalization!r}")


@dataclass
class BlockFactorModel:
    """Per-segment cores plus per-(mode, segment) factor blocks.

    ``factors[m][s]`` is ``U_{m,s}``; for a shared mode every entry is the
    same array.  ``supports[s]`` lists the measurement rows ``U_{0,s}`` may
    occupy.  ``wholes`` holds parent-whole factorizations produced by the
    incremental solver, keyed by node id.
    """

    segment_ids: list[str]
    cores: list[np.ndarray]
    factors: list[list[np.ndarray]]
    shared: tuple[bool, ...]
    supports: list[np.ndarray]
    sigmas: list[list[np.ndarray]] | None = None
    hierarchy: HierarchySpec | None = None
    lambdas: np.ndarray | None = None
    mean: np.ndarray | None = None
    losses: list[float] = field(default_factory=list)
    report: dict = field(default_factory=dict)
    wholes: dict = field(default_factory=dict)

    @property
    def S(self) -> int:
        return len(self.cores)

    @property
    def order(self) -> int:
        return len(self.factors)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(f[0].shape[0] for f in self.factors)

    def block_ranks(self, s: int) -> tuple[int, ...]:
        return tuple(self.factors[m][s].shape[1] for m in range(self.order))

    def mode_matrix(self, c: int) -> np.ndarray:
        """``U_cx = [U_{c,1} | ... | U_{c,S}]``, or the single shared ``U_c``."""
        if self.shared[c]:
            return self.factors[c][0]
        return np.hstack(self.factors[c])

    def segment_factors(self, s: int) -> list[np.ndarray]:
        return [self.factors[m][s] for m in range(self.order)]

    def extended_core(self, s: int) -> np.ndarray:
        return mode_product(self.cores[s], 0, self.factors[0][s])

    def segment_reconstruction(self, s: int) -> np.ndarray:
        return multi_mode_product(self.cores[s], self.segment_factors(s))

    def materialize_core(self) -> np.ndarray:
        """Dense core with each ``Z_s`` on the super-diagonal (small models only)."""
        dims, offsets = [], []
        for m in range(self.order):
            widths = [self.factors[m][s].shape[1] for s in range(self.S)]
            if self.shared[m]:
                dims.append(widths[0])
                offsets.append([0] * self.S)
            else:
                dims.append(sum(widths))
                offsets.append(list(np.cumsum([0] + widths[:-1])))
        Z = np.zeros(dims)
        for s, core in enumerate(self.cores):
            idx = tuple(slice(offsets[m][s], offsets[m][s] + core.shape[m]) for m in range(self.order))
            Z[idx] += core
        return Z


def numerical_rank(s: np.ndarray, tol: float = RANK_TOL) -> int:
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > tol * s[0]))


def reconstruct_block(model: BlockFactorModel) -> np.ndarray:
    out = sum(model.segment_reconstruction(s) for s in range(model.S))
    if model.mean is not None:
        out = out + model.mean.reshape((-1,) + (1,) * (out.ndim - 1))
    return out


def block_loss(D: np.ndarray, model: BlockFactorModel) -> float:
    return float(np.sum((np.asarray(D) - reconstruct_block(model)) ** 2))


def _embed_rows(M: np.ndarray, rows: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n, M.shape[1]))
    out[rows] = M
    return out


def _segment_ranks(cfg_ranks, sid: str, order: int):
    if cfg_ranks is None:
        return None
    if isinstance(cfg_ranks, dict):
        r = cfg_ranks.get(sid)
        return None if r is None else tuple(r)
    r = tuple(cfg_ranks)
    if len(r) != order:
        raise ValueError(f"{len(r)} ranks given for an order-{order} tensor")
    return r


def _leading(M: np.ndarray, rank: int | None, tol: float) -> tuple[np.ndarray, np.ndarray]:
    U, s, _ = thin_svd(M)
    if rank is None:
        rank = max(numerical_rank(s, tol), 1)
    elif rank > M.shape[0]:
        raise ValueError(f"rank {rank} exceeds block extent {M.shape[0]}")
    if rank <= U.shape[1]:
        return U[:, :rank], s[:rank]
    return leading_left_vectors(M, rank)


def initialize_block(D: np.ndarray, spec: HierarchySpec, cfg: BlockSolverConfig) -> BlockFactorModel:
    """Per-segment M-mode SVDs concatenated along the block diagonal.

    Shared factors take the leading left singular vectors of the whole data
    tensor.  Each segment core is the projection of its segment tensor.
    """
    D = np.asarray(D, dtype=float)
    view = assemble_hierarchical(D, spec)
    M = D.ndim
    if M - 1 < max(spec.compositional, default=0):
        raise ValueError("compositional flags refer to modes beyond the data tensor")
    shared = (False,) + tuple(spec.is_shared(c) for c in range(1, M))
    ids = list(view.segments)
    factors: list[list[np.ndarray]] = [[] for _ in range(M)]
    sigmas: list[list[np.ndarray]] = [[] for _ in range(M)]
    supports = []
    shared_ranks = _segment_ranks(cfg.ranks, "__shared__", M) if not isinstance(cfg.ranks, dict) else None
    shared_blocks = {}
    for c in range(1, M):
        if shared[c]:
            r = None if shared_ranks is None else shared_ranks[c]
            shared_blocks[c] = _leading(matrixize(D, c), r, cfg.rank_tol)
    for sid in ids:
        Ds = view.segments[sid]
        rows = view.filters[sid].row_support(D.shape[0])
        supports.append(rows)
        ranks = _segment_ranks(cfg.ranks, sid, M)
        r0 = None if ranks is None else ranks[0]
        if r0 is not None and r0 > rows.size:
            raise ValueError(f"measurement rank {r0} exceeds the {rows.size} rows of segment {sid!r}")
        U0, s0 = _leading(matrixize(Ds[rows], 0), r0, cfg.rank_tol)
        factors[0].append(_embed_rows(U0, rows, D.shape[0]))
        sigmas[0].append(s0)
        for c in range(1, M):
            if shared[c]:
                U, s = shared_blocks[c]
            else:
                U, s = _leading(matrixize(Ds, c), None if ranks is None else ranks[c], cfg.rank_tol)
            factors[c].append(U)
            sigmas[c].append(s)
    cores = []
    for k, sid in enumerate(ids):
        cores.append(multi_mode_product(view.segments[sid], [factors[m][k] for m in range(M)], transpose=True))
    lambdas = np.full((M, len(ids)), cfg.penalty)
    return BlockFactorModel(ids, cores, factors, shared, supports, sigmas, spec, lambdas)


def _projected(model: BlockFactorModel, s: int, c: int) -> np.ndarray:
    """Mode-c matrixizing of ``Z_s`` multiplied by every factor except mode c."""
    P = multi_mode_product(model.cores[s], model.segment_factors(s), skip=c)
    return matrixize(P, c)


def _mode_update(c: int, D: np.ndarray, model: BlockFactorModel, rcond=None):
    Dc = matrixize(D, c)
    info = {"singular": False, "rank_deficient": False}
    if model.shared[c]:
        Wt = sum(_projected(model, s, c) for s in range(model.S))
        if not np.any(Wt):
            info["singular"] = True
            return model.factors[c][0].copy(), info
        info["rank_deficient"] = np.linalg.matrix_rank(Wt) < Wt.shape[0]
        return Dc @ pinv(Wt, rcond), info

    blocks = [_projected(model, s, c) for s in range(model.S)]
    Wt = np.vstack(blocks)
    current = model.mode_matrix(c)
    if not np.any(Wt):
        info["singular"] = True
        return current.copy(), info
    widths = [b.shape[0] for b in blocks]
    starts = np.cumsum([0] + widths)
    X = np.zeros((Dc.shape[0], Wt.shape[0]))
    if c == 0:
        # row i may only use the blocks of segments whose support covers it
        active: dict[tuple[int, ...], list[int]] = {}
        member = np.zeros((Dc.shape[0], model.S), dtype=bool)
        for s, rows in enumerate(model.supports):
            member[rows, s] = True
        for i in range(Dc.shape[0]):
            key = tuple(np.flatnonzero(member[i]))
            if key:
                active.setdefault(key, []).append(i)
        for key, rows in active.items():
            cols = np.concatenate([np.arange(starts[s], starts[s + 1]) for s in key])
            W = Wt[cols]
            if np.linalg.matrix_rank(W) < W.shape[0]:
                info["rank_deficient"] = True
            X[np.ix_(rows, cols)] = Dc[rows] @ pinv(W, rcond)
    else:
        if np.linalg.matrix_rank(Wt) < Wt.shape[0]:
            info["rank_deficient"] = True
        X = Dc @ pinv(Wt, rcond)
    return X, info


def update_mode_matrix(c: int, D: np.ndarray, model: BlockFactorModel, rcond: float | None = None) -> np.ndarray:
    """Least-squares optimum of ``U_cx`` with the core and other modes fixed.

    Solves ``D_[c] ~ U_cx W_c^T`` through ``U_cx = D_[c] (W_c^T)^+``, where
    the rows of ``W_c^T`` are the matrixized segment cores multiplied through
    by the other modes' blocks (the block Khatri-Rao structure).  Returns the
    raw solution, before orthonormalization.
    """
    X, info = _mode_update(c, np.asarray(D, dtype=float), model, rcond)
    if info["singular"]:
        raise SingularUpdateError(f"mode {c}: all-zero design matrix")
    return X


def _split_columns(model: BlockFactorModel, c: int, X: np.ndarray) -> list[np.ndarray]:
    if model.shared[c]:
        return [X] * model.S
    out, start = [], 0
    for s in range(model.S):
        w = model.factors[c][s].shape[1]
        out.append(X[:, start:start + w])
        start += w
    return out


def _orthonormalize(model: BlockFactorModel, c: int, blocks: list[np.ndarray], mode: str, lam: float):
    """Orthonormalize each block and absorb the inverse change of basis into the cores."""
    cores = list(model.cores)
    new_blocks = list(blocks)
    groups = [list(range(model.S))] if model.shared[c] else [[s] for s in range(model.S)]
    for group in groups:
        U = blocks[group[0]]
        if c == 0:
            rows = model.supports[group[0]]
            sub = U[rows]
        else:
            rows, sub = None, U
        if mode == "hard":
            Q, R = np.linalg.qr(sub)
            newU, T = Q, R
        else:
            alpha = lam / (1.0 + lam)
            G = np.eye(sub.shape[1]) + alpha * 0.5 * (np.eye(sub.shape[1]) - sub.T @ sub)
            try:
                Ginv = np.linalg.inv(G)
            except np.linalg.LinAlgError:
                Ginv, G = np.eye(sub.shape[1]), np.eye(sub.shape[1])
            newU, T = sub @ G, Ginv
        if rows is not None:
            newU = _embed_rows(newU, rows, U.shape[0])
        for s in group:
            new_blocks[s] = newU
            cores[s] = mode_product(cores[s], c, T)
    factors = list(model.factors)
    factors[c] = new_blocks
    return replace(model, factors=factors, cores=cores)


def _core_components(model: BlockFactorModel) -> list[list[int]]:
    """Segments linked by non-orthogonal Kronecker column spaces."""
    S = model.S
    parent = list(range(S))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a in range(S):
        for b in range(a + 1, S):
            coupled = True
            for m in range(model.order):
                Ua, Ub = model.factors[m][a], model.factors[m][b]
                cross = Ua.T @ Ub
                scale = max(np.linalg.norm(Ua), np.linalg.norm(Ub), 1.0) ** 2
                if np.max(np.abs(cross), initial=0.0) <= 1e-14 * scale:
                    coupled = False
                    break
            if coupled:
                parent[find(a)] = find(b)
    comps: dict[int, list[int]] = {}
    for s in range(S):
        comps.setdefault(find(s), []).append(s)
    return list(comps.values())


def solve_core(D: np.ndarray, model: BlockFactorModel, rcond: float | None = None) -> list[np.ndarray]:
    """Least-squares segment cores for fixed mode matrices.

    Only the super-diagonal blocks are unknowns: the columns of
    ``U_Cx kron ... kron U_0x`` that multiply structurally zero core entries
    are dropped before the pseudo-inverse.  Segments whose Kronecker column
    spaces are orthogonal (e.g. disjoint measurement supports) are solved
    independently with ``Z_s = D x_0 U_{0,s}^+ ... x_C U_{C,s}^+``.
    """
    D = np.asarray(D, dtype=float)
    if model.S == 0:
        raise ValueError("empty nonzero pattern: the model has no segments")
    cores: list[np.ndarray | None] = [None] * model.S
    d = vec(D)
    for comp in _core_components(model):
        if len(comp) == 1:
            s = comp[0]
            inv = [pinv(U, rcond) for U in model.segment_factors(s)]
            cores[s] = multi_mode_product(D, inv)
            continue
        shapes = [model.block_ranks(s) for s in comp]
        sizes = [int(np.prod(sh)) for sh in shapes]
        if D.size * sum(sizes) <= DENSE_CORE_LIMIT:
            cols = []
            for s in comp:
                K = np.ones((1, 1))
                for m in range(model.order):
                    K = kronecker(model.factors[m][s], K)
                cols.append(K)
            z = pinv(np.hstack(cols), rcond) @ d
        else:
            G = np.zeros((sum(sizes), sum(sizes)))
            b = np.zeros(sum(sizes))
            offs = np.cumsum([0] + sizes)
            for i, s in enumerate(comp):
                b[offs[i]:offs[i + 1]] = vec(multi_mode_product(D, model.segment_factors(s), transpose=True))
                for j, t in enumerate(comp):
                    blk = np.ones((1, 1))
                    for m in range(model.order):
                        blk = kronecker(model.factors[m][s].T @ model.factors[m][t], blk)
                    G[offs[i]:offs[i + 1], offs[j]:offs[j + 1]] = blk
            z = pinv(G, rcond) @ b
        start = 0
        for s, sh, n in zip(comp, shapes, sizes):
            cores[s] = unvec(z[start:start + n], sh)
            start += n
    return cores


def _penalty(model: BlockFactorModel) -> float:
    total = 0.0
    lam = model.lambdas if model.lambdas is not None else np.ones((model.order, model.S))
    for m in range(model.order):
        for s in range(model.S):
            U = model.factors[m][s]
            total += lam[m, s] * float(np.sum((U.T @ U - np.eye(U.shape[1])) ** 2))
    return total


def _als(D: np.ndarray, model: BlockFactorModel, cfg: BlockSolverConfig) -> BlockFactorModel:
    norm2 = float(np.sum(D**2))
    losses = [block_loss(D, model)]
    flags = []
    lam = cfg.penalty
    for sweep in range(cfg.max_iters):
        for c in range(model.order):
            X, info = _mode_update(c, D, model, cfg.rcond)
            if info["singular"] or info["rank_deficient"]:
                flags.append({"sweep": sweep, "mode": c, **info})
            if info["singular"]:
                continue
            model = replace(model, factors=[
                _split_columns(model, c, X) if m == c else model.factors[m] for m in range(model.order)
            ])
            model = _orthonormalize(model, c, model.factors[c], cfg.orthonormalization, lam)
            model = replace(model, cores=solve_core(D, model, cfg.rcond))
        losses.append(block_loss(D, model))
        if losses[-2] - losses[-1] <= cfg.eps * norm2:
            break
    report = {
        "losses": losses,
        "sweeps": len(losses) - 1,
        "block_ranks": {sid: list(model.block_ranks(s)) for s, sid in enumerate(model.segment_ids)},
        "orthonormality": {
            sid: [orthonormality_residual(model.factors[m][s] if m else model.factors[0][s][model.supports[s]])
                  for m in range(model.order)]
            for s, sid in enumerate(model.segment_ids)
        },
        "penalty": _penalty(model),
        "singularities": flags,
    }
    return replace(model, losses=losses, report=report)


def block_mmode_svd(
    D: np.ndarray,
    spec: HierarchySpec,
    cfg: BlockSolverConfig | None = None,
) -> BlockFactorModel:
    """M-mode Block SVD by alternating least squares.

    Initialised with per-segment M-mode SVDs; each sweep cycles through the
    modes, solving for ``U_cx`` with everything else fixed, orthonormalizing
    its blocks, and re-solving the segment cores.  Stops when the squared
    error drops by no more than ``eps * ||D||^2`` in a sweep or after
    ``max_iters`` sweeps.
    """
    cfg = cfg or BlockSolverConfig()
    D = np.asarray(D, dtype=float)
    if not np.all(np.isfinite(D)):
        raise ValueError("data tensor has non-finite entries")
    model = initialize_block(D, spec, cfg)
    if cfg.max_iters == 0:
        loss = block_loss(D, model)
        return replace(model, losses=[loss], report={"losses": [loss], "sweeps": 0})
    return _als(D, model, cfg)


def factorize_independent_parts(
    D: np.ndarray,
    spec: HierarchySpec,
    ranks=None,
    refine: bool = True,
    eps: float = 1e-12,
    max_iters: int = 100,
) -> BlockFactorModel:
    """Per-part M-mode SVDs for a hierarchy whose segments do not overlap.

    Every factor is treated as compositional.  With ``refine`` each part is
    polished by HOOI, which is where the block solver converges for
    disjoint parts.
    """
    D = np.asarray(D, dtype=float)
    view = assemble_hierarchical(D, spec)
    ids = list(view.segments)
    rows_of = {sid: view.filters[sid].row_support(D.shape[0]) for sid in ids}
    seen = np.zeros(D.shape[0], dtype=int)
    for sid in ids:
        seen[rows_of[sid]] += 1
    if np.any(seen > 1):
        raise ValueError("segments overlap; run expand_overlaps first")
    M = D.ndim
    factors: list[list[np.ndarray]] = [[] for _ in range(M)]
    sigmas: list[list[np.ndarray]] = [[] for _ in range(M)]
    cores, supports = [], []
    for sid in ids:
        rows = rows_of[sid]
        Xs = view.segments[sid][rows]
        r = _segment_ranks(ranks, sid, M)
        if r is None:
            r = tuple(max(numerical_rank(thin_svd(matrixize(Xs, m))[1]), 1) for m in range(M))
        model = mmode_svd(Xs, RankSpec(ranks=r))
        if refine:
            model = hooi_refine(Xs, model, eps=eps, max_iters=max_iters)
        factors[0].append(_embed_rows(model.factors[0], rows, D.shape[0]))
        for m in range(M):
            if m:
                factors[m].append(model.factors[m])
            sigmas[m].append(model.sigmas[m])
        cores.append(model.core)
        supports.append(rows)
    out = BlockFactorModel(ids, cores, factors, (False,) * M, supports, sigmas, spec,
                           np.ones((M, len(ids))))
    loss = block_loss(D, out)
    return replace(out, losses=[loss])


def factorize_overlapping_shared_rank(
    D: np.ndarray,
    S: int,
    ranks: Sequence[int] | Sequence[Sequence[int]],
    eps: float = 1e-12,
    max_iters: int = 200,
) -> BlockFactorModel:
    """``S`` fully overlapping terms of a common multilinear rank (block term model).

    Initialisation splits the leading singular vectors of every mode into
    ``S`` consecutive groups when there are enough of them, and otherwise
    deflates: each term is the truncated M-mode SVD of what the previous
    terms left unexplained.
    """
    D = np.asarray(D, dtype=float)
    M = D.ndim
    ranks = list(ranks)
    if ranks and isinstance(ranks[0], (list, tuple, np.ndarray)):
        if any(tuple(r) != tuple(ranks[0]) for r in ranks) or len(ranks) != S:
            raise ValueError("all overlapping parts must share one rank specification")
        ranks = list(ranks[0])
    if len(ranks) != M:
        raise ValueError(f"{len(ranks)} ranks given for an order-{M} tensor")
    if S < 1:
        raise ValueError("S must be positive")
    for m, r in enumerate(ranks):
        if r > D.shape[m]:
            raise ValueError(f"rank {r} exceeds extent {D.shape[m]} of mode {m}")

    factors: list[list[np.ndarray]] = [[] for _ in range(M)]
    if all(S * r <= n for r, n in zip(ranks, D.shape)):
        for m in range(M):
            U, _ = leading_left_vectors(matrixize(D, m), S * ranks[m])
            factors[m] = [U[:, s * ranks[m]:(s + 1) * ranks[m]] for s in range(S)]
    else:
        resid = D.copy()
        for s in range(S):
            part = mmode_svd(resid, RankSpec(ranks=ranks))
            for m in range(M):
                factors[m].append(part.factors[m])
            resid = resid - multi_mode_product(part.core, part.factors)
    ids = [f"part{s}" for s in range(S)]
    supports = [np.arange(D.shape[0])] * S
    model = BlockFactorModel(ids, [np.zeros(ranks)] * S, factors, (False,) * M, supports,
                             None, None, np.ones((M, S)))
    model = replace(model, cores=solve_core(D, model))
    cfg = BlockSolverConfig(eps=eps, max_iters=max_iters)
    if max_iters == 0:
        return replace(model, losses=[block_loss(D, model)])
    return _als(D, model, cfg)
