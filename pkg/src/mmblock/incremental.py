"""Incremental M-mode Block SVD: bottom-up merging of child factorizations.

A child is summarised by its per-mode left singular vectors and singular
values together with an extended core ``T_k``.  Merging ``K`` children that
tile a parent along one *split* mode needs no access to the raw data:

* for every other mode ``c`` the parent basis is the left singular matrix of
  ``[U_{c,1} S_{c,1} | ... | U_{c,K} S_{c,K}]``, computed by a thin QR
  followed by an SVD of the small triangular factor;
* each child core is carried into that basis by
  ``T_k x_c (S_{c,w} V_{c,k}^T S_{c,k}^{-1})`` and the results are stacked
  along the split mode.

The measurement mode (mode 0) of a segment is normally left uncompressed, so
a segment's extended core has one row per pixel.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from .block import BlockFactorModel, numerical_rank
from .hierarchy import HierarchySpec, Node, union_support
from .tensor import matrixize, mode_product, multi_mode_product, thin_svd

__all__ = [
    "ChildFactorization",
    "MergedMode",
    "CostModel",
    "leaf_factorize",
    "merge_children_mode",
    "parent_core",
    "merge_children",
    "append_child",
    "incremental_block_svd",
    "apply_general_filters",
    "predict_cost",
    "enumerate_subdivision",
    "subdivision_factorize",
]

RANK_TOL = 1e-10


@dataclass
class ChildFactorization:
    """Factorization of one tile of a tensor.

    ``index[m]`` lists the global indices the tile covers in mode ``m``.
    ``factors[m]`` and ``sigmas[m]`` are ``None`` for an uncompressed mode
    (by default the measurement mode), in which case ``core`` keeps that
    mode at full extent.  ``truncation`` accumulates the squared singular
    values discarded while building this factorization.
    """

    node_id: str
    index: tuple[np.ndarray, ...]
    factors: list[np.ndarray | None]
    sigmas: list[np.ndarray | None]
    core: np.ndarray
    truncation: float = 0.0
    log: list[str] = field(default_factory=list)

    @property
    def order(self) -> int:
        return len(self.factors)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(ix.size for ix in self.index)

    @property
    def ranks(self) -> tuple[int, ...]:
        return tuple(self.core.shape)

    def compressed(self, m: int) -> bool:
        return self.factors[m] is not None

    @property
    def normalized_core(self) -> np.ndarray:
        """``T_k x_c S_{c,k}^{-1}`` over every compressed mode."""
        out = self.core
        for m, s in enumerate(self.sigmas):
            if s is not None:
                out = mode_product(out, m, np.diag(1.0 / s))
        return out

    def reconstruct(self) -> np.ndarray:
        return multi_mode_product(self.core, self.factors)


class MergedMode(NamedTuple):
    """Parent basis for a non-split mode and the per-child right-vector blocks."""

    U: np.ndarray
    sigma: np.ndarray
    V_blocks: list[np.ndarray]
    truncation: float


def _truncate(s: np.ndarray, cap: int | None, tol: float = RANK_TOL) -> int:
    r = numerical_rank(s, tol)
    return r if cap is None else min(r, int(cap))


def _rank_cap(ranks, m: int) -> int | None:
    if ranks is None:
        return None
    return ranks[m]


def leaf_factorize(
    D_s: np.ndarray,
    ranks: Sequence[int | None] | None = None,
    compress_measurement: bool = False,
    index: Sequence[np.ndarray] | None = None,
    node_id: str = "leaf",
) -> ChildFactorization:
    """Per-mode thin SVDs of a leaf tile.

    Singular values at or below ``1e-10`` of the largest are dropped, so every
    retained ``S_{c,k}`` is invertible; ``ranks`` can lower the retained rank
    further (``None`` entries mean numerical rank).
    """
    D_s = np.asarray(D_s, dtype=float)
    if ranks is not None and len(ranks) != D_s.ndim:
        raise ValueError(f"{len(ranks)} ranks given for an order-{D_s.ndim} tile")
    index = tuple(np.arange(n) for n in D_s.shape) if index is None else tuple(np.asarray(i) for i in index)
    if not np.any(D_s):
        raise ValueError(f"tile {node_id!r} is zero: no rank to retain")
    factors: list[np.ndarray | None] = []
    sigmas: list[np.ndarray | None] = []
    trunc = 0.0
    for m in range(D_s.ndim):
        cap = _rank_cap(ranks, m)
        if cap is not None and cap > D_s.shape[m]:
            raise ValueError(f"rank {cap} exceeds extent {D_s.shape[m]} of mode {m}")
        if m == 0 and not compress_measurement:
            factors.append(None)
            sigmas.append(None)
            continue
        U, s, _ = thin_svd(matrixize(D_s, m))
        r = _truncate(s, cap)
        trunc += float(np.sum(s[r:] ** 2))
        factors.append(U[:, :r])
        sigmas.append(s[:r])
    core = multi_mode_product(D_s, factors, transpose=True)
    return ChildFactorization(node_id, index, factors, sigmas, core, trunc)


def merge_children_mode(
    c: int,
    children: Sequence[ChildFactorization],
    rank: int | None = None,
    method: str = "qr",
) -> MergedMode:
    """Left singular basis of ``[U_{c,1} S_{c,1} | ... | U_{c,K} S_{c,K}]``.

    ``method="qr"`` factors the concatenation by a thin QR and takes the SVD
    of the triangular factor; ``method="svd"`` takes the SVD directly (kept
    for cross-checking).  ``V_blocks[k]`` holds the rows of ``V`` belonging to
    child ``k``.
    """
    if not children:
        raise ValueError("at least one child is required")
    if any(ch.factors[c] is None for ch in children):
        raise ValueError(f"mode {c} is uncompressed in some child")
    rows = {ch.factors[c].shape[0] for ch in children}
    if len(rows) != 1:
        raise ValueError(f"inconsistent mode-{c} extents {sorted(rows)}")
    A = np.hstack([ch.factors[c] * ch.sigmas[c] for ch in children])
    if method == "qr":
        Q, R = np.linalg.qr(A)
        Ur, s, V = thin_svd(R)
        U = Q @ Ur
        # restore the deterministic sign convention lost in the product
        idx = np.argmax(np.abs(U), axis=0)
        signs = np.sign(U[idx, np.arange(U.shape[1])])
        signs[signs == 0] = 1.0
        U, V = U * signs, V * signs
    elif method == "svd":
        U, s, V = thin_svd(A)
    else:
        raise ValueError(f"unknown merge method {method!r}")
    r = _truncate(s, rank)
    trunc = float(np.sum(s[r:] ** 2))
    U, s, V = U[:, :r], s[:r], V[:, :r]
    blocks, start = [], 0
    for ch in children:
        w = ch.factors[c].shape[1]
        blocks.append(V[start:start + w])
        start += w
    return MergedMode(U, s, blocks, trunc)


def _check_tiling(children: Sequence[ChildFactorization], split: int) -> None:
    if not children:
        raise ValueError("at least one child is required")
    order = children[0].order
    for ch in children:
        if ch.order != order:
            raise ValueError("children have different orders")
        for m in range(order):
            if m != split and not np.array_equal(ch.index[m], children[0].index[m]):
                raise ValueError(f"children disagree on the extent of non-split mode {m}")
            if ch.compressed(m) != children[0].compressed(m):
                raise ValueError(f"children disagree on whether mode {m} is compressed")
    allidx = np.concatenate([ch.index[split] for ch in children])
    if np.unique(allidx).size != allidx.size:
        raise ValueError(f"children overlap along split mode {split}")


def parent_core(
    children: Sequence[ChildFactorization],
    merged: dict[int, MergedMode],
    split: int = 0,
) -> np.ndarray:
    """Stack the children's cores, carried into the merged bases, along ``split``.

    Child ``k`` contributes ``T_k x_c (S_{c,w} V_{c,k}^T S_{c,k}^{-1})`` for
    every compressed non-split mode ``c``.  Along an uncompressed split mode
    the contributions are concatenated; along a compressed one they are placed
    block-diagonally (the parent basis for that mode is then the block
    diagonal of the children's bases).
    """
    _check_tiling(children, split)
    order = children[0].order
    for c in range(order):
        if c != split and children[0].compressed(c) and c not in merged:
            raise ValueError(f"missing merged factors for mode {c}")
    parts = []
    for k, ch in enumerate(children):
        T = ch.core
        for c, mm in merged.items():
            if c == split:
                continue
            G = (mm.sigma[:, None] * mm.V_blocks[k].T) / ch.sigmas[c][None, :]
            T = mode_product(T, c, G)
        parts.append(T)
    if not children[0].compressed(split):
        return np.concatenate(parts, axis=split)
    shape = list(parts[0].shape)
    shape[split] = sum(p.shape[split] for p in parts)
    out = np.zeros(shape)
    start = 0
    for p in parts:
        sl = [slice(None)] * order
        sl[split] = slice(start, start + p.shape[split])
        out[tuple(sl)] = p
        start += p.shape[split]
    return out


def merge_children(
    children: Sequence[ChildFactorization],
    split: int = 0,
    ranks: Sequence[int | None] | None = None,
    method: str = "qr",
    node_id: str = "parent",
) -> ChildFactorization:
    """Merge children tiling a parent along mode ``split`` into a parent factorization."""
    _check_tiling(children, split)
    order = children[0].order
    merged = {}
    trunc = sum(ch.truncation for ch in children)
    for c in range(order):
        if c != split and children[0].compressed(c):
            merged[c] = merge_children_mode(c, children, _rank_cap(ranks, c), method)
            trunc += merged[c].truncation
    T = parent_core(children, merged, split)
    factors: list[np.ndarray | None] = [None] * order
    sigmas: list[np.ndarray | None] = [None] * order
    for c, mm in merged.items():
        factors[c], sigmas[c] = mm.U, mm.sigma
    if children[0].compressed(split):
        # parent basis along the split mode: block diagonal of the child bases,
        # recompressed by the SVD of the stacked core's unfolding
        rows = sum(ch.factors[split].shape[0] for ch in children)
        B = np.zeros((rows, T.shape[split]))
        r0 = c0 = 0
        for ch in children:
            Uk = ch.factors[split]
            B[r0:r0 + Uk.shape[0], c0:c0 + Uk.shape[1]] = Uk
            r0 += Uk.shape[0]
            c0 += Uk.shape[1]
        Ut, s, _ = thin_svd(matrixize(T, split))
        r = _truncate(s, _rank_cap(ranks, split))
        trunc += float(np.sum(s[r:] ** 2))
        Ut = Ut[:, :r]
        T = mode_product(T, split, Ut.T)
        factors[split], sigmas[split] = B @ Ut, s[:r]
    index = list(children[0].index)
    index[split] = np.concatenate([ch.index[split] for ch in children])
    log = [f"{node_id}: merged {len(children)} children along mode {split}, ranks {T.shape}"]
    return ChildFactorization(node_id, tuple(index), factors, sigmas, T, trunc, log)


def append_child(
    parent: ChildFactorization,
    D_new: np.ndarray,
    split: int = 0,
    ranks: Sequence[int | None] | None = None,
    index: np.ndarray | None = None,
) -> ChildFactorization:
    """Fold newly arrived data into an existing factorization.

    ``D_new`` extends ``parent`` along mode ``split``; it is factorized as a
    new-data leaf and merged as one more child, so the old data is never
    revisited.
    """
    D_new = np.asarray(D_new, dtype=float)
    expected = tuple(n for m, n in enumerate(parent.shape) if m != split)
    got = tuple(n for m, n in enumerate(D_new.shape) if m != split)
    if D_new.ndim != parent.order or got != expected:
        raise ValueError(f"new data of shape {D_new.shape} does not extend {parent.shape} along mode {split}")
    if index is None:
        top = int(parent.index[split].max()) + 1
        index = np.arange(top, top + D_new.shape[split])
    idx = list(parent.index)
    idx[split] = np.asarray(index)
    leaf = leaf_factorize(D_new, ranks, compress_measurement=parent.compressed(0), index=idx,
                          node_id=f"{parent.node_id}+new")
    return merge_children([parent, leaf], split, ranks, node_id=parent.node_id)


def _map(fn: Callable, items: list, workers: int | None):
    if workers and workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def incremental_block_svd(
    D: np.ndarray,
    spec: HierarchySpec,
    ranks: Sequence[int | None] | None = None,
    workers: int | None = None,
    method: str = "qr",
) -> BlockFactorModel:
    """Bottom-up factorization of every parent-whole in ``spec``.

    Leaves are factorized directly.  Each internal node merges its children
    along the measurement mode, plus a new-data child for any of its rows
    not covered by a child.  Siblings are processed concurrently when
    ``workers > 1``.

    The returned model's segments are the leaves (and non-empty new-data
    pieces); ``wholes`` maps every internal node id to its merged
    :class:`ChildFactorization`.
    """
    D = np.asarray(D, dtype=float)
    if D.shape[0] != spec.size:
        raise ValueError(f"measurement extent {D.shape[0]} differs from hierarchy size {spec.size}")
    for n in spec.nodes:
        kids = spec.children(n.id)
        if kids and sum(len(k.support) for k in kids) != len(union_support(kids)):
            raise ValueError(f"children of {n.id!r} overlap; run expand_overlaps first")
    rest = tuple(np.arange(k) for k in D.shape[1:])
    M = D.ndim

    def leaf(task: tuple[str, tuple[int, ...]]) -> ChildFactorization:
        nid, rows = task
        rows = np.asarray(rows)
        return leaf_factorize(D[rows], ranks, index=(rows,) + rest, node_id=nid)

    done: dict[str, ChildFactorization] = {}
    extra: dict[str, ChildFactorization] = {}
    skipped: list[str] = []
    by_depth: dict[int, list[Node]] = {}
    for n in spec.nodes:
        by_depth.setdefault(spec.depth(n.id), []).append(n)

    for depth in sorted(by_depth, reverse=True):
        nodes = by_depth[depth]
        leaves = [n for n in nodes if not spec.children(n.id)]
        for n, f in zip(leaves, _map(leaf, [(n.id, n.support) for n in leaves], workers)):
            done[n.id] = f
        internal = [n for n in nodes if spec.children(n.id)]
        new_tasks = []
        for n in internal:
            missing = sorted(set(n.support) - set(union_support(spec.children(n.id))))
            if missing and np.any(D[missing]):
                new_tasks.append((f"{n.id}/new", tuple(missing)))
            elif missing:
                skipped.append(f"{n.id}/new")
        for (nid, _), f in zip(new_tasks, _map(leaf, new_tasks, workers)):
            extra[nid] = f

        def merge(n: Node) -> ChildFactorization:
            kids = [done[k.id] for k in spec.children(n.id)]
            if f"{n.id}/new" in extra:
                kids.append(extra[f"{n.id}/new"])
            kids.sort(key=lambda ch: int(ch.index[0][0]))
            return merge_children(kids, 0, ranks, method, node_id=n.id)

        for n, f in zip(internal, _map(merge, internal, workers)):
            done[n.id] = f

    seg_ids = [n.id for n in spec.leaves()] + sorted(extra)
    pieces = [done[i] if i in done else extra[i] for i in seg_ids]
    factors: list[list[np.ndarray]] = [[] for _ in range(M)]
    sigmas: list[list[np.ndarray]] = [[] for _ in range(M)]
    cores, supports = [], []
    for p in pieces:
        rows = p.index[0]
        U0, s0, _ = thin_svd(matrixize(p.core, 0))
        r = max(numerical_rank(s0), 1)
        full = np.zeros((D.shape[0], r))
        full[rows] = U0[:, :r]
        factors[0].append(full)
        sigmas[0].append(s0[:r])
        for m in range(1, M):
            factors[m].append(p.factors[m])
            sigmas[m].append(p.sigmas[m])
        cores.append(mode_product(p.core, 0, U0[:, :r].T))
        supports.append(np.asarray(rows))
    wholes = {nid: f for nid, f in done.items() if spec.children(nid)}
    report = {
        "truncation": {nid: f.truncation for nid, f in done.items()},
        "skipped_empty_new_data": skipped,
        "log": [line for f in wholes.values() for line in f.log],
    }
    return BlockFactorModel(seg_ids, cores, factors, (False,) * M, supports, sigmas, spec,
                            np.ones((M, len(seg_ids))), report=report, wholes=wholes)


def whole_reconstruction(whole: ChildFactorization, size: int) -> np.ndarray:
    """Place a whole's reconstruction in a zero tensor of measurement extent ``size``."""
    R = whole.reconstruct()
    out = np.zeros((size,) + R.shape[1:])
    out[whole.index[0]] = R
    return out


def apply_general_filters(model: BlockFactorModel, filters: Sequence[np.ndarray | None]) -> BlockFactorModel:
    """Left-multiply each segment's measurement factor by a general filter ``F_s``.

    A model fitted to block-segmented data becomes a model of the
    ``F_s``-filtered segments.  ``None`` leaves a segment unchanged.
    """
    if len(filters) != model.S:
        raise ValueError(f"{len(filters)} filters for {model.S} segments")
    I0 = model.shape[0]
    new0, supports = [], []
    for s, F in enumerate(filters):
        U = model.factors[0][s]
        if F is None:
            new0.append(U)
            supports.append(model.supports[s])
            continue
        F = np.asarray(F, dtype=float)
        if F.shape != (I0, I0):
            raise ValueError(f"filter {s} has shape {F.shape}, expected {(I0, I0)}")
        FU = F @ U
        new0.append(FU)
        supports.append(np.flatnonzero(np.any(FU != 0, axis=1)))
    factors = [new0] + [list(f) for f in model.factors[1:]]
    return BlockFactorModel(model.segment_ids, list(model.cores), factors, model.shared, supports,
                            model.sigmas, model.hierarchy, model.lambdas, model.mean,
                            list(model.losses), dict(model.report), dict(model.wholes))


# -- cost model -------------------------------------------------------------

@dataclass(frozen=True)
class CostModel:
    """Predicted work for a full recursive ``2**M``-way subdivision.

    ``S`` is the segment count ``N log_K N + 1``; ``serial`` is
    ``T N log_K N`` and ``distributed`` is ``T log_K N``.  For a
    non-conforming ``N`` (not a power of ``K``) the logarithm is rounded up
    and the figures are upper bounds.
    """

    N: int
    M: int
    K: int
    T: float
    levels: int
    S: int
    serial: float
    distributed: float
    conforming: bool


def _int_log(N: int, K: int) -> tuple[int, bool]:
    L, n = 0, 1
    while n < N:
        n *= K
        L += 1
    return L, n == N


def predict_cost(N: int, M: int, T: float = 1.0) -> CostModel:
    if N < 1 or M < 1:
        raise ValueError("N and M must be positive")
    K = 2**M
    L, exact = _int_log(N, K)
    return CostModel(N, M, K, float(T), L + 1, N * L + 1, T * N * L, T * L, exact)


def enumerate_subdivision(shape: Sequence[int]) -> list[tuple[tuple[int, int], ...]]:
    """Boxes of a full recursive halving of every mode down to single entries.

    Each box is a tuple of per-mode ``(start, stop)`` ranges; the root comes
    first.  A mode of extent 1 is no longer split.
    """
    out = []
    stack = [tuple((0, int(n)) for n in shape)]
    while stack:
        box = stack.pop()
        out.append(box)
        halves = []
        for lo, hi in box:
            if hi - lo > 1:
                mid = lo + (hi - lo) // 2
                halves.append([(lo, mid), (mid, hi)])
            else:
                halves.append([(lo, hi)])
        if all(len(h) == 1 for h in halves):
            continue
        stack.extend(reversed(list(product(*halves))))
    return out


def subdivision_factorize(
    D: np.ndarray,
    workers: int | None = None,
    leaf_size: int = 1,
) -> tuple[ChildFactorization, int]:
    """Incremental factorization of ``D`` over a full recursive subdivision.

    Every box is halved in each mode longer than ``leaf_size``; the ``2**M``
    children of a box are merged by successive single-mode merges.  All
    modes are compressed.  Returns the root factorization and the number of
    segments (tree nodes) processed.
    """
    D = np.asarray(D, dtype=float)

    def split(box):
        halves, modes = [], []
        for m, (lo, hi) in enumerate(box):
            if hi - lo > leaf_size:
                mid = lo + (hi - lo) // 2
                halves.append([(lo, mid), (mid, hi)])
                modes.append(m)
            else:
                halves.append([(lo, hi)])
        return halves, modes

    root = tuple((0, n) for n in D.shape)
    levels: list[list[tuple]] = [[root]]
    while True:
        nxt = []
        for box in levels[-1]:
            halves, modes = split(box)
            if modes:
                nxt.extend(product(*halves))
        if not nxt:
            break
        levels.append(nxt)
    count = sum(len(lv) for lv in levels)

    def leaf(box) -> ChildFactorization:
        sl = tuple(slice(lo, hi) for lo, hi in box)
        return leaf_factorize(D[sl], compress_measurement=True,
                              index=tuple(np.arange(lo, hi) for lo, hi in box), node_id=str(box))

    def merge(box) -> ChildFactorization:
        halves, modes = split(box)
        group = {tuple(b): done[b] for b in product(*halves)}
        for m in modes:
            nxt: dict[tuple, ChildFactorization] = {}
            for key in sorted({tuple(k[:m]) + (None,) + tuple(k[m + 1:]) for k in group}):
                pair = [group[key[:m] + (h,) + key[m + 1:]] for h in halves[m]]
                nxt[key] = merge_children(pair, m, node_id=str(box))
            group = nxt
        (only,) = group.values()
        return only

    done: dict[tuple, ChildFactorization] = {}
    for depth in range(len(levels) - 1, -1, -1):
        boxes = levels[depth]
        leaves = [b for b in boxes if not split(b)[1]]
        inner = [b for b in boxes if split(b)[1]]
        for b, f in zip(leaves, _map(leaf, leaves, workers)):
            done[b] = f
        for b, f in zip(inner, _map(merge, inner, workers)):
            done[b] = f
    return done[root], count


def bench_rows(
    M: int,
    sizes: Iterable[int],
    workers: int = 4,
    seed: int = 0,
) -> list[dict]:
    """Predicted vs enumerated segment counts and serial/parallel wall times."""
    rng = np.random.default_rng(seed)
    rows = []
    for N in sizes:
        cost = predict_cost(N, M)
        row = {"N": N, "M": M, "K": cost.K, "S_predicted": cost.S, "conforming": cost.conforming}
        if not cost.conforming:
            row.update(S_measured=None, wall_time_serial=None, wall_time_parallel=None)
            rows.append(row)
            continue
        side = round(N ** (1.0 / M))
        D = rng.standard_normal((side,) * M)
        t0 = time.perf_counter()
        _, count = subdivision_factorize(D)
        t1 = time.perf_counter()
        subdivision_factorize(D, workers=workers)
        t2 = time.perf_counter()
        row.update(S_measured=count, wall_time_serial=t1 - t0, wall_time_parallel=t2 - t1)
        rows.append(row)
    return rows


def cpu_count() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
