"""Segment filter banks and whole/part hierarchies over the measurement mode.

A segment is extracted with a filter ``H_s = F_s S_s``: ``S_s`` keeps the
measurement entries in the segment's support (an identity with limited
scope) and the optional general filter ``F_s`` is applied afterwards.  A set
of filters is a valid bank when the filters sum to the identity, so the
segments of a data tensor add back up to the tensor.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensor import mode_product

__all__ = [
    "SegmentFilter",
    "Node",
    "HierarchySpec",
    "HierarchicalView",
    "BankReport",
    "InvalidBankError",
    "segment",
    "validate_bank",
    "assemble_hierarchical",
    "expand_overlaps",
    "pyramid_filters",
    "subdivision",
    "BANK_TOL",
]

BANK_TOL = 1e-12


class InvalidBankError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SegmentFilter:
    """Segmentation of mode 0 to ``support``, optionally followed by ``F``."""

    support: tuple[int, ...]
    F: np.ndarray | None = None

    def __post_init__(self):
        support = tuple(sorted({int(i) for i in self.support}))
        if not support:
            raise ValueError("segment support must be non-empty")
        if support[0] < 0:
            raise ValueError("segment support has negative indices")
        object.__setattr__(self, "support", support)
        if self.F is not None:
            F = np.asarray(self.F, dtype=float)
            if F.ndim != 2 or F.shape[0] != F.shape[1]:
                raise ValueError("general filter must be a square matrix")
            object.__setattr__(self, "F", F)

    @classmethod
    def block(cls, start: int, length: int) -> "SegmentFilter":
        return cls(tuple(range(start, start + length)))

    @classmethod
    def identity(cls, n: int) -> "SegmentFilter":
        return cls(tuple(range(n)))

    @property
    def kind(self) -> str:
        return "block-identity" if self.F is None else "general"

    def mask(self, n: int) -> np.ndarray:
        if self.support[-1] >= n:
            raise ValueError(f"support index {self.support[-1]} outside a mode of extent {n}")
        m = np.zeros(n, dtype=bool)
        m[list(self.support)] = True
        return m

    def matrix(self, n: int) -> np.ndarray:
        """The ``n x n`` filter matrix ``H = F S``."""
        S = np.diag(self.mask(n).astype(float))
        if self.F is None:
            return S
        if self.F.shape[0] != n:
            raise ValueError(f"general filter of size {self.F.shape[0]} on a mode of extent {n}")
        return self.F @ S

    def row_support(self, n: int) -> np.ndarray:
        """Indices of rows of ``H`` that can be nonzero."""
        if self.F is None:
            return np.asarray(self.support)
        return np.flatnonzero(np.any(self.matrix(n) != 0.0, axis=1))


def segment(D: np.ndarray, f: SegmentFilter) -> np.ndarray:
    """``D_s = D x_0 H_s``."""
    D = np.asarray(D, dtype=float)
    n = D.shape[0]
    mask = f.mask(n)
    out = D * mask.reshape((-1,) + (1,) * (D.ndim - 1))
    if f.F is not None:
        if f.F.shape[1] != n:
            raise ValueError(f"general filter of size {f.F.shape[1]} on a mode of extent {n}")
        out = mode_product(out, 0, f.F)
    return out


@dataclass(frozen=True)
class BankReport:
    deviation: float
    passed: bool
    tol: float = BANK_TOL


def validate_bank(filters: Sequence[SegmentFilter], I0: int, tol: float = BANK_TOL) -> BankReport:
    """Check ``sum_s H_s = I``; reports the largest absolute deviation."""
    total = np.zeros((I0, I0))
    for f in filters:
        total += f.matrix(I0)
    dev = float(np.max(np.abs(total - np.eye(I0)), initial=0.0))
    return BankReport(dev, dev <= tol, tol)


@dataclass(frozen=True)
class Node:
    """A hierarchy node.

    ``filter`` is ``"identity"`` (plain segmentation), ``"pyramid:L"`` (band
    of an L-level pyramid chosen by the node depth, coarsest at the root) or
    ``"none"`` for a purely structural node that carries no segment.
    """

    id: str
    parent: str | None
    support: tuple[int, ...]
    filter: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "support", tuple(sorted({int(i) for i in self.support})))
        if not self.support:
            raise ValueError(f"node {self.id!r} has an empty support")
        if not (self.filter in ("identity", "none") or self.filter.startswith("pyramid:")):
            raise ValueError(f"node {self.id!r}: unknown filter {self.filter!r}")


@dataclass
class HierarchySpec:
    """Tree of segments over a measurement mode of extent ``size``.

    ``compositional`` maps a causal factor (1-based mode index) to
    ``"full"`` (one representation block per segment) or ``"shared"`` (one
    block serves every segment).  Missing factors are fully compositional.
    ``groups`` records wholes that were replaced by disjoint atoms in
    :func:`expand_overlaps` (group id -> atom ids).
    """

    size: int
    nodes: list[Node]
    compositional: dict[int, str] = field(default_factory=dict)
    groups: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        self.compositional = {int(k): v for k, v in self.compositional.items()}
        for c, v in self.compositional.items():
            if c < 1 or v not in ("full", "shared"):
                raise ValueError(f"bad compositional entry {c}: {v!r}")
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate node ids")
        self._by_id = {n.id: n for n in self.nodes}
        roots = [n for n in self.nodes if n.parent is None]
        if len(roots) != 1:
            raise ValueError(f"hierarchy needs exactly one root, found {len(roots)}")
        for n in self.nodes:
            if n.parent is not None and n.parent not in self._by_id:
                raise ValueError(f"node {n.id!r} has unknown parent {n.parent!r}")
            if n.support[-1] >= self.size:
                raise ValueError(f"node {n.id!r} support exceeds measurement size {self.size}")
        # acyclic: every node must reach the root
        for n in self.nodes:
            seen, cur = set(), n
            while cur.parent is not None:
                if cur.id in seen:
                    raise ValueError(f"cycle through node {cur.id!r}")
                seen.add(cur.id)
                cur = self._by_id[cur.parent]
        for n in self.nodes:
            if n.parent is not None:
                parent = set(self._by_id[n.parent].support)
                if not set(n.support) <= parent:
                    raise ValueError(f"node {n.id!r} is not contained in its parent")

    # -- tree queries -------------------------------------------------------
    def node(self, node_id: str) -> Node:
        return self._by_id[node_id]

    @property
    def root(self) -> Node:
        return next(n for n in self.nodes if n.parent is None)

    def children(self, node_id: str) -> list[Node]:
        kids = [n for n in self.nodes if n.parent == node_id]
        return sorted(kids, key=lambda n: (n.support[0], len(n.support), n.id))

    def depth(self, node_id: str) -> int:
        d, cur = 0, self._by_id[node_id]
        while cur.parent is not None:
            d, cur = d + 1, self._by_id[cur.parent]
        return d

    def order(self) -> list[Node]:
        """Depth-first order, children by ascending support start."""
        out = []

        def visit(n: Node):
            out.append(n)
            for k in self.children(n.id):
                visit(k)

        visit(self.root)
        return out

    def leaves(self) -> list[Node]:
        return [n for n in self.order() if not self.children(n.id)]

    def is_shared(self, c: int) -> bool:
        return self.compositional.get(c, "full") == "shared"

    # -- filters ------------------------------------------------------------
    def node_filter(self, node: Node) -> SegmentFilter | None:
        if node.filter == "none":
            return None
        if node.filter == "identity":
            return SegmentFilter(node.support)
        levels = int(node.filter.split(":", 1)[1])
        d = self.depth(node.id)
        if d >= levels:
            raise ValueError(f"node {node.id!r} at depth {d} has no band in a {levels}-level pyramid")
        band = pyramid_filters(levels, self.size)[d]
        return SegmentFilter(node.support, band.F)

    def segments(self) -> list[tuple[str, SegmentFilter]]:
        """(node id, filter) for every node that carries a segment, in tree order."""
        out = []
        for n in self.order():
            f = self.node_filter(n)
            if f is not None:
                out.append((n.id, f))
        return out

    def bank_report(self) -> BankReport:
        return validate_bank([f for _, f in self.segments()], self.size)

    # -- serialisation ------------------------------------------------------
    def to_dict(self) -> dict:
        nodes = []
        for n in self.nodes:
            entry = {"id": n.id, "parent": n.parent, "filter": n.filter}
            lo, hi = n.support[0], n.support[-1]
            if hi - lo + 1 == len(n.support):
                entry["support"] = [lo, len(n.support)]
            else:
                entry["indices"] = list(n.support)
            nodes.append(entry)
        out = {
            "size": self.size,
            "nodes": nodes,
            "compositional": {str(k): v for k, v in sorted(self.compositional.items())},
        }
        if self.groups:
            out["groups"] = {k: list(v) for k, v in self.groups.items()}
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "HierarchySpec":
        nodes = []
        for entry in data["nodes"]:
            if "indices" in entry:
                support = entry["indices"]
            else:
                start, length = entry["support"]
                support = range(start, start + length)
            nodes.append(Node(str(entry["id"]), entry.get("parent"), tuple(support),
                              entry.get("filter", "identity")))
        return cls(
            size=int(data["size"]),
            nodes=nodes,
            compositional=data.get("compositional", {}),
            groups={k: tuple(v) for k, v in data.get("groups", {}).items()},
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "HierarchySpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class HierarchicalView:
    """Segment tensors of a data tensor, keyed by node id.

    The hierarchical data tensor itself is never materialised: the
    super-diagonal placement is implied by the segment list and the
    concatenated-identity selectors.
    """

    spec: HierarchySpec
    segments: dict[str, np.ndarray]
    filters: dict[str, SegmentFilter]

    @property
    def S(self) -> int:
        return len(self.segments)

    def total(self) -> np.ndarray:
        return sum(self.segments.values())

    def selector(self, c: int, extent: int) -> np.ndarray:
        """``[I I ... I]`` for a fully compositional factor, ``I`` for a shared one."""
        if self.spec.is_shared(c):
            return np.eye(extent)
        return np.hstack([np.eye(extent)] * self.S)


def assemble_hierarchical(D: np.ndarray, spec: HierarchySpec) -> HierarchicalView:
    D = np.asarray(D, dtype=float)
    if D.shape[0] != spec.size:
        raise ValueError(f"measurement extent {D.shape[0]} differs from hierarchy size {spec.size}")
    report = spec.bank_report()
    if not report.passed:
        raise InvalidBankError(f"filters do not sum to identity (deviation {report.deviation:.3g})")
    segs = spec.segments()
    return HierarchicalView(
        spec=spec,
        segments={sid: segment(D, f) for sid, f in segs},
        filters=dict(segs),
    )


def _atoms(supports: Sequence[tuple[int, ...]]) -> list[tuple[int, ...]]:
    """Cells of the intersection lattice: points grouped by which sets contain them."""
    signature: dict[int, list[int]] = {}
    for k, sup in enumerate(supports):
        for i in sup:
            signature.setdefault(i, []).append(k)
    cells: dict[tuple[int, ...], list[int]] = {}
    for i in sorted(signature):
        cells.setdefault(tuple(signature[i]), []).append(i)
    return sorted((tuple(v) for v in cells.values()), key=lambda s: (s[0], len(s)))


def expand_overlaps(spec: HierarchySpec) -> HierarchySpec:
    """Replace overlapping siblings by the disjoint cells of their overlaps.

    For every node whose children overlap, the children are replaced by the
    atoms of the children's intersection lattice (one for each distinct
    combination of covering siblings).  Each original child is kept as a
    group of atoms so its representation can still be assembled from them.
    Descendants of an overlapping child are dropped.
    """
    nodes = {n.id: n for n in spec.nodes}
    groups = dict(spec.groups)
    changed = False
    for parent in spec.order():
        if parent.id not in nodes:
            continue
        kids = spec.children(parent.id)
        if len(kids) < 2:
            continue
        covered = sum(len(k.support) for k in kids)
        if covered == len(set().union(*(k.support for k in kids))):
            continue
        changed = True
        drop = set()
        for k in kids:
            stack = [k.id]
            while stack:
                cur = stack.pop()
                drop.add(cur)
                stack.extend(n.id for n in spec.nodes if n.parent == cur)
        for d in drop:
            nodes.pop(d, None)
        atoms = _atoms([k.support for k in kids])
        atom_ids = []
        for j, cell in enumerate(atoms):
            aid = f"{parent.id}/x{j}"
            atom_ids.append(aid)
            nodes[aid] = Node(aid, parent.id, cell, "identity")
        for k in kids:
            groups[k.id] = tuple(a for a, cell in zip(atom_ids, atoms) if set(cell) <= set(k.support))
    if not changed:
        return spec
    ordered = [n for n in spec.nodes if n.id in nodes] + [
        n for nid, n in nodes.items() if nid not in {m.id for m in spec.nodes}
    ]
    return HierarchySpec(spec.size, ordered, dict(spec.compositional), groups)


def _dilated_blur(n: int, scale: int) -> np.ndarray:
    """Circulant [1/4, 1/2, 1/4] blur with taps ``2**scale`` apart."""
    K = np.zeros((n, n))
    step = 2**scale
    for i in range(n):
        K[i, i] += 0.5
        K[i, (i + step) % n] += 0.25
        K[i, (i - step) % n] += 0.25
    return K


def pyramid_filters(levels: int, n: int) -> list[SegmentFilter]:
    """Undecimated Laplacian-pyramid bank on a length-``n`` mode, coarsest band first.

    The first filter is the low-pass residual, the rest are band-pass
    differences of successive blurs down to the finest detail band.  The
    bank telescopes to the identity.
    """
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if levels > 1 and levels > math.log2(n):
        raise ValueError(f"{levels} levels exceed log2 of a support of {n}")
    smooth = [np.eye(n)]
    for j in range(levels - 1):
        smooth.append(_dilated_blur(n, j) @ smooth[-1])
    bands = [smooth[j] - smooth[j + 1] for j in range(levels - 1)]
    full = tuple(range(n))
    return [SegmentFilter(full, F) for F in [smooth[-1]] + bands[::-1]]


def subdivision(
    size: int,
    levels: int,
    arity: int = 2,
    filter: str = "identity",
    compositional: dict[int, str] | None = None,
) -> HierarchySpec:
    """Regular ``arity``-way subdivision of ``range(size)`` into ``levels`` levels.

    ``filter="identity"`` puts block identities on the leaves only (internal
    nodes are structural); ``filter="pyramid"`` gives every node the pyramid
    band of its depth.
    """
    if levels < 1 or arity < 2:
        raise ValueError("levels must be >= 1 and arity >= 2")
    if size % arity ** (levels - 1):
        raise ValueError(f"size {size} is not divisible into {arity}**{levels - 1} parts")
    nodes = []

    def build(node_id: str, parent: str | None, lo: int, hi: int, depth: int):
        leaf = depth == levels - 1
        if filter == "pyramid":
            f = f"pyramid:{levels}"
        else:
            f = "identity" if leaf else "none"
        nodes.append(Node(node_id, parent, tuple(range(lo, hi)), f))
        if leaf:
            return
        step = (hi - lo) // arity
        for k in range(arity):
            build(f"{node_id}.{k}", node_id, lo + k * step, lo + (k + 1) * step, depth + 1)

    build("0", None, 0, size, 0)
    return HierarchySpec(size, nodes, dict(compositional or {}))


def union_support(nodes: Iterable[Node]) -> tuple[int, ...]:
    return tuple(sorted(set().union(*(n.support for n in nodes))))
