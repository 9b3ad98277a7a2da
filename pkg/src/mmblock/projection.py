"""Multilinear projection: from an unlabeled observation to per-factor representations.

For a trained model with extended core ``T = Z x_0 U_0`` an observation is
``d = T x_1 r_1^T ... x_C r_C^T``.  Pseudo-inverting ``T`` along the
measurement mode gives ``R = T_[0]^+ (d - mean)``, which, reshaped to
``J_1 x ... x J_C``, is (close to) the rank-1 tensor ``r_1 o ... o r_C``.
A rank-1 CP fit recovers the ``r_c``; labels are read off as the most
similar row of each ``U_c``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .block import BlockFactorModel
from .factor import FactorModel, rank1_cp
from .tensor import matrixize, mode_product, pinv, unvec

__all__ = [
    "FactorRepresentation",
    "Label",
    "BlockRepresentation",
    "Projector",
    "multilinear_project",
    "infer_labels",
    "label_rows",
    "project_block",
    "LOW_CONFIDENCE",
    "NoDirectionError",
]

LOW_CONFIDENCE = 0.5


class NoDirectionError(ValueError):
    pass


@dataclass
class FactorRepresentation:
    """Estimated latent vectors ``r_1 ... r_C`` of one observation.

    Every ``r_c`` has unit norm; ``scale`` is the magnitude of the rank-1
    term and ``residual`` the relative error of the rank-1 fit.
    """

    factors: list[np.ndarray]
    scale: float
    residual: float
    degenerate: bool = False


class Label(NamedTuple):
    index: int
    score: float
    low_confidence: bool


def _rep_from_tensor(R: np.ndarray) -> FactorRepresentation:
    if not np.any(R):
        raise NoDirectionError("projected tensor is zero: no direction defined")
    fit = rank1_cp(R)
    head = fit.factors[0]
    scale = float(np.linalg.norm(head))
    if scale == 0.0:
        raise NoDirectionError("projected tensor is zero: no direction defined")
    return FactorRepresentation([head / scale] + list(fit.factors[1:]), scale, fit.residual, fit.degenerate)


class Projector:
    """Caches the measurement-mode pseudo-inverse of an extended core.

    ``T`` has the measurement mode first; ``mean`` is subtracted from each
    observation before projection.
    """

    def __init__(self, T: np.ndarray, mean: np.ndarray | None = None, rcond: float | None = None):
        self.shape = T.shape[1:]
        self.I0 = T.shape[0]
        self.mean = mean
        self.Tpinv = pinv(matrixize(T, 0), rcond)

    def project(self, d_new: np.ndarray) -> FactorRepresentation:
        d = np.asarray(d_new, dtype=float).ravel()
        if d.size != self.I0:
            raise ValueError(f"observation has {d.size} entries, expected {self.I0}")
        if self.mean is not None:
            d = d - self.mean
        if not np.any(d):
            raise NoDirectionError("observation equals the mean: no direction defined")
        return _rep_from_tensor(unvec(self.Tpinv @ d, self.shape))


def multilinear_project(model: FactorModel, d_new: np.ndarray, rcond: float | None = None) -> FactorRepresentation:
    """Representations ``r_1 ... r_C`` of ``d_new`` under a trained flat model."""
    return Projector(model.extended_core, model.mean, rcond).project(d_new)


def label_rows(r: np.ndarray, U: np.ndarray) -> Label:
    """Row of ``U`` with the largest absolute cosine to ``r`` (lowest index on ties)."""
    U = np.asarray(U, dtype=float)
    r = np.asarray(r, dtype=float)
    norms = np.linalg.norm(U, axis=1) * np.linalg.norm(r)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where(norms > 0, np.abs(U @ r) / np.where(norms > 0, norms, 1.0), 0.0)
    k = int(np.argmax(cos))
    score = float(min(cos[k], 1.0))
    return Label(k, score, score < LOW_CONFIDENCE)


def infer_labels(rep: FactorRepresentation, model: FactorModel | Sequence[np.ndarray]) -> list[Label]:
    """Per causal factor: nearest training row of ``U_c`` by absolute cosine."""
    Us = model.factors[1:] if isinstance(model, FactorModel) else list(model)
    if len(Us) != len(rep.factors):
        raise ValueError(f"{len(rep.factors)} representations for {len(Us)} factors")
    return [label_rows(r, U) for r, U in zip(rep.factors, Us)]


@dataclass
class BlockRepresentation:
    """Per-segment representations and the score-weighted vote across segments."""

    segments: dict[str, FactorRepresentation]
    segment_labels: dict[str, list[Label]]
    labels: list[Label]
    votes: list[dict[int, float]] = field(default_factory=list)


def project_block(
    model: BlockFactorModel,
    d_new: np.ndarray,
    visible: np.ndarray | Sequence[bool] | None = None,
    rcond: float | None = None,
) -> BlockRepresentation:
    """Project ``d_new`` through every segment whose support is fully visible.

    Each usable segment gives its own representations and labels (against
    that segment's factor blocks).  The final label of a factor is the index
    with the largest summed score over segments, lowest index on ties; its
    score is the mean score of the segments that voted for it.
    """
    d = np.asarray(d_new, dtype=float).ravel()
    I0 = model.shape[0]
    if d.size != I0:
        raise ValueError(f"observation has {d.size} entries, expected {I0}")
    vis = np.ones(I0, dtype=bool) if visible is None else np.asarray(visible, dtype=bool).ravel()
    if vis.size != I0:
        raise ValueError(f"visibility mask has {vis.size} entries, expected {I0}")
    if model.mean is not None:
        d = d - model.mean
    reps, labels = {}, {}
    for s, sid in enumerate(model.segment_ids):
        rows = model.supports[s]
        if not np.all(vis[rows]):
            continue
        T = mode_product(model.cores[s], 0, model.factors[0][s][rows])
        ds = d[rows]
        if not np.any(ds):
            continue
        rep = Projector(T, None, rcond).project(ds)
        reps[sid] = rep
        labels[sid] = [label_rows(r, model.factors[c + 1][s]) for c, r in enumerate(rep.factors)]
    if not reps:
        raise ValueError("no fully visible segment to project through")
    C = model.order - 1
    final, votes = [], []
    for c in range(C):
        tally: dict[int, float] = {}
        for lab in labels.values():
            tally[lab[c].index] = tally.get(lab[c].index, 0.0) + lab[c].score
        best = max(tally.values())
        k = min(i for i, v in tally.items() if v == best)
        scores = [lab[c].score for lab in labels.values() if lab[c].index == k]
        score = float(np.mean(scores))
        final.append(Label(k, score, score < LOW_CONFIDENCE))
        votes.append(tally)
    return BlockRepresentation(reps, labels, final, votes)
