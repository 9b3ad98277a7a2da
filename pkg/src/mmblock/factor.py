"""Flat multilinear models: M-mode SVD, HOOI refinement and rank-1 CP fitting."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from .tensor import matrixize, mode_product, multi_mode_product, thin_svd

__all__ = [
    "FactorModel",
    "RankSpec",
    "Rank1Fit",
    "mmode_svd",
    "hooi_refine",
    "reconstruct",
    "rank1_cp",
    "leading_left_vectors",
]

DEFAULT_ENERGY = 0.99


@dataclass(frozen=True)
class RankSpec:
    """Per-mode target ranks, or an energy threshold used to pick them.

    Exactly one of ``ranks`` and ``energy`` is used; explicit ranks win.
    With neither given the energy threshold defaults to 0.99.
    """

    ranks: tuple[int, ...] | None = None
    energy: float | None = None

    def __post_init__(self):
        if self.ranks is not None:
            object.__setattr__(self, "ranks", tuple(int(r) for r in self.ranks))
            if any(r < 1 for r in self.ranks):
                raise ValueError(f"ranks must be positive, got {self.ranks}")
        if self.energy is not None and not 0.0 < self.energy <= 1.0:
            raise ValueError(f"energy threshold must lie in (0, 1], got {self.energy}")

    @classmethod
    def coerce(cls, ranks) -> "RankSpec":
        if isinstance(ranks, RankSpec):
            return ranks
        if ranks is None:
            return cls(energy=DEFAULT_ENERGY)
        if isinstance(ranks, float):
            return cls(energy=ranks)
        return cls(ranks=tuple(ranks))

    def resolve(self, shape: Sequence[int], sigmas: Sequence[np.ndarray]) -> tuple[int, ...]:
        if self.ranks is not None:
            if len(self.ranks) != len(shape):
                raise ValueError(f"{len(self.ranks)} ranks given for an order-{len(shape)} tensor")
            for m, (r, n) in enumerate(zip(self.ranks, shape)):
                if r > n:
                    raise ValueError(f"rank {r} exceeds extent {n} of mode {m}")
            return self.ranks
        tau = DEFAULT_ENERGY if self.energy is None else self.energy
        out = []
        for s in sigmas:
            energy = np.cumsum(s**2)
            if energy.size == 0 or energy[-1] == 0.0:
                out.append(1)
                continue
            # tiny tolerance so tau = 1 does not demand the rounding-level tail
            need = tau * energy[-1] * (1.0 - 1e-12)
            out.append(int(np.searchsorted(energy, need) + 1))
        return tuple(out)


@dataclass
class FactorModel:
    """Tucker model ``D = Z x_0 U_0 x_1 U_1 ... x_C U_C (+ mean)``.

    ``mean`` is the mode-0 mean observation when the data was centered and
    ``None`` otherwise.  ``losses`` holds the squared-error trace of the last
    refinement, if any.
    """

    core: np.ndarray
    factors: list[np.ndarray]
    sigmas: list[np.ndarray]
    mean: np.ndarray | None = None
    losses: list[float] = field(default_factory=list)

    @property
    def order(self) -> int:
        return len(self.factors)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(U.shape[0] for U in self.factors)

    @property
    def ranks(self) -> tuple[int, ...]:
        return tuple(U.shape[1] for U in self.factors)

    @property
    def extended_core(self) -> np.ndarray:
        """``T = Z x_0 U_0``: the core with the measurement mode multiplied through."""
        return mode_product(self.core, 0, self.factors[0])


def leading_left_vectors(M: np.ndarray, rank: int) -> tuple[np.ndarray, np.ndarray]:
    """First ``rank`` left singular vectors of ``M`` (completed to ``rank`` columns).

    When ``rank`` exceeds ``min(M.shape)`` the basis is completed with an
    orthonormal complement and the missing singular values are zero.
    """
    U, s, _ = thin_svd(M)
    if rank <= U.shape[1]:
        return U[:, :rank], s[:rank]
    if U.shape[1]:
        complement = np.linalg.svd(U, full_matrices=True)[0][:, U.shape[1]:]
    else:
        complement = np.eye(M.shape[0])
    U = np.hstack([U, complement[:, : rank - U.shape[1]]])
    return U, np.concatenate([s, np.zeros(rank - s.size)])


def _center(D: np.ndarray, center: bool) -> tuple[np.ndarray, np.ndarray | None]:
    if not center:
        return D, None
    mean = matrixize(D, 0).mean(axis=1)
    return D - mean.reshape((-1,) + (1,) * (D.ndim - 1)), mean


def mmode_svd(D: np.ndarray, ranks=None, center: bool = False) -> FactorModel:
    """M-mode SVD (HOSVD) of ``D``.

    Each ``U_m`` holds the leading left singular vectors of ``matrixize(D, m)``
    and ``Z = D x_0 U_0^T ... x_C U_C^T``.  ``ranks`` may be a sequence of
    per-mode ranks, an energy threshold in ``(0, 1]``, a :class:`RankSpec`, or
    ``None`` (energy threshold 0.99).
    """
    D = np.asarray(D, dtype=float)
    if not np.all(np.isfinite(D)):
        raise ValueError("data tensor has non-finite entries")
    spec = RankSpec.coerce(ranks)
    X, mean = _center(D, center)
    svds = [thin_svd(matrixize(X, m))[:2] for m in range(X.ndim)]
    J = spec.resolve(X.shape, [s for _, s in svds])
    factors, sigmas = [], []
    for m in range(X.ndim):
        if J[m] <= svds[m][0].shape[1]:
            U, s = svds[m][0][:, : J[m]], svds[m][1][: J[m]]
        else:
            U, s = leading_left_vectors(matrixize(X, m), J[m])
        factors.append(U)
        sigmas.append(s)
    core = multi_mode_product(X, factors, transpose=True)
    return FactorModel(core=core, factors=factors, sigmas=sigmas, mean=mean)


def reconstruct(model: FactorModel) -> np.ndarray:
    out = multi_mode_product(model.core, model.factors)
    if model.mean is not None:
        out = out + model.mean.reshape((-1,) + (1,) * (out.ndim - 1))
    return out


def _loss(X: np.ndarray, core: np.ndarray, factors: Sequence[np.ndarray]) -> float:
    return float(np.sum((X - multi_mode_product(core, factors)) ** 2))


def hooi_refine(
    D: np.ndarray,
    model: FactorModel,
    eps: float = 1e-9,
    max_iters: int = 100,
) -> FactorModel:
    """Higher-order orthogonal iteration starting from ``model``.

    Each sweep replaces every ``U_m`` in turn by the leading left singular
    vectors of ``D`` projected on all the other current factors, then
    recomputes the core.  Stops when the squared error drops by no more than
    ``eps * ||D||^2`` in one sweep, or after ``max_iters`` sweeps.
    """
    D = np.asarray(D, dtype=float)
    if D.shape != model.shape:
        raise ValueError(f"model shape {model.shape} does not match data shape {D.shape}")
    if max_iters <= 0:
        return model
    X = D if model.mean is None else D - model.mean.reshape((-1,) + (1,) * (D.ndim - 1))
    norm2 = float(np.sum(X**2))
    factors = [np.linalg.qr(U)[0] if U.shape[1] else U for U in model.factors]
    sigmas = list(model.sigmas)
    losses = [_loss(X, model.core, model.factors)]
    core = model.core
    for _ in range(max_iters):
        for m in range(D.ndim):
            Y = multi_mode_product(X, factors, transpose=True, skip=m)
            factors[m], sigmas[m] = leading_left_vectors(matrixize(Y, m), factors[m].shape[1])
        core = multi_mode_product(X, factors, transpose=True)
        losses.append(_loss(X, core, factors))
        if losses[-2] - losses[-1] <= eps * norm2:
            break
    return replace(model, core=core, factors=factors, sigmas=sigmas, losses=losses)


class Rank1Fit(NamedTuple):
    """Best rank-1 approximation ``T ~ u_0 o u_1 o ... o u_C``.

    ``factors[0]`` carries the magnitude; the others have unit norm.
    ``degenerate`` flags a (near) tie between the two leading singular values
    of some mode unfolding, where the dominant rank-1 term is not unique.
    """

    factors: list[np.ndarray]
    residual: float
    losses: list[float]
    degenerate: bool


def rank1_cp(
    T: np.ndarray,
    max_iters: int = 500,
    eps: float = 1e-13,
    tie_tol: float = 1e-6,
) -> Rank1Fit:
    """Rank-1 CP fit by alternating power iteration, initialised from the HOSVD."""
    T = np.asarray(T, dtype=float)
    norm2 = float(np.sum(T**2))
    if norm2 == 0.0:
        raise ValueError("zero tensor: no direction defined")
    if T.ndim == 1:
        return Rank1Fit([T.copy()], 0.0, [0.0], False)

    vecs, degenerate = [], False
    for m in range(T.ndim):
        U, s, _ = thin_svd(matrixize(T, m))
        vecs.append(U[:, 0].copy())
        if s.size > 1 and s[1] >= (1.0 - tie_tol) * s[0]:
            degenerate = True

    def contract(skip: int) -> np.ndarray:
        out = T
        # contract highest modes first so the remaining axis indices stay valid
        for n in reversed(range(T.ndim)):
            if n != skip:
                out = np.tensordot(out, vecs[n], axes=(n, 0))
        return out

    weight = float(contract(0) @ vecs[0])
    losses = [norm2 - weight**2]
    for _ in range(max_iters):
        for m in range(T.ndim):
            v = contract(m)
            nv = np.linalg.norm(v)
            if nv == 0.0:
                break
            vecs[m] = v / nv
        weight = float(contract(0) @ vecs[0])
        losses.append(max(norm2 - weight**2, 0.0))
        if losses[-2] - losses[-1] <= eps * norm2:
            break
    factors = [weight * vecs[0]] + vecs[1:]
    fit = factors[0]
    for v in factors[1:]:
        fit = np.multiply.outer(fit, v)
    residual = float(np.linalg.norm(T - fit) / np.sqrt(norm2))
    return Rank1Fit(factors, residual, losses, degenerate)
