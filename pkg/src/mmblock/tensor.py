"""Dense tensor primitives: matrixizing, mode products, Kronecker products, SVD.

Tensors are plain ``numpy.ndarray`` objects.  Mode 0 is the measurement mode
and the canonical element order is column-major (mode-0 index varies fastest),
so ``vec(A)`` is ``A.ravel(order="F")`` and the mode-m matrixizing sweeps the
remaining modes with smaller mode indexes varying more rapidly.

All indices are 0-based.  The 1-based column formula for mode-m matrixizing,
``k = 1 + sum_{n != m} (i_n - 1) prod_{l < n, l != m} I_l``, becomes
``k = sum_{n != m} i_n prod_{l < n, l != m} I_l``.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "matrixize",
    "tensorize",
    "mode_product",
    "multi_mode_product",
    "kronecker",
    "khatri_rao_block",
    "vec",
    "unvec",
    "thin_svd",
    "pinv",
    "orthonormality_residual",
    "subspace_angles",
    "read_dten",
    "write_dten",
    "DTEN_MAGIC",
]

DTEN_MAGIC = b"DTEN1"


def _check_mode(ndim: int, m: int) -> None:
    if not 0 <= m < ndim:
        raise ValueError(f"mode {m} out of range for an order-{ndim} tensor")


def matrixize(A: np.ndarray, m: int) -> np.ndarray:
    """Mode-m matrixizing (flattening) of ``A``.

    Returns the ``I_m x prod_{n != m} I_n`` matrix whose columns are the
    mode-m fibers of ``A``, ordered with lower mode indexes varying fastest.
    """
    A = np.asarray(A)
    _check_mode(A.ndim, m)
    return np.moveaxis(A, m, 0).reshape(A.shape[m], -1, order="F")


def tensorize(M: np.ndarray, m: int, shape: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`matrixize` for a tensor of the given ``shape``."""
    M = np.asarray(M)
    shape = tuple(int(s) for s in shape)
    _check_mode(len(shape), m)
    rest = shape[:m] + shape[m + 1:]
    if M.ndim != 2 or M.shape[0] != shape[m] or M.shape[1] != int(np.prod(rest, dtype=int)):
        raise ValueError(
            f"matrix of shape {M.shape} does not match mode {m} of tensor shape {shape}"
        )
    return np.moveaxis(M.reshape((shape[m],) + rest, order="F"), 0, m)


def mode_product(A: np.ndarray, m: int, B: np.ndarray) -> np.ndarray:
    """Mode-m product ``A x_m B``; equivalently ``matrixize(C, m) = B @ matrixize(A, m)``."""
    A = np.asarray(A)
    B = np.asarray(B)
    _check_mode(A.ndim, m)
    if B.ndim != 2 or B.shape[1] != A.shape[m]:
        raise ValueError(
            f"cannot multiply mode {m} (extent {A.shape[m]}) by a matrix of shape {B.shape}"
        )
    return np.moveaxis(np.tensordot(B, A, axes=(1, m)), 0, m)


def multi_mode_product(
    A: np.ndarray,
    matrices: Sequence[np.ndarray | None],
    transpose: bool = False,
    skip: int | None = None,
) -> np.ndarray:
    """Apply ``A x_0 B_0 x_1 B_1 ...``; ``None`` entries and mode ``skip`` are left alone."""
    out = np.asarray(A)
    for m, B in enumerate(matrices):
        if B is None or m == skip:
            continue
        out = mode_product(out, m, B.T if transpose else B)
    return out


def kronecker(U: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Kronecker product with ``[U kron V]_{(i,k),(j,l)} = u_ij v_kl``."""
    U = np.atleast_2d(np.asarray(U, dtype=float))
    V = np.atleast_2d(np.asarray(V, dtype=float))
    return np.kron(U, V)


def khatri_rao_block(Us: Sequence[np.ndarray], Vs: Sequence[np.ndarray]) -> np.ndarray:
    """Block Khatri-Rao product ``[U_1 kron V_1 | ... | U_L kron V_L]``.

    When every block is a single column this is the ordinary column-wise
    Khatri-Rao product.
    """
    if len(Us) != len(Vs):
        raise ValueError(f"block count mismatch: {len(Us)} vs {len(Vs)}")
    if not Us:
        raise ValueError("at least one block pair is required")
    blocks = [kronecker(U, V) for U, V in zip(Us, Vs)]
    rows = {b.shape[0] for b in blocks}
    if len(rows) != 1:
        raise ValueError(f"block pairs produce inconsistent row counts {sorted(rows)}")
    return np.hstack(blocks)


def vec(A: np.ndarray) -> np.ndarray:
    """Flatten in canonical (mode-0 fastest) order."""
    return np.asarray(A).ravel(order="F")


def unvec(v: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    return np.asarray(v).reshape(tuple(shape), order="F")


def thin_svd(M: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD ``M = U diag(s) V.T`` with a deterministic sign convention.

    In every left singular vector the entry of largest magnitude (lowest index
    on ties) is made non-negative; the matching right vector is flipped with it.
    Returns ``(U, s, V)`` (note: ``V``, not ``V.T``).
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise ValueError("thin_svd expects a matrix")
    if not np.all(np.isfinite(M)):
        raise ValueError("thin_svd received non-finite entries")
    if M.size == 0:
        k = min(M.shape)
        return np.zeros((M.shape[0], k)), np.zeros(k), np.zeros((M.shape[1], k))
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs, s, Vt.T * signs


def pinv(M: np.ndarray, rcond: float | None = None) -> np.ndarray:
    """Moore-Penrose pseudo-inverse built on :func:`thin_svd`.

    Singular values ``<= rcond * s_max`` are treated as zero.  The default
    ``rcond`` is ``max(rows, cols) * eps``.
    """
    M = np.asarray(M, dtype=float)
    if rcond is None:
        rcond = max(M.shape) * np.finfo(float).eps
    if rcond < 0:
        raise ValueError("rcond must be non-negative")
    U, s, V = thin_svd(M)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros(M.shape[::-1])
    keep = s > rcond * s[0]
    return (V[:, keep] / s[keep]) @ U[:, keep].T


def orthonormality_residual(U: np.ndarray) -> float:
    """``max |U.T U - I|``."""
    U = np.asarray(U)
    return float(np.max(np.abs(U.T @ U - np.eye(U.shape[1])), initial=0.0))


def subspace_angles(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Principal angles (radians) between the column spaces of ``A`` and ``B``."""
    Qa, _ = np.linalg.qr(A)
    Qb, _ = np.linalg.qr(B)
    # sine form: arccos of the cosines loses precision near zero angle
    if Qa.shape[1] <= Qb.shape[1]:
        small, big = Qa, Qb
    else:
        small, big = Qb, Qa
    resid = small - big @ (big.T @ small)
    sin = np.linalg.svd(resid, compute_uv=False)
    sin = np.sort(np.clip(sin, 0.0, 1.0))
    return np.arcsin(sin)


def write_dten(path: str | Path, A: np.ndarray) -> None:
    """Write ``A`` as a DTEN file: magic, uint32 order, uint32 extents, float64 LE data."""
    A = np.asarray(A, dtype=float)
    header = DTEN_MAGIC + struct.pack("<I", A.ndim) + struct.pack(f"<{A.ndim}I", *A.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(vec(A).astype("<f8").tobytes())


def read_dten(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:5] != DTEN_MAGIC:
        raise ValueError(f"{path}: not a DTEN file")
    (order,) = struct.unpack_from("<I", raw, 5)
    shape = struct.unpack_from(f"<{order}I", raw, 9)
    offset = 9 + 4 * order
    count = int(np.prod(shape, dtype=int))
    if len(raw) - offset != 8 * count:
        raise ValueError(f"{path}: expected {count} values, found {(len(raw) - offset) // 8}")
    data = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
    return unvec(data.astype(float), shape)
