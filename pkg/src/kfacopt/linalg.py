"""Dense linear algebra and Kronecker-product identities.

Matrices are plain 2-D float64 numpy arrays. The helpers here are the only
place the rest of the package touches eigendecompositions, SPD solves, or
Kronecker structure; Kronecker products are never materialized outside the
size-capped `dense_kron`, which exists for oracles and tests.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
import scipy.linalg

from .errors import DimensionError, NumericalError, SizeError

# Hard cap (per side) on materialized Kronecker products. Keeps the oracle
# path from being misused on real networks.
DENSE_KRON_CAP = 4096


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array and reject NaN/Inf entries."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericalError(f"{name} contains non-finite entries")
    return m


def as_vector(a, name: str = "vector") -> np.ndarray:
    """Coerce to a 1-D float64 array and reject NaN/Inf entries."""
    v = np.asarray(a, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise NumericalError(f"{name} contains non-finite entries")
    return v


class SymEig(NamedTuple):
    """Eigendecomposition Q diag(values) Q^T of a symmetric matrix.

    `values` are ascending; columns of `vectors` are the eigenvectors.
    """

    values: np.ndarray
    vectors: np.ndarray


def sym_eig(a) -> SymEig:
    """Eigendecomposition of a (nearly) symmetric matrix.

    The input is symmetrized as (A + A^T)/2 first; running covariance
    estimates accumulate asymmetry at round-off scale.
    """
    m = as_matrix(a, "sym_eig input")
    if m.shape[0] != m.shape[1]:
        raise DimensionError(f"sym_eig needs a square matrix, got {m.shape}")
    s = 0.5 * (m + m.T)
    try:
        values, vectors = np.linalg.eigh(s)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"eigendecomposition failed on {m.shape[0]}x{m.shape[1]} matrix "
            f"(fro={np.linalg.norm(s):.3e}, diag range "
            f"[{s.diagonal().min():.3e}, {s.diagonal().max():.3e}]): {exc}"
        ) from exc
    return SymEig(values, vectors)


def spd_solve(a, b) -> np.ndarray:
    """Solve A x = b for symmetric positive-definite A via Cholesky.

    Any damping must already be folded into A by the caller.
    """
    m = as_matrix(a, "spd_solve matrix")
    v = as_vector(b, "spd_solve rhs")
    if m.shape[0] != m.shape[1]:
        raise DimensionError(f"spd_solve needs a square matrix, got {m.shape}")
    if m.shape[0] != v.size:
        raise DimensionError(
            f"spd_solve: rhs length {v.size} does not match matrix order {m.shape[0]}"
        )
    try:
        factor = scipy.linalg.cho_factor(m, lower=True)
    except scipy.linalg.LinAlgError as exc:
        # scipy's message names the offending leading minor
        raise NumericalError(f"SPD factorization failed: {exc}") from exc
    return scipy.linalg.cho_solve(factor, v)


def kron_apply(a, b, x) -> np.ndarray:
    """Compute (A kron B) x without materializing the Kronecker product.

    Uses the reshape identity (A kron B) vec(X) = vec(B X A^T), with vec
    stacking columns; X is x reshaped to cols(B) x cols(A).
    """
    A = as_matrix(a, "A")
    B = as_matrix(b, "B")
    v = as_vector(x, "x")
    if v.size != A.shape[1] * B.shape[1]:
        raise DimensionError(
            f"kron_apply: x has length {v.size}, expected "
            f"cols(A)*cols(B) = {A.shape[1] * B.shape[1]}"
        )
    X = v.reshape((B.shape[1], A.shape[1]), order="F")
    return (B @ X @ A.T).reshape(-1, order="F")


def kron_elem_sum(a, b) -> float:
    """Sum of all entries of A kron B, in O(size(A) + size(B)) work.

    Every entry of the product is a_ij * b_kl, so the total is
    (sum of A) * (sum of B).
    """
    A = as_matrix(a, "A")
    B = as_matrix(b, "B")
    return float(A.sum() * B.sum())


def dense_kron(a, b, cap: int = DENSE_KRON_CAP) -> np.ndarray:
    """Materialized Kronecker product, for oracles and small tests only."""
    A = as_matrix(a, "A")
    B = as_matrix(b, "B")
    rows = A.shape[0] * B.shape[0]
    cols = A.shape[1] * B.shape[1]
    if rows > cap or cols > cap:
        raise SizeError(
            f"dense_kron result {rows}x{cols} exceeds the {cap}x{cap} oracle cap"
        )
    return np.kron(A, B)
