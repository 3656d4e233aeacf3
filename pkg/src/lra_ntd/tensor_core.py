"""
Dense tensor kernels.

Tensors are plain float64 numpy arrays. Element ordering follows the
first-index-fastest convention: the mode-n unfolding puts index i_n on the
rows and enumerates the remaining indices with the lowest mode varying
fastest (Kolda & Bader). Under this convention the Kronecker product in

    unfold(G x_1 A1 ... x_N AN, n) = An @ unfold(G, n) @ (AN (x) ... (x) A1).T

runs over the modes p != n in inverse order.
"""
import logging
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as la
from numpy.typing import ArrayLike, NDArray

logger = logging.getLogger(__name__)

DenseTensor = NDArray[np.float64]
Matrix = NDArray[np.float64]

EPS_DIV = 1e-16

# Rank-one step of the nearest Kronecker factorization
POWER_TOL = 1e-12
POWER_MAX_ITERS = 1000


class ShapeError(ValueError):
    """Raised when operands have incompatible dimensions."""


def as_tensor(x: ArrayLike) -> DenseTensor:
    """Validate and convert input to a float64 tensor (order >= 1, finite entries)."""
    t = np.asarray(x, dtype=np.float64)
    if t.ndim < 1:
        raise ShapeError("A tensor needs at least one mode")
    if any(extent < 1 for extent in t.shape):
        raise ShapeError(f"Every extent must be >= 1, got shape {t.shape}")
    if not np.all(np.isfinite(t)):
        raise ValueError("Tensor contains NaN or Inf entries")
    return t


def _check_mode(t: np.ndarray, n: int) -> None:
    if not 0 <= n < t.ndim:
        raise ShapeError(f"Mode {n} is invalid for a tensor of order {t.ndim}")


def unfold(t: DenseTensor, n: int) -> Matrix:
    """Mode-n matricization; modes are 0-based."""
    _check_mode(t, n)
    return np.reshape(np.moveaxis(t, n, 0), (t.shape[n], -1), order="F")


def fold(m: Matrix, n: int, shape: Sequence[int]) -> DenseTensor:
    """Inverse of `unfold`."""
    shape = tuple(int(s) for s in shape)
    if not 0 <= n < len(shape):
        raise ShapeError(f"Mode {n} is invalid for shape {shape}")
    expected = (shape[n], int(np.prod(shape)) // shape[n])
    if m.shape != expected:
        raise ShapeError(f"Cannot fold a {m.shape} matrix into mode {n} of {shape}")
    moved = (shape[n],) + shape[:n] + shape[n + 1:]
    return np.moveaxis(np.reshape(m, moved, order="F"), 0, n)


def mode_product(t: DenseTensor, a: Matrix, n: int) -> DenseTensor:
    """t x_n a: contracts mode n of `t` with the columns of `a`."""
    _check_mode(t, n)
    if a.ndim != 2 or a.shape[1] != t.shape[n]:
        raise ShapeError(
            f"Matrix of shape {a.shape} does not match extent {t.shape[n]} of mode {n}"
        )
    return np.moveaxis(np.tensordot(a, t, axes=(1, n)), 0, n)


def multi_mode_product(
    t: DenseTensor,
    mats: Sequence[Optional[Matrix]],
    transpose: bool = False,
    skip: Optional[int] = None,
) -> DenseTensor:
    """
    Apply a mode product for every supplied matrix.

    Args:
        t: the tensor
        mats: one entry per mode; None leaves that mode untouched
        transpose: multiply by the transposed matrices instead
        skip: a mode to leave untouched regardless of `mats`
    """
    if len(mats) != t.ndim:
        raise ShapeError(f"Expected {t.ndim} matrices, got {len(mats)}")
    result = t
    for n, a in enumerate(mats):
        if a is None or n == skip:
            continue
        result = mode_product(result, a.T if transpose else a, n)
    return result


def kronecker(a: Matrix, b: Matrix) -> Matrix:
    return np.kron(a, b)


def kronecker_chain(mats: Sequence[Matrix]) -> Matrix:
    """Kronecker product of the matrices in the given order."""
    if not mats:
        return np.ones((1, 1))
    result = mats[0]
    for m in mats[1:]:
        result = np.kron(result, m)
    return result


def khatri_rao(a: Matrix, b: Matrix) -> Matrix:
    """Columnwise Kronecker product."""
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"Column counts differ: {a.shape[1]} and {b.shape[1]}")
    return la.khatri_rao(a, b)


def project_nonneg(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def frobenius_norm(x: np.ndarray) -> float:
    return float(np.linalg.norm(np.ravel(x)))


def _check_same_shape(x: np.ndarray, y: np.ndarray) -> None:
    if np.shape(x) != np.shape(y):
        raise ShapeError(f"Shapes differ: {np.shape(x)} and {np.shape(y)}")


def hadamard(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    _check_same_shape(x, y)
    return x * y


def elementwise_divide(x: np.ndarray, y: np.ndarray, eps: float = EPS_DIV) -> np.ndarray:
    """x / (y + eps); the guard keeps zero denominators finite."""
    _check_same_shape(x, y)
    return x / (y + eps)


def nearest_kronecker_factorize(
    k: Matrix, shape1: Sequence[int], shape2: Sequence[int]
) -> tuple[Matrix, Matrix]:
    """
    Find (A1, A2) minimizing ||K - A1 (x) A2||_F.

    K is rearranged so that every I2 x R2 block becomes one row,
    K_R = vec(A1) vec(A2)^T, and the best rank-one approximation of K_R is
    taken by power iteration.

    Args:
        k: matrix of shape (I1*I2, R1*R2)
        shape1: (I1, R1)
        shape2: (I2, R2)

    Returns:
        Tuple (A1, A2); when K is nonnegative both factors are returned nonnegative.
    """
    i1, r1 = (int(s) for s in shape1)
    i2, r2 = (int(s) for s in shape2)
    if k.shape != (i1 * i2, r1 * r2):
        raise ShapeError(
            f"Matrix of shape {k.shape} is not a Kronecker product of {shape1} and {shape2}"
        )

    # blocks[j1, i1] is the (i1, j1) block; row order matches vec(A1)
    blocks = k.reshape(i1, i2, r1, r2).transpose(2, 0, 1, 3)
    rearranged = np.stack(
        [np.ravel(b, order="F") for b in blocks.reshape(r1 * i1, i2, r2)]
    )

    u, sigma, v = _leading_singular_triplet(rearranged)
    if u.sum() + v.sum() < 0:
        u, v = -u, -v
    scale = np.sqrt(sigma)
    a1 = np.reshape(scale * u, (i1, r1), order="F")
    a2 = np.reshape(scale * v, (i2, r2), order="F")
    return a1, a2


def _leading_singular_triplet(m: Matrix) -> tuple[np.ndarray, float, np.ndarray]:
    if not np.any(m):
        return np.zeros(m.shape[0]), 0.0, np.zeros(m.shape[1])

    # Deterministic start: the row of largest norm
    v = m[np.argmax(np.linalg.norm(m, axis=1))].copy()
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(POWER_MAX_ITERS):
        u = m @ v
        u_norm = np.linalg.norm(u)
        u /= u_norm
        v_next = m.T @ u
        sigma_next = np.linalg.norm(v_next)
        v_next /= sigma_next
        converged = abs(sigma_next - sigma) <= POWER_TOL * sigma_next
        v, sigma = v_next, sigma_next
        if converged:
            break
    else:
        logger.warning(f"Power iteration stopped after {POWER_MAX_ITERS} iterations")
    return m @ v / sigma, float(sigma), v
