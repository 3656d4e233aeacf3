"""
Low multilinear-rank approximation: the compression step that precedes NTD.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as la

from .tensor_core import (
    DenseTensor,
    Matrix,
    ShapeError,
    as_tensor,
    frobenius_norm,
    multi_mode_product,
    unfold,
)
from .tensor_io import PathLike, model_from_bytes, model_to_bytes

logger = logging.getLogger(__name__)

COMPLETION_TOL = 1e-10
COMPLETION_MAX_ITERS = 200

# Eigenvalues below this fraction of the largest one are treated as zero
_EIG_RTOL = 1e-12


@dataclass
class TuckerModel:
    """Core tensor with one factor matrix per mode.

    Serves both as an LRA (orthonormal factors) and as an NTD estimate.
    `fixed[n]` marks a factor held at the identity (population NTD).
    """
    core: DenseTensor
    factors: list[Matrix]
    fixed: list[bool] = field(default_factory=list)

    def __post_init__(self):
        if not self.fixed:
            self.fixed = [False] * len(self.factors)
        if len(self.factors) != self.core.ndim or len(self.fixed) != self.core.ndim:
            raise ShapeError(
                f"Core of order {self.core.ndim} needs {self.core.ndim} factors, got {len(self.factors)}"
            )
        for n, factor in enumerate(self.factors):
            if factor.ndim != 2 or factor.shape[1] != self.core.shape[n]:
                raise ShapeError(
                    f"Factor {n} has shape {factor.shape}, core extent is {self.core.shape[n]}"
                )
            if self.fixed[n] and not (
                factor.shape[0] == factor.shape[1] and np.array_equal(factor, np.eye(factor.shape[0]))
            ):
                raise ValueError(f"Factor {n} is marked identity-fixed but is not an identity")

    @property
    def order(self) -> int:
        return self.core.ndim

    @property
    def ranks(self) -> tuple[int, ...]:
        return tuple(self.core.shape)

    @property
    def extents(self) -> tuple[int, ...]:
        return tuple(f.shape[0] for f in self.factors)

    def copy(self) -> "TuckerModel":
        return TuckerModel(self.core.copy(), [f.copy() for f in self.factors], list(self.fixed))


def reconstruct(model: TuckerModel) -> DenseTensor:
    """Full tensor core x_1 A1 ... x_N AN."""
    return multi_mode_product(model.core, model.factors)


def _validate_ranks(extents: Sequence[int], ranks: Sequence[int]) -> tuple[int, ...]:
    ranks = tuple(int(r) for r in ranks)
    if len(ranks) != len(extents):
        raise ShapeError(f"Got {len(ranks)} ranks for a tensor of order {len(extents)}")
    for n, (r, extent) in enumerate(zip(ranks, extents)):
        if not 1 <= r <= extent:
            raise ValueError(f"Rank {r} for mode {n} must lie in [1, {extent}]")
    return ranks


def _fix_signs(u: Matrix) -> Matrix:
    """Make the largest-magnitude entry of every column nonnegative."""
    rows = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[rows, np.arange(u.shape[1])] < 0, -1.0, 1.0)
    return u * signs


def leading_left_singular_vectors(m: Matrix, rank: int) -> Matrix:
    """
    Leading `rank` left singular vectors of `m`.

    Uses the eigendecomposition of the smaller Gram matrix; falls back to a
    full SVD when the requested rank exceeds the smaller dimension or the
    transposed Gram is numerically singular.
    """
    rows, cols = m.shape
    if rank <= rows <= cols:
        _, v = la.eigh(m @ m.T, subset_by_index=[rows - rank, rows - 1])
        return _fix_signs(v[:, ::-1])
    if rank <= cols < rows:
        w, v = la.eigh(m.T @ m, subset_by_index=[cols - rank, cols - 1])
        w, v = w[::-1], v[:, ::-1]
        if w[-1] > _EIG_RTOL * max(w[0], np.finfo(float).tiny):
            u = (m @ v) / np.sqrt(w)
            # one QR pass restores orthonormality lost to rounding
            q, r = la.qr(u, mode="economic")
            return _fix_signs(q * np.sign(np.diag(r)))
    u = la.svd(m, full_matrices=True)[0]
    return _fix_signs(u[:, :rank])


def hosvd(t: DenseTensor, ranks: Sequence[int]) -> TuckerModel:
    """Truncated higher-order SVD."""
    t = as_tensor(t)
    ranks = _validate_ranks(t.shape, ranks)
    factors = [leading_left_singular_vectors(unfold(t, n), r) for n, r in enumerate(ranks)]
    core = multi_mode_product(t, factors, transpose=True)
    return TuckerModel(core, factors)


def randomized_tucker(
    t: DenseTensor,
    ranks: Sequence[int],
    oversampling: int = 5,
    seed: Optional[int] = None,
    power_iters: int = 1,
) -> TuckerModel:
    """
    Tucker approximation from randomized range sketches of each unfolding.

    Args:
        t: the data tensor
        ranks: target multilinear rank
        oversampling: extra sketch columns per mode
        seed: seed of the Gaussian test matrices
        power_iters: subspace iterations applied to each sketch
    """
    t = as_tensor(t)
    ranks = _validate_ranks(t.shape, ranks)
    if oversampling < 0:
        raise ValueError(f"Oversampling must be nonnegative, got {oversampling}")
    rng = np.random.default_rng(seed)

    factors = []
    for n, r in enumerate(ranks):
        sketch_size = r + oversampling
        if sketch_size > t.shape[n]:
            raise ValueError(
                f"Rank {r} plus oversampling {oversampling} exceeds extent {t.shape[n]} of mode {n}"
            )
        m = unfold(t, n)
        omega = rng.standard_normal((m.shape[1], sketch_size))
        q = la.qr(m @ omega, mode="economic")[0]
        for _ in range(power_iters):
            q = la.qr(m.T @ q, mode="economic")[0]
            q = la.qr(m @ q, mode="economic")[0]
        ub = la.svd(q.T @ m, full_matrices=False)[0]
        factors.append(_fix_signs(q @ ub[:, :r]))

    core = multi_mode_product(t, factors, transpose=True)
    return TuckerModel(core, factors)


def hooi_refine(t: DenseTensor, model: TuckerModel, sweeps: int = 1) -> TuckerModel:
    """Orthogonal-iteration sweeps warm-started from `model` (factors stay orthonormal)."""
    factors = [f.copy() for f in model.factors]
    for _ in range(sweeps):
        for n, r in enumerate(model.ranks):
            projected = multi_mode_product(t, factors, transpose=True, skip=n)
            factors[n] = leading_left_singular_vectors(unfold(projected, n), r)
    core = multi_mode_product(t, factors, transpose=True)
    return TuckerModel(core, factors)


def compute_lra(
    t: DenseTensor,
    ranks: Sequence[int],
    method: str = "hosvd",
    oversampling: int = 5,
    seed: Optional[int] = None,
) -> TuckerModel:
    if method == "hosvd":
        return hosvd(t, ranks)
    if method == "randomized":
        return randomized_tucker(t, ranks, oversampling=oversampling, seed=seed)
    raise ValueError(f"Unknown LRA method '{method}', expected 'hosvd' or 'randomized'")


def validate_weights(w: DenseTensor, shape: Sequence[int]) -> DenseTensor:
    w = as_tensor(w)
    if w.shape != tuple(shape):
        raise ShapeError(f"Weight tensor shape {w.shape} differs from data shape {tuple(shape)}")
    if np.any(w < 0) or np.any(w > 1):
        raise ValueError("Weights must lie in [0, 1]")
    if not np.any(w):
        raise ValueError("Weight tensor is all zero: no entry is observed")
    return w


def weighted_objective(t: DenseTensor, w: DenseTensor, model: TuckerModel) -> float:
    """||W * (Y - reconstruct(model))||_F"""
    return frobenius_norm(w * (t - reconstruct(model)))


def weighted_tucker_complete(
    t: DenseTensor,
    w: DenseTensor,
    ranks: Sequence[int],
    max_iters: int = COMPLETION_MAX_ITERS,
    tol: float = COMPLETION_TOL,
    method: str = "hosvd",
    oversampling: int = 5,
    seed: Optional[int] = None,
) -> TuckerModel:
    """
    Weighted Tucker approximation by imputation.

    Unobserved entries start at the mean of the observed ones; every
    iteration refills the tensor from the current model,
    Z = W^2 * Y + (1 - W^2) * Yhat, and recomputes the low-rank
    approximation of Z with `method` ("hosvd" or "randomized"). For binary
    weights this is the usual EM fill of missing entries. Stops when the
    relative change of Z drops below `tol` or after `max_iters` iterations.
    """
    t = as_tensor(t)
    w = validate_weights(w, t.shape)
    ranks = _validate_ranks(t.shape, ranks)
    if np.all(w == 1):
        return compute_lra(t, ranks, method=method, oversampling=oversampling, seed=seed)

    w2 = w ** 2
    observed = w > 0
    filled = w2 * t + (1 - w2) * float(np.mean(t[observed]))
    model = compute_lra(filled, ranks, method=method, oversampling=oversampling, seed=seed)

    for iteration in range(1, max_iters + 1):
        refilled = w2 * t + (1 - w2) * reconstruct(model)
        change = frobenius_norm(refilled - filled) / max(frobenius_norm(filled), np.finfo(float).tiny)
        filled = refilled
        model = compute_lra(filled, ranks, method=method, oversampling=oversampling, seed=seed)
        logger.debug(f"Completion iteration {iteration}: relative fill change {change:.3e}")
        if change < tol:
            logger.info(f"Weighted completion converged after {iteration} iterations")
            break
    else:
        logger.warning(f"Weighted completion stopped at {max_iters} iterations without converging")
    return model


def lra_storage_ratio(extents: Sequence[int], ranks: Sequence[int]) -> float:
    """Storage of the Tucker format relative to the dense tensor."""
    extents = [int(i) for i in extents]
    ranks = [int(r) for r in ranks]
    compressed = sum(r * i for r, i in zip(ranks, extents)) + int(np.prod(ranks))
    return compressed / float(np.prod(extents))


def save_model(path: PathLike, model: TuckerModel) -> None:
    with open(path, "wb") as f:
        f.write(model_to_bytes(model.core, model.factors, model.fixed))


def load_model(path: PathLike) -> TuckerModel:
    with open(path, "rb") as f:
        core, factors, fixed = model_from_bytes(f.read())
    return TuckerModel(core, factors, fixed)
