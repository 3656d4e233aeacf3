"""
Nonnegative Tucker decomposition solvers.

Every block update works on a quadratic subproblem. For factor n:

    min_A  1/2 tr(A T A^T) - tr(A^T Q) + fro_n/2 ||A||^2

with T = X_(n) G_(n)^T and Q = Y_(n) B^(n); for the core:

    min_G  1/2 <G, G x_1 A1^T A1 ... x_N AN^T AN> - <G, C> + l1 sum(G)

with C = Y x_1 A1^T ... x_N AN^T. When the data is a low-rank approximation
(G~, A~) the data terms are built from small matrices only:
Q = A~ X~_(n) G_(n)^T and C = G~ x_1 A1^T A~1 ... x_N AN^T A~N.
"""
import logging
import math
import time
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Sequence, Union

import numpy as np
import scipy.linalg as la

from .lra import TuckerModel, compute_lra, reconstruct
from .tensor_core import (
    DenseTensor,
    Matrix,
    ShapeError,
    as_tensor,
    elementwise_divide,
    fold,
    frobenius_norm,
    mode_product,
    multi_mode_product,
    project_nonneg,
    unfold,
)

logger = logging.getLogger(__name__)

EPS_DIAG = 1e-12
RIDGE_SCALE = 1e-10
REVIVE_SCALE = 1e-3

DataSource = Union[DenseTensor, TuckerModel]


class Algorithm(str, Enum):
    MU = "mu"
    HALS = "hals"
    APG = "apg"
    ALS = "als"


class Constraint(str, Enum):
    NONNEGATIVE = "nonnegative"
    UNCONSTRAINED = "unconstrained"
    FIXED_IDENTITY = "fixed_identity"


@dataclass
class SolverConfig:
    """Algorithm choice, constraints, penalties and stopping policy of `solve`."""
    ntd_ranks: tuple[int, ...]
    algorithm: Algorithm = Algorithm.HALS
    use_lra: bool = True
    lra_ranks: Optional[tuple[int, ...]] = None
    lra_method: str = "hosvd"
    oversampling: int = 5
    mode_constraints: Optional[tuple[Constraint, ...]] = None
    core_constraint: Constraint = Constraint.NONNEGATIVE
    l1_core: float = 0.0
    fro_factor: Optional[tuple[float, ...]] = None
    inner_iters: int = 20
    outer_iters: int = 500
    tol: float = 1e-6
    seed: Optional[int] = 0
    hals_literal: bool = False
    apg_monotone: bool = True
    fit_window: int = 10

    def __post_init__(self):
        self.ntd_ranks = tuple(int(r) for r in self.ntd_ranks)
        order = len(self.ntd_ranks)
        if order < 1 or any(r < 1 for r in self.ntd_ranks):
            raise ValueError(f"NTD ranks must be positive, got {self.ntd_ranks}")
        self.algorithm = Algorithm(self.algorithm)
        if self.lra_ranks is not None:
            self.lra_ranks = tuple(int(r) for r in self.lra_ranks)
            if len(self.lra_ranks) != order or any(r < 1 for r in self.lra_ranks):
                raise ValueError(f"LRA ranks {self.lra_ranks} do not match NTD ranks {self.ntd_ranks}")
        if self.mode_constraints is None:
            self.mode_constraints = (Constraint.NONNEGATIVE,) * order
        self.mode_constraints = tuple(Constraint(c) for c in self.mode_constraints)
        if len(self.mode_constraints) != order:
            raise ValueError(f"Expected {order} mode constraints, got {len(self.mode_constraints)}")
        self.core_constraint = Constraint(self.core_constraint)
        if self.core_constraint is Constraint.FIXED_IDENTITY:
            raise ValueError("The core cannot be fixed to an identity")
        if self.fro_factor is None:
            self.fro_factor = (0.0,) * order
        self.fro_factor = tuple(float(x) for x in self.fro_factor)
        if len(self.fro_factor) != order:
            raise ValueError(f"Expected {order} Frobenius penalties, got {len(self.fro_factor)}")
        if self.l1_core < 0 or any(x < 0 for x in self.fro_factor):
            raise ValueError("Penalty weights must be nonnegative")
        if self.inner_iters < 1 or self.outer_iters < 1:
            raise ValueError("inner_iters and outer_iters must be at least 1")
        if self.tol < 0:
            raise ValueError(f"Tolerance must be nonnegative, got {self.tol}")
        if self.fit_window < 0:
            raise ValueError(f"Fit window must be nonnegative, got {self.fit_window}")

    @property
    def order(self) -> int:
        return len(self.ntd_ranks)

    def resolved_lra_ranks(self) -> tuple[int, ...]:
        return self.lra_ranks if self.lra_ranks is not None else self.ntd_ranks


@dataclass
class GradientWorkspace:
    """Small matrices and tensors shared by the LRA gradients of one block.

    For mode n, `x` = G x_{p!=n} (Ap^T Ap) and `x_tilde` = G~ x_{p!=n} (Ap^T A~p).
    For the core (mode None) every mode has been applied.
    """
    mode: Optional[int]
    grams: list[Matrix]
    crosses: list[Matrix]
    x: DenseTensor
    x_tilde: DenseTensor


@dataclass
class ApgState:
    extrapolation: np.ndarray
    alpha: float = 1.0
    lipschitz: float = 1.0

    def __post_init__(self):
        if self.alpha < 1:
            raise ValueError(f"APG momentum must be >= 1, got {self.alpha}")
        if self.lipschitz <= 0:
            raise ValueError(f"Lipschitz constant must be positive, got {self.lipschitz}")


@dataclass(frozen=True)
class DecompositionResult:
    model: TuckerModel
    cost_trace: tuple[float, ...]
    fit_trace: tuple[float, ...]
    elapsed_trace: tuple[float, ...]
    lra_seconds: float
    ntd_seconds: float
    iterations: int
    termination: str
    flags: tuple[str, ...] = ()
    lra: Optional[TuckerModel] = None
    final_fit: Optional[float] = None


@dataclass
class MultiplyCounter:
    """Counts scalar multiplications of instrumented matrix and mode products."""
    multiplies: int = 0

    def matmul(self, a: Matrix, b: Matrix) -> Matrix:
        self.multiplies += a.shape[0] * a.shape[1] * b.shape[1]
        return a @ b

    def mode_product(self, t: DenseTensor, a: Matrix, n: int) -> DenseTensor:
        self.multiplies += a.shape[0] * t.size
        return mode_product(t, a, n)


def _matmul(a: Matrix, b: Matrix, counter: Optional[MultiplyCounter]) -> Matrix:
    return counter.matmul(a, b) if counter else a @ b


def _mode_product(t: DenseTensor, a: Matrix, n: int, counter: Optional[MultiplyCounter]) -> DenseTensor:
    return counter.mode_product(t, a, n) if counter else mode_product(t, a, n)


# ---------------------------------------------------------------------------
# Cost and gradients
# ---------------------------------------------------------------------------

def _check_conformable(source: DataSource, model: TuckerModel) -> None:
    extents = source.extents if isinstance(source, TuckerModel) else source.shape
    if tuple(extents) != model.extents:
        raise ShapeError(f"Model extents {model.extents} do not match data extents {tuple(extents)}")


def _penalties(model: TuckerModel, cfg: Optional[SolverConfig]) -> float:
    if cfg is None:
        return 0.0
    value = cfg.l1_core * float(np.sum(np.abs(model.core)))
    for lam, factor in zip(cfg.fro_factor, model.factors):
        value += 0.5 * lam * float(np.sum(factor * factor))
    return value


def _lra_norm_sq(lra: TuckerModel) -> float:
    inner = multi_mode_product(lra.core, [f.T @ f for f in lra.factors])
    return float(np.sum(lra.core * inner))


def data_misfit(source: DataSource, model: TuckerModel) -> float:
    """1/2 ||Y - Yhat||^2, through Gram and cross matrices when `source` is an LRA."""
    _check_conformable(source, model)
    if isinstance(source, TuckerModel):
        grams = [f.T @ f for f in model.factors]
        crosses = [a.T @ at for a, at in zip(model.factors, source.factors)]
        cross_term = float(np.sum(model.core * multi_mode_product(source.core, crosses)))
        model_term = float(np.sum(model.core * multi_mode_product(model.core, grams)))
        return 0.5 * (_lra_norm_sq(source) - 2.0 * cross_term + model_term)
    residual = source - reconstruct(model)
    return 0.5 * float(np.sum(residual * residual))


def cost(source: DataSource, model: TuckerModel, cfg: Optional[SolverConfig] = None) -> float:
    """Penalized least-squares NTD cost."""
    return data_misfit(source, model) + _penalties(model, cfg)


def _fro(cfg: Optional[SolverConfig], n: int) -> float:
    return cfg.fro_factor[n] if cfg is not None else 0.0


def _l1(cfg: Optional[SolverConfig]) -> float:
    return cfg.l1_core if cfg is not None else 0.0


def _gram_term(core: DenseTensor, grams: Sequence[Matrix], n: int) -> Matrix:
    """T = X_(n) G_(n)^T with X = G x_{p!=n} grams[p]; equals B^T B."""
    x = multi_mode_product(core, grams, skip=n)
    return unfold(x, n) @ unfold(core, n).T


def grad_factor_direct(
    data: DenseTensor, model: TuckerModel, n: int, cfg: Optional[SolverConfig] = None
) -> Matrix:
    """A B^T B - Y_(n) B with B = (kron_{p!=n} Ap) G_(n)^T, evaluated by mode products."""
    _check_conformable(data, model)
    a = model.factors[n]
    grams = [f.T @ f for f in model.factors]
    t = _gram_term(model.core, grams, n)
    projected = multi_mode_product(data, model.factors, transpose=True, skip=n)
    q = unfold(projected, n) @ unfold(model.core, n).T
    return a @ t - q + _fro(cfg, n) * a


def grad_core_direct(
    data: DenseTensor, model: TuckerModel, cfg: Optional[SolverConfig] = None
) -> DenseTensor:
    _check_conformable(data, model)
    grams = [f.T @ f for f in model.factors]
    model_term = multi_mode_product(model.core, grams)
    data_term = multi_mode_product(data, model.factors, transpose=True)
    return model_term - data_term + _l1(cfg)


def build_workspace(
    lra: TuckerModel,
    model: TuckerModel,
    n: Optional[int] = None,
    grams: Optional[Sequence[Optional[Matrix]]] = None,
    crosses: Optional[Sequence[Optional[Matrix]]] = None,
    counter: Optional[MultiplyCounter] = None,
) -> GradientWorkspace:
    """
    Compute the Gram/cross matrices and the tensors X, X~ for one block.

    Args:
        lra: the low-rank approximation (G~, A~)
        model: the current estimate (G, A)
        n: mode whose factor gradient is wanted; None for the core
        grams: cached Ap^T Ap, entries left None are computed
        crosses: cached Ap^T A~p, entries left None are computed
        counter: optional multiply counter

    Returns:
        GradientWorkspace for the block; only core-sized tensors are formed.
    """
    _check_conformable(lra, model)
    order = model.order
    if n is not None and not 0 <= n < order:
        raise ShapeError(f"Mode {n} is invalid for a model of order {order}")
    grams = list(grams) if grams is not None else [None] * order
    crosses = list(crosses) if crosses is not None else [None] * order
    for p in range(order):
        a = model.factors[p]
        if grams[p] is None:
            grams[p] = _matmul(a.T, a, counter)
        if crosses[p] is None:
            crosses[p] = _matmul(a.T, lra.factors[p], counter)

    x, x_tilde = model.core, lra.core
    for p in range(order):
        if p == n:
            continue
        x = _mode_product(x, grams[p], p, counter)
        x_tilde = _mode_product(x_tilde, crosses[p], p, counter)
    return GradientWorkspace(mode=n, grams=grams, crosses=crosses, x=x, x_tilde=x_tilde)


def _lra_factor_terms(
    ws: GradientWorkspace, lra: TuckerModel, model: TuckerModel, n: int,
    counter: Optional[MultiplyCounter] = None,
) -> tuple[Matrix, Matrix]:
    if ws.mode != n:
        raise ValueError(f"Workspace was built for mode {ws.mode}, not for mode {n}")
    core_t = unfold(model.core, n).T
    t = _matmul(unfold(ws.x, n), core_t, counter)
    q = _matmul(lra.factors[n], _matmul(unfold(ws.x_tilde, n), core_t, counter), counter)
    return t, q


def grad_factor_lra(
    ws: GradientWorkspace,
    lra: TuckerModel,
    model: TuckerModel,
    n: int,
    cfg: Optional[SolverConfig] = None,
    counter: Optional[MultiplyCounter] = None,
) -> Matrix:
    """A (X_(n) G_(n)^T) - A~ (X~_(n) G_(n)^T), plus fro_n A when penalized."""
    t, q = _lra_factor_terms(ws, lra, model, n, counter)
    a = model.factors[n]
    return _matmul(a, t, counter) - q + _fro(cfg, n) * a


def _lra_core_terms(ws: GradientWorkspace) -> tuple[DenseTensor, DenseTensor]:
    if ws.mode is None:
        return ws.x, ws.x_tilde
    m = ws.mode
    return mode_product(ws.x, ws.grams[m], m), mode_product(ws.x_tilde, ws.crosses[m], m)


def grad_core_lra(
    ws: GradientWorkspace, lra: TuckerModel, model: TuckerModel, cfg: Optional[SolverConfig] = None
) -> DenseTensor:
    """X x_n (An^T An) - X~ x_n (An^T A~n), plus l1 when penalized."""
    _check_conformable(lra, model)
    model_term, data_term = _lra_core_terms(ws)
    return model_term - data_term + _l1(cfg)


def gradient_flop_estimate(order: int, extent: int, rank: int, with_lra: bool) -> int:
    """Multiplications needed for one gradient with equal extents and ranks."""
    if order < 1 or extent < 1 or rank < 1:
        raise ValueError("order, extent and rank must be positive")
    if with_lra:
        return 2 * extent * rank ** 2 + 2 * rank ** (order + 1)
    return (
        extent * rank ** 2
        + rank ** (order + 1)
        + sum(rank ** k * extent ** (order + 1 - k) for k in range(1, order + 1))
    )


# ---------------------------------------------------------------------------
# Block subproblems
# ---------------------------------------------------------------------------

@dataclass
class FactorSubproblem:
    gram: Matrix
    cross: Matrix
    fro: float = 0.0
    project_cross: bool = False

    def gradient(self, a: Matrix) -> Matrix:
        return a @ self.gram - self.cross + self.fro * a

    def objective(self, a: Matrix) -> float:
        return float(
            0.5 * np.sum(a * (a @ self.gram)) - np.sum(a * self.cross) + 0.5 * self.fro * np.sum(a * a)
        )

    def lipschitz(self) -> float:
        return frobenius_norm(self.gram) + self.fro


@dataclass
class CoreSubproblem:
    grams: list[Matrix]
    target: DenseTensor
    l1: float = 0.0

    def model_term(self, g: DenseTensor) -> DenseTensor:
        return multi_mode_product(g, self.grams)

    def gradient(self, g: DenseTensor) -> DenseTensor:
        return self.model_term(g) - self.target + self.l1

    def objective(self, g: DenseTensor) -> float:
        return float(
            0.5 * np.sum(g * self.model_term(g)) - np.sum(g * self.target) + self.l1 * np.sum(np.abs(g))
        )

    def lipschitz(self) -> float:
        return math.prod(frobenius_norm(gram) for gram in self.grams)


def _all_grams(model: TuckerModel) -> list[Matrix]:
    return [f.T @ f for f in model.factors]


def factor_subproblem(
    source: DataSource,
    model: TuckerModel,
    n: int,
    cfg: Optional[SolverConfig] = None,
    grams: Optional[Sequence[Optional[Matrix]]] = None,
    crosses: Optional[Sequence[Optional[Matrix]]] = None,
) -> FactorSubproblem:
    _check_conformable(source, model)
    if isinstance(source, TuckerModel):
        ws = build_workspace(source, model, n, grams=grams, crosses=crosses)
        t, q = _lra_factor_terms(ws, source, model, n)
        project = True
    else:
        grams = [g if g is not None else f.T @ f for g, f in zip(grams or [None] * model.order, model.factors)]
        t = _gram_term(model.core, grams, n)
        projected = multi_mode_product(source, model.factors, transpose=True, skip=n)
        q = unfold(projected, n) @ unfold(model.core, n).T
        # Direct data is nonnegative; Q can only turn negative through unconstrained blocks
        project = cfg is not None and (
            Constraint.UNCONSTRAINED in cfg.mode_constraints
            or cfg.core_constraint is Constraint.UNCONSTRAINED
        )
    return FactorSubproblem(gram=t, cross=q, fro=_fro(cfg, n), project_cross=project)


def core_subproblem(
    source: DataSource,
    model: TuckerModel,
    cfg: Optional[SolverConfig] = None,
    grams: Optional[Sequence[Optional[Matrix]]] = None,
    crosses: Optional[Sequence[Optional[Matrix]]] = None,
) -> CoreSubproblem:
    _check_conformable(source, model)
    if isinstance(source, TuckerModel):
        ws = build_workspace(source, model, None, grams=grams, crosses=crosses)
        return CoreSubproblem(grams=ws.grams, target=ws.x_tilde, l1=_l1(cfg))
    grams = [g if g is not None else f.T @ f for g, f in zip(grams or [None] * model.order, model.factors)]
    target = multi_mode_product(source, model.factors, transpose=True)
    return CoreSubproblem(grams=grams, target=target, l1=_l1(cfg))


def lipschitz_constants(model: TuckerModel, ws: GradientWorkspace, n: Optional[int] = None) -> float:
    """
    Lipschitz constant of a block gradient.

    ||T||_F for factor n, and prod_n ||An^T An||_F for the core: the Frobenius
    norm of F^T F = kron_n(An^T An) factorizes over the Kronecker product and
    bounds its spectral norm.
    """
    if n is None:
        return math.prod(frobenius_norm(g) for g in ws.grams)
    if ws.mode != n:
        raise ValueError(f"Workspace was built for mode {ws.mode}, not for mode {n}")
    t = unfold(ws.x, n) @ unfold(model.core, n).T
    return frobenius_norm(t)


# ---------------------------------------------------------------------------
# Update rules
# ---------------------------------------------------------------------------

def _mu_factor_step(a: Matrix, sub: FactorSubproblem) -> Matrix:
    denominator = a @ sub.gram + sub.fro * a
    if not sub.project_cross:
        return a * elementwise_divide(sub.cross, denominator)
    # negative part of Q moves to the denominator so the cost stays non-increasing
    return a * elementwise_divide(project_nonneg(sub.cross), denominator + project_nonneg(-sub.cross))


def _mu_core_step(g: DenseTensor, sub: CoreSubproblem) -> DenseTensor:
    denominator = sub.model_term(g) + sub.l1 + project_nonneg(-sub.target)
    return g * elementwise_divide(project_nonneg(sub.target), denominator)


def _hals_sweep(
    a: Matrix, sub: FactorSubproblem, literal: bool = False, rng: Optional[np.random.Generator] = None
) -> tuple[Matrix, list[int], list[int]]:
    """
    One column sweep. Returns the new factor, the columns skipped for a
    vanishing t_rr and, when `rng` is given, the columns that were projected
    to zero and redrawn at the scale of the surviving columns.
    """
    a = a.copy()
    t, q, fro = sub.gram, sub.cross, sub.fro
    skipped, reset = [], []
    for r in range(a.shape[1]):
        trr = t[r, r]
        if trr < EPS_DIAG:
            skipped.append(r)
            continue
        residual = q[:, r] - a @ t[:, r]
        if literal:
            a[:, r] = a[:, r] + project_nonneg(residual - fro * a[:, r]) / (trr + fro)
        else:
            a[:, r] = project_nonneg((residual + trr * a[:, r]) / (trr + fro))
        if rng is not None and not np.any(a[:, r]):
            norms = np.linalg.norm(a, axis=0)
            scale = float(np.mean(norms[norms > 0])) if np.any(norms > 0) else 1.0
            column = rng.random(a.shape[0])
            a[:, r] = scale * column / max(np.linalg.norm(column), np.finfo(float).tiny)
            reset.append(r)
    return a, skipped, reset


def _solve_right(system: Matrix, rhs: Matrix) -> tuple[Matrix, bool]:
    """Solve X @ system = rhs for symmetric PSD `system`; ridge-regularize when singular."""
    size = system.shape[0]
    regularized = False
    try:
        factor = la.cho_factor(system)
        diag = np.abs(np.diag(factor[0]))
        if diag.min() ** 2 < EPS_DIAG * max(diag.max() ** 2, np.finfo(float).tiny):
            raise la.LinAlgError("ill-conditioned")
    except la.LinAlgError:
        ridge = RIDGE_SCALE * float(np.trace(system)) / size
        ridge = ridge if ridge > 0 else RIDGE_SCALE
        factor = la.cho_factor(system + ridge * np.eye(size))
        regularized = True
    return la.cho_solve(factor, rhs.T).T, regularized


def _ls_factor(sub: FactorSubproblem) -> tuple[Matrix, bool]:
    system = sub.gram + sub.fro * np.eye(sub.gram.shape[0])
    return _solve_right(system, sub.cross)


def _ls_core(sub: CoreSubproblem) -> tuple[DenseTensor, bool]:
    g = sub.target - sub.l1
    regularized = False
    for n, gram in enumerate(sub.grams):
        solved, flag = _solve_right(gram, unfold(g, n).T)
        g = fold(solved.T, n, g.shape)
        regularized = regularized or flag
    return g, regularized


def _as_source(source: DataSource) -> DataSource:
    return source if isinstance(source, TuckerModel) else as_tensor(source)


def mu_update_factor(
    model: TuckerModel, n: int, source: DataSource, cfg: Optional[SolverConfig] = None
) -> Matrix:
    """
    A <- A * P+(Q) / (A T + P+(-Q) + eps).

    Only LRA data or unconstrained blocks make Q negative; its negative part
    then joins the denominator, which keeps the cost non-increasing. For
    nonnegative Q this is the plain rule A * Q / (A T + eps).
    """
    sub = factor_subproblem(_as_source(source), model, n, cfg)
    return _mu_factor_step(model.factors[n], sub)


def mu_update_core(model: TuckerModel, source: DataSource, cfg: Optional[SolverConfig] = None) -> DenseTensor:
    """G <- G * P+(C) / (G x_n An^T An + l1 + P+(-C) + eps), the negative part of C as for the factors."""
    sub = core_subproblem(_as_source(source), model, cfg)
    return _mu_core_step(model.core, sub)


def hals_update_factor(
    model: TuckerModel, n: int, source: DataSource, cfg: Optional[SolverConfig] = None
) -> Matrix:
    """One column-by-column HALS sweep over factor n."""
    sub = factor_subproblem(_as_source(source), model, n, cfg)
    a, skipped, _ = _hals_sweep(model.factors[n], sub, literal=cfg.hals_literal if cfg else False)
    if skipped:
        logger.warning(f"HALS skipped columns {skipped} of mode {n}: vanishing diagonal of T")
    return a


def apg_update_block(
    block: np.ndarray,
    gradient: Callable[[np.ndarray], np.ndarray],
    lipschitz: float,
    state: Optional[ApgState] = None,
    iters: int = 1,
    objective: Optional[Callable[[np.ndarray], float]] = None,
    project: bool = True,
) -> tuple[np.ndarray, ApgState]:
    """
    Accelerated projected gradient steps on one block.

    Args:
        block: current value of the block
        gradient: gradient of the smooth block objective (plus any linear penalty)
        lipschitz: step size denominator, at least the gradient's Lipschitz constant
        state: extrapolation point and momentum carried between calls
        iters: number of steps
        objective: when given, a candidate is accepted only if it does not
            increase the objective (monotone variant); otherwise the plain
            recursion E_{k+1} = G_k + (alpha_k - 1)/alpha_{k+1} (G_k - G_{k-1}) runs
        project: apply the nonnegative projection

    Returns:
        Tuple of the updated block and the new state.
    """
    if lipschitz <= 0:
        raise ValueError(f"Lipschitz constant must be positive, got {lipschitz}")
    if state is None:
        state = ApgState(extrapolation=block.copy(), alpha=1.0, lipschitz=lipschitz)
    current, extrapolation, alpha = block, state.extrapolation, state.alpha
    current_value = objective(current) if objective is not None else None

    for _ in range(iters):
        candidate = extrapolation - gradient(extrapolation) / lipschitz
        if project:
            candidate = project_nonneg(candidate)
        alpha_next = (1.0 + math.sqrt(4.0 * alpha * alpha + 1.0)) / 2.0
        if objective is None:
            extrapolation = candidate + ((alpha - 1.0) / alpha_next) * (candidate - current)
            current = candidate
        else:
            candidate_value = objective(candidate)
            accepted = candidate if candidate_value <= current_value else current
            if candidate_value <= current_value:
                current_value = candidate_value
            extrapolation = (
                accepted
                + (alpha / alpha_next) * (candidate - accepted)
                + ((alpha - 1.0) / alpha_next) * (accepted - current)
            )
            current = accepted
        alpha = alpha_next
    return current, ApgState(extrapolation=extrapolation, alpha=alpha, lipschitz=lipschitz)


def als_update_factor(
    model: TuckerModel, n: int, source: DataSource, cfg: Optional[SolverConfig] = None
) -> tuple[Matrix, bool]:
    """
    Least-squares factor update A = Q T^{-1}, projected when mode n is Nonnegative.

    Returns:
        Tuple of the new factor and whether the solve had to be ridge-regularized.
    """
    sub = factor_subproblem(_as_source(source), model, n, cfg)
    a, regularized = _ls_factor(sub)
    if cfg is None or cfg.mode_constraints[n] is Constraint.NONNEGATIVE:
        a = project_nonneg(a)
    return a, regularized


def als_update_core(
    model: TuckerModel, source: DataSource, cfg: Optional[SolverConfig] = None
) -> tuple[DenseTensor, bool]:
    """Least-squares core update, G~ x_n [(An^T An)^{-1} An^T A~n] for LRA data."""
    sub = core_subproblem(_as_source(source), model, cfg)
    g, regularized = _ls_core(sub)
    if cfg is None or cfg.core_constraint is Constraint.NONNEGATIVE:
        g = project_nonneg(g)
    return g, regularized


def als_update(
    model: TuckerModel, source: DataSource, n: Optional[int] = None, cfg: Optional[SolverConfig] = None
) -> tuple[np.ndarray, bool]:
    """Least-squares update of factor n, or of the core when `n` is None."""
    if n is None:
        return als_update_core(model, source, cfg)
    return als_update_factor(model, n, source, cfg)


# ---------------------------------------------------------------------------
# Outer loop
# ---------------------------------------------------------------------------

def _relative_change(old: np.ndarray, new: np.ndarray) -> float:
    diff = new - old
    return float(np.sum(diff * diff)) / max(float(np.sum(old * old)), np.finfo(float).tiny)


class _FlagLog:
    def __init__(self):
        self.flags: list[str] = []

    def add(self, flag: str) -> None:
        if flag not in self.flags:
            self.flags.append(flag)
            logger.warning(f"Solver flag raised: {flag}")


def _fit_settled(fit_trace: Sequence[float], cfg: SolverConfig) -> bool:
    """True when Fit gained less than 100 * tol percentage points over the last `fit_window` iterations."""
    if cfg.fit_window == 0:
        return True
    if len(fit_trace) <= cfg.fit_window:
        return False
    return fit_trace[-1] - fit_trace[-1 - cfg.fit_window] < 100.0 * cfg.tol


def _update_factor_block(
    a: Matrix,
    sub: FactorSubproblem,
    n: int,
    cfg: SolverConfig,
    flags: _FlagLog,
    rng: Optional[np.random.Generator] = None,
) -> tuple[Matrix, set[int]]:
    """Update factor n; also returns the HALS columns whose t_rr vanished."""
    if cfg.mode_constraints[n] is Constraint.UNCONSTRAINED or cfg.algorithm is Algorithm.ALS:
        new, regularized = _ls_factor(sub)
        if regularized:
            flags.add(f"ridge_factor_mode_{n}")
        if cfg.mode_constraints[n] is Constraint.NONNEGATIVE:
            new = project_nonneg(new)
        return new, set()

    if cfg.algorithm is Algorithm.APG:
        new, _ = apg_update_block(
            a, sub.gradient, max(sub.lipschitz(), EPS_DIAG), iters=cfg.inner_iters,
            objective=sub.objective if cfg.apg_monotone else None,
        )
        return new, set()

    collapsed: set[int] = set()
    for _ in range(cfg.inner_iters):
        if cfg.algorithm is Algorithm.MU:
            new = _mu_factor_step(a, sub)
        else:
            new, skipped, reset = _hals_sweep(a, sub, literal=cfg.hals_literal, rng=rng)
            for r in skipped:
                flags.add(f"hals_skipped_column_{r}_mode_{n}")
            for r in reset:
                flags.add(f"hals_reset_column_{r}_mode_{n}")
            collapsed.update(skipped)
        inner_change = _relative_change(a, new)
        a = new
        if inner_change < 0.1 * cfg.tol:
            break
    return a, collapsed


def _revive_core_slices(core: DenseTensor, n: int, slices: set[int]) -> None:
    """Refill mode-n core slices that collapsed to zero with a small fraction of the mean core entry."""
    level = REVIVE_SCALE * max(float(np.mean(np.abs(core))), EPS_DIAG)
    view = np.moveaxis(core, n, 0)
    for r in sorted(slices):
        view[r] = np.maximum(view[r], level)


def _update_core_block(g: DenseTensor, sub: CoreSubproblem, cfg: SolverConfig, flags: _FlagLog) -> DenseTensor:
    if cfg.core_constraint is Constraint.UNCONSTRAINED or cfg.algorithm is Algorithm.ALS:
        new, regularized = _ls_core(sub)
        if regularized:
            flags.add("ridge_core")
        if cfg.core_constraint is Constraint.NONNEGATIVE:
            new = project_nonneg(new)
        return new

    if cfg.algorithm is Algorithm.APG:
        new, _ = apg_update_block(
            g, sub.gradient, max(sub.lipschitz(), EPS_DIAG), iters=cfg.inner_iters,
            objective=sub.objective if cfg.apg_monotone else None,
        )
        return new

    # MU-NTD and HALS-NTD both update the core multiplicatively
    for _ in range(cfg.inner_iters):
        new = _mu_core_step(g, sub)
        inner_change = _relative_change(g, new)
        g = new
        if inner_change < 0.1 * cfg.tol:
            break
    return g


def initialize_model(extents: Sequence[int], cfg: SolverConfig, source: DataSource) -> TuckerModel:
    """Uniform(0, 1) factors and core from the config seed, then one core pass to fix the scale."""
    rng = np.random.default_rng(cfg.seed)
    factors = []
    for n, (extent, rank) in enumerate(zip(extents, cfg.ntd_ranks)):
        if cfg.mode_constraints[n] is Constraint.FIXED_IDENTITY:
            factors.append(np.eye(extent))
        else:
            factors.append(rng.random((extent, rank)))
    core = rng.random(cfg.ntd_ranks)
    fixed = [c is Constraint.FIXED_IDENTITY for c in cfg.mode_constraints]
    model = TuckerModel(core, factors, fixed)
    sub = core_subproblem(source, model, cfg)
    if cfg.core_constraint is Constraint.NONNEGATIVE:
        model.core = _mu_core_step(model.core, sub)
    else:
        model.core = _ls_core(sub)[0]
    return model


def _validate_problem(extents: Sequence[int], cfg: SolverConfig, dense: Optional[DenseTensor]) -> None:
    if len(extents) != cfg.order:
        raise ShapeError(f"Data of order {len(extents)} given {cfg.order} ranks")
    for n, (rank, extent) in enumerate(zip(cfg.ntd_ranks, extents)):
        if rank > extent:
            raise ValueError(f"Rank {rank} exceeds extent {extent} of mode {n}")
        if cfg.mode_constraints[n] is Constraint.FIXED_IDENTITY and rank != extent:
            raise ValueError(f"Identity-fixed mode {n} needs rank equal to its extent {extent}")
    if cfg.use_lra:
        for n, (rank, extent) in enumerate(zip(cfg.resolved_lra_ranks(), extents)):
            if rank > extent:
                raise ValueError(f"LRA rank {rank} exceeds extent {extent} of mode {n}")
    # Direct MU is the only path whose numerator uses the raw data unprojected
    all_nonneg = cfg.core_constraint is Constraint.NONNEGATIVE and all(
        c is not Constraint.UNCONSTRAINED for c in cfg.mode_constraints
    )
    direct_mu = cfg.algorithm is Algorithm.MU and not cfg.use_lra
    if dense is not None and direct_mu and all_nonneg and np.any(dense < 0):
        raise ValueError(
            "Data has negative entries but direct MU with every block nonnegative needs nonnegative data; "
            "use the LRA path or another algorithm"
        )


def solve(
    data: DataSource, cfg: SolverConfig, init: Optional[TuckerModel] = None
) -> DecompositionResult:
    """
    Run NTD with block coordinate descent.

    Each outer iteration updates the factors of modes 1..N and then the core,
    every block up to `inner_iters` times. Identity-fixed modes are never
    touched. Stops when the largest relative squared change of a block falls
    below `tol` and Fit has settled over the last `fit_window` iterations, or
    after `outer_iters` sweeps. HALS columns projected to zero are redrawn and
    core slices behind a vanishing t_rr are refilled, both recorded in `flags`.

    Args:
        data: dense tensor, or a TuckerModel used directly as the LRA
        cfg: solver configuration
        init: optional starting model (copied)

    Returns:
        DecompositionResult with the model, traces and phase timings.
    """
    if isinstance(data, TuckerModel):
        lra: Optional[TuckerModel] = data
        dense = None if cfg.use_lra else reconstruct(data)
        extents = data.extents
    else:
        lra = None
        dense = as_tensor(data)
        extents = dense.shape
    _validate_problem(extents, cfg, dense)

    lra_start = time.perf_counter()
    if cfg.use_lra and lra is None:
        lra = compute_lra(
            dense, cfg.resolved_lra_ranks(), method=cfg.lra_method,
            oversampling=cfg.oversampling, seed=cfg.seed,
        )
        logger.info(f"LRA ({cfg.lra_method}) at ranks {lra.ranks} done")
    lra_seconds = time.perf_counter() - lra_start if cfg.use_lra and dense is not None else 0.0

    source: DataSource = lra if cfg.use_lra else dense
    ntd_start = time.perf_counter()
    if init is not None:
        model = init.copy()
        _check_conformable(source, model)
        if model.ranks != cfg.ntd_ranks:
            raise ShapeError(f"Initial model ranks {model.ranks} differ from {cfg.ntd_ranks}")
    else:
        model = initialize_model(extents, cfg, source)

    source_norm = math.sqrt(_lra_norm_sq(lra)) if cfg.use_lra else frobenius_norm(dense)
    lra_factors = lra.factors if cfg.use_lra else None
    flags = _FlagLog()
    cost_trace, fit_trace, elapsed_trace = [], [], []
    termination = "max_iterations"
    iteration = 0

    rng = np.random.default_rng(cfg.seed)
    grams = [f.T @ f for f in model.factors]
    crosses = [a.T @ at for a, at in zip(model.factors, lra_factors)] if lra_factors else None

    for iteration in range(1, cfg.outer_iters + 1):
        largest_change = 0.0
        for n in range(cfg.order):
            if cfg.mode_constraints[n] is Constraint.FIXED_IDENTITY:
                continue
            sub = factor_subproblem(source, model, n, cfg, grams=grams, crosses=crosses)
            new, collapsed = _update_factor_block(model.factors[n], sub, n, cfg, flags, rng=rng)
            if collapsed and cfg.core_constraint is Constraint.NONNEGATIVE:
                _revive_core_slices(model.core, n, collapsed)
            largest_change = max(largest_change, _relative_change(model.factors[n], new))
            model.factors[n] = new
            grams[n] = new.T @ new
            if crosses is not None:
                crosses[n] = new.T @ lra_factors[n]

        sub = core_subproblem(source, model, cfg, grams=grams, crosses=crosses)
        new_core = _update_core_block(model.core, sub, cfg, flags)
        largest_change = max(largest_change, _relative_change(model.core, new_core))
        model.core = new_core

        misfit = data_misfit(source, model)
        cost_trace.append(misfit + _penalties(model, cfg))
        fit_trace.append(100.0 * (1.0 - math.sqrt(max(2.0 * misfit, 0.0)) / max(source_norm, np.finfo(float).tiny)))
        elapsed_trace.append(1000.0 * (time.perf_counter() - ntd_start))
        logger.debug(f"Iteration {iteration}: cost {cost_trace[-1]:.6e}, fit {fit_trace[-1]:.4f}%")

        if largest_change < cfg.tol and _fit_settled(fit_trace, cfg):
            termination = "converged"
            break

    ntd_seconds = time.perf_counter() - ntd_start
    logger.info(
        f"{cfg.algorithm.value.upper()}-NTD ({'LRA' if cfg.use_lra else 'direct'}) "
        f"stopped after {iteration} iterations ({termination})"
    )
    final_fit = None
    if dense is not None:
        final_fit = 100.0 * (1.0 - frobenius_norm(dense - reconstruct(model)) / max(frobenius_norm(dense), np.finfo(float).tiny))
    return DecompositionResult(
        model=model,
        cost_trace=tuple(cost_trace),
        fit_trace=tuple(fit_trace),
        elapsed_trace=tuple(elapsed_trace),
        lra_seconds=lra_seconds,
        ntd_seconds=ntd_seconds,
        iterations=iteration,
        termination=termination,
        flags=tuple(flags.flags),
        lra=lra,
        final_fit=final_fit,
    )
