"""
Synthetic ground truth, recovery metrics and experiment reports.
"""
import csv
import json
import logging
import math
import statistics
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional, Sequence, TextIO

import numpy as np
from scipy.optimize import linear_sum_assignment

from .lra import TuckerModel, reconstruct
from .tensor_core import DenseTensor, Matrix, ShapeError, as_tensor, frobenius_norm, unfold

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
MSIR_CEILING_DB = 300.0
GENERATE_RETRIES = 100

# Standard deviation below which a component counts as constant
_CONSTANT_STD = 1e-12


@dataclass
class SyntheticSpec:
    """Recipe for a random sparse nonnegative Tucker model and its noisy observation.

    `snr_db` None means clean data.
    """
    extents: tuple[int, ...]
    ranks: tuple[int, ...]
    factor_sparsity: float = 0.0
    core_sparsity: float = 0.0
    mean: float = 10.0
    snr_db: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        self.extents = tuple(int(i) for i in self.extents)
        self.ranks = tuple(int(r) for r in self.ranks)
        if len(self.extents) != len(self.ranks) or not self.extents:
            raise ShapeError(f"Extents {self.extents} and ranks {self.ranks} differ in order")
        for n, (i, r) in enumerate(zip(self.extents, self.ranks)):
            if not 1 <= r <= i:
                raise ValueError(f"Rank {r} of mode {n} must lie in [1, {i}]")
        for name in ("factor_sparsity", "core_sparsity"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {value}")
        if self.mean <= 0:
            raise ValueError(f"Exponential mean must be positive, got {self.mean}")
        if self.snr_db is not None and not math.isfinite(self.snr_db):
            raise ValueError(f"SNR must be finite, got {self.snr_db}")

    def to_dict(self) -> dict:
        return asdict(self)


def _has_zero_column(block: np.ndarray) -> bool:
    return bool(np.any(np.all(block == 0, axis=0)))


def _has_zero_slice(block: np.ndarray) -> bool:
    return any(np.any(np.all(unfold(block, n) == 0, axis=1)) for n in range(block.ndim))


def _sparse_exponential(
    rng: np.random.Generator,
    shape: Sequence[int],
    sparsity: float,
    mean: float,
    degenerate: Callable[[np.ndarray], bool],
    what: str,
) -> np.ndarray:
    count = int(np.prod(shape))
    zeros = math.floor(sparsity * count)
    for _ in range(GENERATE_RETRIES):
        block = rng.exponential(mean, size=tuple(shape))
        if zeros:
            flat = block.reshape(-1)
            flat[rng.choice(count, size=zeros, replace=False)] = 0.0
        if not degenerate(block):
            return block
    raise ValueError(
        f"Sparsity {sparsity} leaves a zero column or slice in the {what} after {GENERATE_RETRIES} draws"
    )


def generate(spec: SyntheticSpec) -> tuple[DenseTensor, TuckerModel, DenseTensor]:
    """
    Draw a sparse nonnegative Tucker model and observe it.

    Factor and core entries are exponential with mean `spec.mean`; exactly
    floor(s * count) entries of each block are zeroed at positions sampled
    without replacement. Blocks with a zero column (factors) or a zero slice
    (core) are redrawn.

    Returns:
        Tuple of (clean tensor, ground-truth model, noisy tensor).
    """
    rng = np.random.default_rng(spec.seed)
    factors = [
        _sparse_exponential(rng, (i, r), spec.factor_sparsity, spec.mean, _has_zero_column, f"factor {n}")
        for n, (i, r) in enumerate(zip(spec.extents, spec.ranks))
    ]
    core = _sparse_exponential(rng, spec.ranks, spec.core_sparsity, spec.mean, _has_zero_slice, "core")
    truth = TuckerModel(core, factors)
    clean = reconstruct(truth)
    if spec.snr_db is None:
        return clean, truth, clean.copy()

    noise = rng.standard_normal(clean.shape)
    scale = frobenius_norm(clean) / (frobenius_norm(noise) * 10.0 ** (spec.snr_db / 20.0))
    return clean, truth, clean + scale * noise


def realized_snr_db(clean: DenseTensor, noisy: DenseTensor) -> float:
    noise_norm = frobenius_norm(noisy - clean)
    if noise_norm == 0:
        return math.inf
    return 20.0 * math.log10(frobenius_norm(clean) / noise_norm)


def fit_index(y: DenseTensor, yhat: DenseTensor) -> float:
    """(1 - ||Y - Yhat|| / ||Y||) * 100"""
    y, yhat = as_tensor(y), as_tensor(yhat)
    if y.shape != yhat.shape:
        raise ShapeError(f"Shapes differ: {y.shape} and {yhat.shape}")
    norm = frobenius_norm(y)
    if norm == 0:
        raise ValueError("Fit is undefined for an all-zero data tensor")
    return 100.0 * (1.0 - frobenius_norm(y - yhat) / norm)


def _unit_columns(a: Matrix) -> Matrix:
    norms = np.linalg.norm(a, axis=0)
    return a / np.where(norms > 0, norms, 1.0)


def _greedy_assignment(similarity: Matrix) -> np.ndarray:
    rank = similarity.shape[0]
    perm = np.full(rank, -1)
    used = np.zeros(rank, dtype=bool)
    for flat in np.argsort(-similarity, axis=None, kind="stable"):
        row, col = divmod(int(flat), rank)
        if perm[row] < 0 and not used[col]:
            perm[row] = col
            used[col] = True
    return perm


def match_components(truth: TuckerModel, est: TuckerModel, method: str = "greedy") -> list[np.ndarray]:
    """
    Pair estimated factor columns with true ones, mode by mode.

    Args:
        truth: ground-truth model
        est: estimated model with the same ranks
        method: "greedy" (largest absolute correlation first) or "optimal"
            (Hungarian assignment)

    Returns:
        One permutation per mode; perm[r] is the estimated column matched to true column r.
    """
    if truth.ranks != est.ranks or truth.extents != est.extents:
        raise ShapeError(
            f"Cannot match models of ranks {truth.ranks} / {est.ranks} and extents {truth.extents} / {est.extents}"
        )
    if method not in ("greedy", "optimal"):
        raise ValueError(f"Unknown matching method '{method}', expected 'greedy' or 'optimal'")
    perms = []
    for a, a_hat in zip(truth.factors, est.factors):
        similarity = np.abs(_unit_columns(a).T @ _unit_columns(a_hat))
        if method == "optimal":
            perms.append(linear_sum_assignment(-similarity)[1])
        else:
            perms.append(_greedy_assignment(similarity))
    return perms


@dataclass
class SirReport:
    values: list[np.ndarray]
    excluded: list[tuple[int, int]] = field(default_factory=list)

    @property
    def mean_db(self) -> float:
        kept = np.concatenate([v[np.isfinite(v)] for v in self.values])
        if kept.size == 0:
            raise ValueError("Every component is constant; mSIR is undefined")
        return float(np.mean(kept))


def _standardize(x: np.ndarray) -> Optional[np.ndarray]:
    std = float(np.std(x))
    if std < _CONSTANT_STD:
        return None
    return (x - np.mean(x)) / std


def component_sirs(truth: TuckerModel, est: TuckerModel, method: str = "greedy") -> SirReport:
    """
    Signal-to-interference ratio of every matched component.

    Columns are standardized to zero mean and unit variance, and the sign of
    the estimate is chosen to minimize the error. Exact recoveries are
    capped at MSIR_CEILING_DB; constant columns are excluded (NaN entries).
    """
    perms = match_components(truth, est, method)
    values, excluded = [], []
    for n, (a, a_hat, perm) in enumerate(zip(truth.factors, est.factors, perms)):
        sirs = np.full(a.shape[1], np.nan)
        for r in range(a.shape[1]):
            signal, estimate = _standardize(a[:, r]), _standardize(a_hat[:, perm[r]])
            if signal is None or estimate is None:
                excluded.append((n, r))
                logger.warning(f"Component {r} of mode {n} is constant and is left out of mSIR")
                continue
            error = min(np.linalg.norm(signal - estimate), np.linalg.norm(signal + estimate))
            if error == 0:
                sirs[r] = MSIR_CEILING_DB
            else:
                sirs[r] = min(20.0 * math.log10(np.linalg.norm(signal) / error), MSIR_CEILING_DB)
        values.append(sirs)
    return SirReport(values=values, excluded=excluded)


def msir(truth: TuckerModel, est: TuckerModel, method: str = "greedy") -> float:
    """Mean SIR in dB over all matched components of all modes."""
    return component_sirs(truth, est, method).mean_db


def sparsity(x: np.ndarray) -> float:
    """Fraction of exactly zero entries."""
    x = np.asarray(x)
    return float(np.count_nonzero(x == 0)) / x.size


def kronecker_sparsity_predict(s1: float, s2: float) -> float:
    """Sparsity of A1 (x) A2 from the sparsities of A1 and A2."""
    for s in (s1, s2):
        if not 0.0 <= s <= 1.0:
            raise ValueError(f"Sparsity must lie in [0, 1], got {s}")
    return s1 + s2 - s1 * s2


def kronecker_zero_count(shape1: Sequence[int], z1: int, shape2: Sequence[int], z2: int) -> int:
    """Zero count of A1 (x) A2 given z1 zeros in A1 and z2 zeros in A2."""
    size1, size2 = int(np.prod(shape1)), int(np.prod(shape2))
    if not (0 <= z1 <= size1 and 0 <= z2 <= size2):
        raise ValueError(f"Zero counts ({z1}, {z2}) exceed block sizes ({size1}, {size2})")
    return size2 * z1 + size1 * z2 - z1 * z2


@dataclass(frozen=True)
class ErrorBoundRecord:
    """Residuals around the two-step approximation bound.

    sigma = ||Y - Y~||, eps_direct = ||Y - Yhat_direct||,
    err_lra = ||Y - Yhat_lra|| and slack = 2 sigma + eps_direct - err_lra.
    """
    sigma: float
    eps_direct: float
    err_lra: float
    slack: float


def error_bound_diagnostic(
    y: DenseTensor, lra: TuckerModel, ntd_lra: TuckerModel, ntd_direct: TuckerModel
) -> ErrorBoundRecord:
    """Report how the LRA-based NTD residual sits against 2 sigma + eps (not asserted)."""
    y = as_tensor(y)
    sigma = frobenius_norm(y - reconstruct(lra))
    eps_direct = frobenius_norm(y - reconstruct(ntd_direct))
    err_lra = frobenius_norm(y - reconstruct(ntd_lra))
    return ErrorBoundRecord(sigma, eps_direct, err_lra, 2.0 * sigma + eps_direct - err_lra)


def trial_seed(master: int, index: int) -> int:
    """Independent seed for trial `index`, derived from the master seed."""
    if master < 0 or index < 0:
        raise ValueError(f"Seeds must be nonnegative, got master={master}, index={index}")
    return int(np.random.SeedSequence([master, index]).generate_state(1)[0])


@dataclass
class SolverRecord:
    """One solver run inside an experiment."""
    trial: int
    algorithm: str
    use_lra: bool
    fit: float
    lra_ms: float
    ntd_ms: float
    iterations: int
    termination: str
    sweep_value: Optional[float] = None
    msir_db: Optional[float] = None
    sigma: Optional[float] = None
    bound_slack: Optional[float] = None

    def __post_init__(self):
        if self.fit > 100.0:
            raise ValueError(f"Fit cannot exceed 100%, got {self.fit}")
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, float) and not math.isfinite(value):
                raise ValueError(f"Record field {f.name} is not finite: {value}")

    @property
    def elapsed_ms(self) -> float:
        return self.lra_ms + self.ntd_ms


CSV_COLUMNS = (
    "schema_version", "experiment", "sweep_value", "trial", "algorithm", "use_lra",
    "fit", "msir_db", "lra_ms", "ntd_ms", "elapsed_ms", "iterations", "termination",
    "sigma", "bound_slack",
)
TIMING_COLUMNS = ("lra_ms", "ntd_ms", "elapsed_ms")


def _csv_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class ExperimentReport:
    experiment: str
    spec: Optional[SyntheticSpec] = None
    records: list[SolverRecord] = field(default_factory=list)
    schema_version: int = REPORT_SCHEMA_VERSION

    def _record_dict(self, record: SolverRecord, reproducible: bool) -> dict:
        row = asdict(record)
        row["elapsed_ms"] = record.elapsed_ms
        if reproducible:
            for column in TIMING_COLUMNS:
                row[column] = 0.0
        return row

    def to_json(self, reproducible: bool = False) -> str:
        """JSON document; `reproducible` zeroes every wall-clock field."""
        payload = {
            "schema_version": self.schema_version,
            "experiment": self.experiment,
            "spec": self.spec.to_dict() if self.spec else None,
            "records": [self._record_dict(r, reproducible) for r in self.records],
        }
        return json.dumps(payload, indent=2) + "\n"

    def to_csv_rows(self, reproducible: bool = False) -> list[dict]:
        rows = []
        for record in self.records:
            row = self._record_dict(record, reproducible)
            row["schema_version"] = self.schema_version
            row["experiment"] = self.experiment
            rows.append({column: _csv_value(row[column]) for column in CSV_COLUMNS})
        return rows

    def write_csv(self, stream: TextIO, reproducible: bool = False) -> None:
        writer = csv.DictWriter(stream, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.to_csv_rows(reproducible))


def median_summary(records: Sequence[SolverRecord]) -> list[dict]:
    """Median fit and mSIR per (sweep value, algorithm, LRA flag), in first-seen order."""
    groups: dict[tuple, list[SolverRecord]] = {}
    for record in records:
        groups.setdefault((record.sweep_value, record.algorithm, record.use_lra), []).append(record)
    summary = []
    for (value, algorithm, use_lra), group in groups.items():
        sirs = [r.msir_db for r in group if r.msir_db is not None]
        summary.append({
            "sweep_value": value,
            "algorithm": algorithm,
            "use_lra": use_lra,
            "trials": len(group),
            "median_fit": statistics.median(r.fit for r in group),
            "median_msir_db": statistics.median(sirs) if sirs else None,
        })
    return summary
