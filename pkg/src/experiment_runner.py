"""
Experiment runner behind run.py: one method per subcommand.

Settings are resolved with the precedence
command-line flags > --config file > environment / .env > defaults.
Every output file is staged in the output directory and renamed into place
only when the subcommand succeeds.
"""
import csv
import json
import logging
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np
from dotenv import dotenv_values, load_dotenv

from src.lra_ntd.evaluation import (
    REPORT_SCHEMA_VERSION,
    ExperimentReport,
    SolverRecord,
    SyntheticSpec,
    error_bound_diagnostic,
    fit_index,
    generate,
    median_summary,
    msir,
    trial_seed,
)
from src.lra_ntd.lra import load_model, reconstruct, save_model, weighted_tucker_complete
from src.lra_ntd.ntd import Algorithm, Constraint, DecompositionResult, SolverConfig, gradient_flop_estimate, solve
from src.lra_ntd.tensor_core import ShapeError, frobenius_norm, project_nonneg
from src.lra_ntd.tensor_io import load_tensor, save_tensor

# Load environment variables from .env file
load_dotenv()

logger = logging.getLogger(__name__)

ENV_PREFIX = "LRANTD_"
COMMANDS = ("decompose", "synth", "sparsity-sweep", "noise-sweep", "complete", "flops", "convergence")


def parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


def parse_float_list(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def parse_bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"Cannot read '{text}' as a boolean")


# RunConfig attribute -> (environment key, parser)
ENV_SETTINGS: dict[str, tuple[str, Callable[[str], object]]] = {
    "algorithm": ("LRANTD_ALGORITHM", str),
    "ranks": ("LRANTD_RANKS", parse_int_list),
    "lra_ranks": ("LRANTD_LRA_RANKS", parse_int_list),
    "use_lra": ("LRANTD_USE_LRA", parse_bool),
    "inner_iters": ("LRANTD_INNER_ITERS", int),
    "outer_iters": ("LRANTD_OUTER_ITERS", int),
    "tol": ("LRANTD_TOL", float),
    "l1_core": ("LRANTD_L1_CORE", float),
    "fro_factor": ("LRANTD_FRO_FACTOR", parse_float_list),
    "seed": ("LRANTD_SEED", int),
    "out_dir": ("LRANTD_OUT_DIR", str),
    "fmt": ("LRANTD_FORMAT", str),
    "workers": ("LRANTD_WORKERS", int),
    "trials": ("LRANTD_TRIALS", int),
    "reproducible": ("LRANTD_REPRODUCIBLE", parse_bool),
}


@dataclass
class RunConfig:
    """Everything one subcommand needs; mode indices are 1-based as on the command line."""
    command: str
    # solver
    ranks: Optional[tuple[int, ...]] = None
    lra_ranks: Optional[tuple[int, ...]] = None
    algorithm: str = "hals"
    algorithms: tuple[str, ...] = ("mu", "hals", "apg")
    use_lra: bool = True
    lra_method: str = "hosvd"
    oversampling: int = 5
    inner_iters: int = 20
    outer_iters: int = 500
    tol: float = 1e-6
    l1_core: float = 0.0
    fro_factor: Optional[tuple[float, ...]] = None
    semi_modes: tuple[int, ...] = ()
    identity_modes: tuple[int, ...] = ()
    semi_core: bool = False
    hals_literal: bool = False
    # files
    input: Optional[str] = None
    mask: Optional[str] = None
    truth: Optional[str] = None
    output: Optional[str] = None
    out_dir: str = "results"
    fmt: str = "csv"
    # synthetic data
    extents: Optional[tuple[int, ...]] = None
    factor_sparsity: float = 0.0
    core_sparsity: float = 0.0
    mean: float = 10.0
    snr: Optional[float] = None
    # sweeps
    trials: int = 1
    workers: int = 1
    sparsity_grid: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6)
    snr_grid: tuple[float, ...] = (-5.0, 0.0, 5.0, 10.0, 20.0, 30.0)
    init_seeds: tuple[int, ...] = (0, 1, 2)
    warmup: bool = False
    # flop table
    order: int = 4
    extent: tuple[int, ...] = (100,)
    rank: int = 10
    seed: int = 0
    reproducible: bool = False

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ValueError(f"Unknown command '{self.command}', expected one of {', '.join(COMMANDS)}")
        if self.fmt not in ("csv", "json"):
            raise ValueError(f"Unknown report format '{self.fmt}', expected 'csv' or 'json'")
        for name in (self.algorithm, *self.algorithms):
            Algorithm(name)
        if self.trials < 1 or self.workers < 1:
            raise ValueError("--trials and --workers must be at least 1")
        if self.seed < 0:
            raise ValueError(f"Seed must be nonnegative, got {self.seed}")
        if set(self.semi_modes) & set(self.identity_modes):
            raise ValueError("A mode cannot be both unconstrained and identity-fixed")

    def solver_config(
        self, algorithm: Optional[str] = None, use_lra: Optional[bool] = None, seed: Optional[int] = None
    ) -> SolverConfig:
        if self.ranks is None:
            raise ValueError("NTD ranks are required (--ranks or LRANTD_RANKS)")
        order = len(self.ranks)
        constraints = [Constraint.NONNEGATIVE] * order
        for modes, constraint in ((self.semi_modes, Constraint.UNCONSTRAINED), (self.identity_modes, Constraint.FIXED_IDENTITY)):
            for mode in modes:
                if not 1 <= mode <= order:
                    raise ValueError(f"Mode {mode} is out of range for a tensor of order {order}")
                constraints[mode - 1] = constraint
        fro = self.fro_factor
        if fro is not None and len(fro) == 1:
            fro = fro * order
        return SolverConfig(
            ntd_ranks=self.ranks,
            algorithm=algorithm or self.algorithm,
            use_lra=self.use_lra if use_lra is None else use_lra,
            lra_ranks=self.lra_ranks,
            lra_method=self.lra_method,
            oversampling=self.oversampling,
            mode_constraints=tuple(constraints),
            core_constraint=Constraint.UNCONSTRAINED if self.semi_core else Constraint.NONNEGATIVE,
            l1_core=self.l1_core,
            fro_factor=fro,
            inner_iters=self.inner_iters,
            outer_iters=self.outer_iters,
            tol=self.tol,
            seed=self.seed if seed is None else seed,
            hals_literal=self.hals_literal,
        )

    def synthetic_spec(self, seed: int, sparsity: Optional[float] = None, snr: Optional[float] = None) -> SyntheticSpec:
        if self.extents is None or self.ranks is None:
            raise ValueError("Synthetic data needs --extents and --ranks")
        return SyntheticSpec(
            extents=self.extents,
            ranks=self.ranks,
            factor_sparsity=self.factor_sparsity if sparsity is None else sparsity,
            core_sparsity=self.core_sparsity if sparsity is None else sparsity,
            mean=self.mean,
            snr_db=self.snr if snr is None else snr,
            seed=seed,
        )


def build_run_config(
    command: str,
    flags: Mapping[str, object],
    config_path: Optional[str] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    """
    Resolve settings for one subcommand.

    Args:
        command: subcommand name
        flags: values given on the command line (None entries are ignored)
        config_path: optional dotenv-syntax file with LRANTD_* keys
        environ: environment to consult, os.environ by default

    Returns:
        Validated RunConfig.
    """
    environ = os.environ if environ is None else environ
    file_values = {}
    if config_path is not None:
        if not Path(config_path).is_file():
            raise ValueError(f"Config file not found: {config_path}")
        file_values = {k: v for k, v in dotenv_values(config_path).items() if v is not None}
        unknown = [k for k in file_values if k.startswith(ENV_PREFIX) and k not in _KNOWN_KEYS]
        if unknown:
            logger.warning(f"Ignoring unknown config keys: {', '.join(sorted(unknown))}")

    values = {name: value for name, value in flags.items() if value is not None}
    for name, (key, parse) in ENV_SETTINGS.items():
        if name in values:
            continue
        raw = file_values.get(key, environ.get(key))
        if raw is None or raw == "":
            continue
        try:
            values[name] = parse(raw)
        except ValueError as e:
            raise ValueError(f"Invalid value for {key}: {raw!r} ({e})") from e
    return RunConfig(command=command, **values)


_KNOWN_KEYS = {key for key, _ in ENV_SETTINGS.values()} | {"LRANTD_LOG_LEVEL"}


class OutputStager:
    """Collects output files as temporaries and publishes them together."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.staged: list[tuple[Path, Path]] = []

    def path(self, name: str) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{name}.", suffix=".part", dir=self.out_dir)
        os.close(fd)
        self.staged.append((Path(tmp), self.out_dir / name))
        return Path(tmp)

    def commit(self) -> list[Path]:
        for tmp, final in self.staged:
            os.replace(tmp, final)
        published = [final for _, final in self.staged]
        self.staged = []
        return published

    def discard(self) -> None:
        for tmp, _ in self.staged:
            if tmp.exists():
                tmp.unlink()
        self.staged = []

    def __enter__(self) -> "OutputStager":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is None:
            for path in self.commit():
                print(f"Wrote {path}")
        else:
            self.discard()


class ExperimentRunner:
    def __init__(self, config: RunConfig):
        self.config = config
        self.out_dir = Path(config.out_dir)
        self._convergence_data = None

    def run(self) -> int:
        handlers = {
            "decompose": self.cmd_decompose,
            "synth": self.cmd_synth,
            "sparsity-sweep": self.cmd_sparsity_sweep,
            "noise-sweep": self.cmd_noise_sweep,
            "complete": self.cmd_complete,
            "flops": self.cmd_flops,
            "convergence": self.cmd_convergence,
        }
        with OutputStager(self.out_dir) as stager:
            handlers[self.config.command](stager)
        return 0

    # -- writers ---------------------------------------------------------

    def _timing(self, value: float) -> float:
        return 0.0 if self.config.reproducible else value

    def _write_rows(self, stager: OutputStager, stem: str, rows: Sequence[dict]) -> None:
        """Plain table as CSV or JSON, headed by the schema version."""
        rows = [{"schema_version": REPORT_SCHEMA_VERSION, **row} for row in rows]
        path = stager.path(f"{stem}.{self.config.fmt}")
        with open(path, "w", newline="") as f:
            if self.config.fmt == "json":
                f.write(json.dumps(rows, indent=2) + "\n")
                return
            writer = csv.DictWriter(f, fieldnames=list(rows[0]) if rows else ["schema_version"], lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)

    def _write_report(self, stager: OutputStager, stem: str, report: ExperimentReport) -> None:
        path = stager.path(f"{stem}.{self.config.fmt}")
        with open(path, "w", newline="") as f:
            if self.config.fmt == "json":
                f.write(report.to_json(reproducible=self.config.reproducible))
            else:
                report.write_csv(f, reproducible=self.config.reproducible)

    def _write_trace(self, stager: OutputStager, stem: str, result: DecompositionResult) -> None:
        path = stager.path(f"{stem}_trace.csv")
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["iter", "cost", "fit", "elapsed_ms"])
            for i, (cost, fit, elapsed) in enumerate(
                zip(result.cost_trace, result.fit_trace, result.elapsed_trace), start=1
            ):
                writer.writerow([i, repr(cost), repr(fit), repr(self._timing(elapsed))])

    def _map(self, fn: Callable, jobs: Iterable) -> list:
        """Run jobs in order; with several workers the result order is unchanged."""
        jobs = list(jobs)
        if self.config.workers == 1 or len(jobs) < 2:
            return [fn(job) for job in jobs]
        with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
            return list(pool.map(fn, jobs))

    def _record(
        self,
        result: DecompositionResult,
        *,
        fit: float,
        trial: int,
        sweep_value: Optional[float],
        algorithm: str,
        use_lra: bool,
        **extra,
    ) -> SolverRecord:
        return SolverRecord(
            trial=trial,
            algorithm=Algorithm(algorithm).value,
            use_lra=use_lra,
            fit=fit,
            lra_ms=self._timing(1000.0 * result.lra_seconds),
            ntd_ms=self._timing(1000.0 * result.ntd_seconds),
            iterations=result.iterations,
            termination=result.termination,
            sweep_value=sweep_value,
            **extra,
        )

    # -- subcommands -----------------------------------------------------

    def cmd_decompose(self, stager: OutputStager) -> None:
        """Decompose a tensor file: model file, trace CSV and the final Fit."""
        config = self.config
        if config.input is None:
            raise ValueError("decompose needs --input")
        y = load_tensor(config.input)
        cfg = config.solver_config()
        print(f"Decomposing {config.input} {y.shape} with {cfg.algorithm.value.upper()}-NTD at ranks {cfg.ntd_ranks}...")
        result = solve(y, cfg)

        stem = config.output or "decomposition"
        save_model(stager.path(f"{stem}.lntm"), result.model)
        self._write_trace(stager, stem, result)
        print(f"Fit: {result.final_fit:.4f}%  ({result.iterations} iterations, {result.termination})")
        print(f"Time: LRA {result.lra_seconds:.3f}s, NTD {result.ntd_seconds:.3f}s")
        if result.flags:
            print(f"Solver flags: {', '.join(result.flags)}")
        if config.truth is not None:
            print(f"mSIR: {msir(load_model(config.truth), result.model):.2f} dB")

    def cmd_synth(self, stager: OutputStager) -> None:
        """Write a clean tensor, its noisy observation and the ground-truth model."""
        spec = self.config.synthetic_spec(seed=self.config.seed)
        clean, truth, noisy = generate(spec)
        stem = self.config.output or "synthetic"
        save_tensor(stager.path(f"{stem}_clean.lntd"), clean)
        save_tensor(stager.path(f"{stem}_noisy.lntd"), noisy)
        save_model(stager.path(f"{stem}_truth.lntm"), truth)
        print(f"Generated {spec.extents} tensor at ranks {spec.ranks}, SNR {spec.snr_db if spec.snr_db is not None else 'clean'}")

    def _sparsity_trial(self, job: tuple[int, float, int]) -> list[SolverRecord]:
        index, sparsity, trial = job
        spec = self.config.synthetic_spec(seed=trial_seed(self.config.seed, index), sparsity=sparsity)
        clean, truth, noisy = generate(spec)
        records = []
        for algorithm in self.config.algorithms:
            cfg = self.config.solver_config(algorithm=algorithm, seed=spec.seed)
            result = solve(noisy, cfg)
            records.append(self._record(
                result, fit=fit_index(clean, reconstruct(result.model)), trial=trial, sweep_value=sparsity,
                algorithm=algorithm, use_lra=cfg.use_lra, msir_db=msir(truth, result.model),
            ))
        logger.info(f"Sparsity {sparsity}, trial {trial} done")
        return records

    def cmd_sparsity_sweep(self, stager: OutputStager) -> None:
        """Recovery quality against factor/core sparsity."""
        config = self.config
        jobs = [
            (p_index * config.trials + trial, p, trial)
            for p_index, p in enumerate(config.sparsity_grid)
            for trial in range(config.trials)
        ]
        records = [r for batch in self._map(self._sparsity_trial, jobs) for r in batch]
        report = ExperimentReport("sparsity-sweep", spec=config.synthetic_spec(seed=config.seed), records=records)
        self._write_report(stager, "sparsity_sweep", report)

        summary = median_summary(records)
        self._write_rows(stager, "sparsity_sweep_summary", summary)
        print(f"{'sparsity':>9} {'algorithm':>9} {'median fit':>11} {'median mSIR':>12}")
        for row in summary:
            print(f"{row['sweep_value']:>9.2f} {row['algorithm']:>9} {row['median_fit']:>10.2f}% {row['median_msir_db']:>9.2f} dB")

    def _noise_trial(self, job: tuple[int, float, int]) -> list[SolverRecord]:
        index, snr, trial = job
        spec = self.config.synthetic_spec(seed=trial_seed(self.config.seed, index), snr=snr)
        clean, truth, noisy = generate(spec)
        records = []
        for algorithm in self.config.algorithms:
            # direct MU needs nonnegative data, so it sees the noise clipped at zero
            direct_data = project_nonneg(noisy) if Algorithm(algorithm) is Algorithm.MU else noisy
            direct = solve(direct_data, self.config.solver_config(algorithm=algorithm, use_lra=False, seed=spec.seed))
            accelerated = solve(noisy, self.config.solver_config(algorithm=algorithm, use_lra=True, seed=spec.seed))
            bound = error_bound_diagnostic(noisy, accelerated.lra, accelerated.model, direct.model)
            for result, use_lra in ((direct, False), (accelerated, True)):
                extra = {"sigma": bound.sigma, "bound_slack": bound.slack} if use_lra else {}
                records.append(self._record(
                    result, fit=fit_index(clean, reconstruct(result.model)), trial=trial, sweep_value=snr,
                    algorithm=algorithm, use_lra=use_lra, msir_db=msir(truth, result.model), **extra,
                ))
        logger.info(f"SNR {snr} dB, trial {trial} done")
        return records

    def cmd_noise_sweep(self, stager: OutputStager) -> None:
        """Fit and time of every solver with and without LRA across noise levels."""
        config = self.config
        if not config.snr_grid:
            raise ValueError("The SNR grid is empty")
        jobs = [
            (s_index * config.trials + trial, snr, trial)
            for s_index, snr in enumerate(config.snr_grid)
            for trial in range(config.trials)
        ]
        if config.warmup:
            logger.info("Running untimed warm-up trial")
            self._noise_trial(jobs[0])
        records = [r for batch in self._map(self._noise_trial, jobs) for r in batch]
        report = ExperimentReport("noise-sweep", spec=config.synthetic_spec(seed=config.seed), records=records)
        self._write_report(stager, "noise_sweep", report)

        print(f"{'SNR':>6} {'algorithm':>9} {'LRA':>4} {'fit':>8} {'NTD ms':>10}")
        for r in records:
            print(f"{r.sweep_value:>6.1f} {r.algorithm:>9} {'yes' if r.use_lra else 'no':>4} {r.fit:>7.2f}% {r.ntd_ms:>10.1f}")

    def cmd_complete(self, stager: OutputStager) -> None:
        """Weighted completion of a masked tensor followed by NTD on the completed model."""
        config = self.config
        if config.input is None or config.mask is None:
            raise ValueError("complete needs --input and --mask")
        y = load_tensor(config.input)
        w = load_tensor(config.mask)
        if w.shape != y.shape:
            raise ShapeError(f"Mask shape {w.shape} differs from tensor shape {y.shape}")
        cfg = config.solver_config(use_lra=True)
        completed = weighted_tucker_complete(
            y, w, cfg.resolved_lra_ranks(), method=cfg.lra_method, oversampling=cfg.oversampling, seed=cfg.seed,
        )
        result = solve(completed, cfg)

        stem = config.output or "completion"
        save_model(stager.path(f"{stem}.lntm"), result.model)
        self._write_trace(stager, stem, result)
        row = {"iterations": result.iterations, "termination": result.termination}
        if config.truth is not None:
            truth = load_tensor(config.truth)
            if truth.shape != y.shape:
                raise ShapeError(f"Truth shape {truth.shape} differs from tensor shape {y.shape}")
            hidden = 1.0 - np.clip(w, 0.0, 1.0)
            hidden_norm = frobenius_norm(hidden * truth)
            row["hidden_relative_error"] = (
                frobenius_norm(hidden * (truth - reconstruct(completed))) / hidden_norm if hidden_norm > 0 else 0.0
            )
            row["fit_vs_truth"] = fit_index(truth, reconstruct(result.model))
            print(f"Hidden-entry relative error: {row['hidden_relative_error']:.3e}")
            print(f"Fit against ground truth: {row['fit_vs_truth']:.4f}%")
        self._write_rows(stager, f"{stem}_report", [row])

    def cmd_flops(self, stager: OutputStager) -> None:
        """Multiplication counts of one gradient with and without LRA."""
        config = self.config
        rows = []
        for extent in config.extent:
            with_lra = gradient_flop_estimate(config.order, extent, config.rank, with_lra=True)
            without = gradient_flop_estimate(config.order, extent, config.rank, with_lra=False)
            rows.append({
                "order": config.order, "extent": extent, "rank": config.rank,
                "with_lra": with_lra, "without_lra": without, "ratio": without / with_lra,
            })
        print(f"{'N':>3} {'I':>6} {'R':>4} {'with LRA':>16} {'without LRA':>18} {'ratio':>10}")
        for row in rows:
            print(f"{row['order']:>3} {row['extent']:>6} {row['rank']:>4} {row['with_lra']:>16,} {row['without_lra']:>18,} {row['ratio']:>10.1f}")
        self._write_rows(stager, "flops", rows)

    def _convergence_run(self, job: tuple[str, int]) -> list[dict]:
        algorithm, init_seed = job
        result = solve(self._convergence_data, self.config.solver_config(algorithm=algorithm, seed=init_seed))
        return [
            {
                "algorithm": algorithm, "use_lra": int(self.config.use_lra), "init_seed": init_seed,
                "iter": i, "cost": cost, "fit": fit, "elapsed_ms": self._timing(elapsed),
            }
            for i, (cost, fit, elapsed) in enumerate(
                zip(result.cost_trace, result.fit_trace, result.elapsed_trace), start=1
            )
        ]

    def cmd_convergence(self, stager: OutputStager) -> None:
        """Fit per outer iteration of each algorithm from several initializations."""
        config = self.config
        spec = config.synthetic_spec(seed=config.seed)
        self._convergence_data = generate(spec)[2]
        jobs = [(algorithm, s) for algorithm in config.algorithms for s in config.init_seeds]
        rows = [row for batch in self._map(self._convergence_run, jobs) for row in batch]
        self._write_rows(stager, "convergence", rows)
        for algorithm, s in jobs:
            last = [row for row in rows if row["algorithm"] == algorithm and row["init_seed"] == s][-1]
            print(f"{algorithm:>5} seed {s}: fit {last['fit']:.4f}% after {last['iter']} iterations")
