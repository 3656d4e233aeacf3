#!/usr/bin/env python3
"""
LRA-NTD - Runner Script

Command-line entry point for the nonnegative Tucker decomposition library.
It parses the subcommand and its flags, resolves the remaining settings from
the --config file, the environment and .env, and hands over to
ExperimentRunner.

Usage:
    python run.py decompose --input data.lntd --ranks 3,3,3
    python run.py synth --extents 30,30,30 --ranks 3,3,3 --snr 20
    python run.py sparsity-sweep --extents 30,30,30 --ranks 3,3,3 --trials 10
    python run.py noise-sweep --extents 50,50,50,50 --ranks 5,5,5,5 --snr-grid 10
    python run.py complete --input data.lntd --mask mask.lntd --ranks 2,2,2
    python run.py flops --order 4 --extent 100 --rank 10
    python run.py convergence --extents 50,50,50 --ranks 5,5,5 --no-use-lra
"""
import argparse
import logging
import os
import sys

from src.experiment_runner import ExperimentRunner, build_run_config, parse_float_list, parse_int_list


def _list_type(parse, what):
    def convert(text: str):
        try:
            values = parse(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid {what} list: {text!r}")
        if not values:
            raise argparse.ArgumentTypeError(f"empty {what} list")
        return values
    return convert


int_list = _list_type(parse_int_list, "integer")
float_list = _list_type(parse_float_list, "number")


def _str_list(text: str) -> tuple[str, ...]:
    values = tuple(v for v in text.replace(",", " ").split())
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="dotenv-style file with LRANTD_* settings")
    parser.add_argument("--seed", type=int, help="master random seed")
    parser.add_argument("--out-dir", dest="out_dir", help="directory for output files")
    parser.add_argument("--format", dest="fmt", choices=["csv", "json"], help="report format")
    parser.add_argument("--reproducible", action="store_true", default=None,
                        help="write wall-clock columns as 0.0 so outputs are byte-identical")
    parser.add_argument("--verbose", action="store_true", help="debug logging")


def _add_solver(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--algorithm", choices=["mu", "hals", "apg", "als"])
    parser.add_argument("--lra-ranks", dest="lra_ranks", type=int_list)
    parser.add_argument("--use-lra", dest="use_lra", action=argparse.BooleanOptionalAction, default=None)
    parser.add_argument("--lra-method", dest="lra_method", choices=["hosvd", "randomized"])
    parser.add_argument("--oversampling", type=int)
    parser.add_argument("--inner-iters", dest="inner_iters", type=int)
    parser.add_argument("--outer-iters", dest="outer_iters", type=int)
    parser.add_argument("--tol", type=float)
    parser.add_argument("--l1-core", dest="l1_core", type=float)
    parser.add_argument("--fro-factor", dest="fro_factor", type=float_list,
                        help="one value for every mode or one per mode")
    parser.add_argument("--semi-modes", dest="semi_modes", type=int_list, help="1-based modes left unconstrained")
    parser.add_argument("--identity-modes", dest="identity_modes", type=int_list, help="1-based modes fixed to identity")
    parser.add_argument("--semi-core", dest="semi_core", action="store_true", default=None)
    parser.add_argument("--hals-literal", dest="hals_literal", action="store_true", default=None,
                        help="project only the HALS increment")


def _add_synthetic(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--extents", type=int_list)
    parser.add_argument("--factor-sparsity", dest="factor_sparsity", type=float)
    parser.add_argument("--core-sparsity", dest="core_sparsity", type=float)
    parser.add_argument("--mean", type=float, help="mean of the exponential entries")
    parser.add_argument("--snr", type=float, help="SNR in dB; omit for clean data")


def _add_sweep(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--trials", type=int)
    parser.add_argument("--workers", type=int)
    parser.add_argument("--algorithms", type=_str_list)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="LRA-accelerated nonnegative Tucker decomposition")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decompose", help="decompose a tensor file")
    _add_common(p)
    _add_solver(p)
    p.add_argument("--ranks", type=int_list)
    p.add_argument("--input", required=True)
    p.add_argument("--truth", help="ground-truth model file for mSIR")
    p.add_argument("--output", help="output file stem")

    p = sub.add_parser("synth", help="write a synthetic tensor and its ground truth")
    _add_common(p)
    _add_synthetic(p)
    p.add_argument("--ranks", type=int_list)
    p.add_argument("--output", help="output file stem")

    p = sub.add_parser("sparsity-sweep", help="recovery against sparsity")
    _add_common(p)
    _add_solver(p)
    _add_synthetic(p)
    _add_sweep(p)
    p.add_argument("--ranks", type=int_list)
    p.add_argument("--sparsity-grid", dest="sparsity_grid", type=float_list)

    p = sub.add_parser("noise-sweep", help="direct against LRA solvers across noise levels")
    _add_common(p)
    _add_solver(p)
    _add_synthetic(p)
    _add_sweep(p)
    p.add_argument("--ranks", type=int_list)
    p.add_argument("--snr-grid", dest="snr_grid", type=float_list)
    p.add_argument("--warmup", action="store_true", default=None, help="run one untimed trial first")

    p = sub.add_parser("complete", help="weighted completion followed by NTD")
    _add_common(p)
    _add_solver(p)
    p.add_argument("--ranks", type=int_list)
    p.add_argument("--input", required=True)
    p.add_argument("--mask", required=True, help="weight tensor in [0, 1]; 0 marks a hidden entry")
    p.add_argument("--truth", help="clean tensor for the hidden-entry error")
    p.add_argument("--output", help="output file stem")

    p = sub.add_parser("flops", help="gradient multiplication counts")
    _add_common(p)
    p.add_argument("--order", type=int)
    p.add_argument("--extent", type=int_list)
    p.add_argument("--rank", type=int)

    p = sub.add_parser("convergence", help="fit per iteration from several initializations")
    _add_common(p)
    _add_solver(p)
    _add_synthetic(p)
    p.add_argument("--ranks", type=int_list)
    p.add_argument("--workers", type=int)
    p.add_argument("--algorithms", type=_str_list)
    p.add_argument("--init-seeds", dest="init_seeds", type=int_list)
    return parser


def main(argv=None) -> int:
    """Main entry point; returns the process exit status."""
    parser = build_parser()
    args = parser.parse_args(argv)

    level = "DEBUG" if args.verbose else os.getenv("LRANTD_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO))

    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    try:
        config = build_run_config(args.command, flags, config_path=args.config)
        return ExperimentRunner(config).run()
    except KeyboardInterrupt:
        print("\n\nInterrupted, no outputs written.")
        return 1
    except (ValueError, OSError) as e:
        print(f"\nError: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
