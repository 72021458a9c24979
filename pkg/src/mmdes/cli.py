"""``mmdes`` command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .data_model import SyntheticConfig, generate_synthetic, save_dataset
from .harness import (
    ConfigError,
    EvaluationReport,
    ExperimentConfig,
    load_config,
    render_report,
    render_sensitivity,
    run_experiment,
)

GRAD_TOL = 1e-4
FORMATS = ("json", "csv", "markdown")
EXTENSIONS = {"json": "json", "csv": "csv", "markdown": "md"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _nonneg_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return v


def _unit_float(text: str) -> float:
    v = _nonneg_float(text)
    if v > 1:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {text}")
    return v


def _dims(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected d_a,d_v,L")
    return tuple(_positive_int(p) for p in parts)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mmdes", description="Multimodal dynamic ensemble selection experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write a synthetic dataset (manifest + CSVs)")
    g.add_argument("--persons", type=_positive_int, default=18)
    g.add_argument("--frames", type=_positive_int, default=1500)
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--noise", type=_nonneg_float, default=0.3)
    g.add_argument("--cross-informativeness", type=_unit_float, default=0.15)

    def experiment_flags(p):
        p.add_argument("--config", type=Path, help="experiment config JSON (default: synthetic benchmark)")
        p.add_argument("--out", type=Path, help="output directory for report artifacts")
        p.add_argument("--jobs", type=_positive_int, default=1, help="parallel repetitions")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--repetitions", type=_positive_int, help="override the number of repetitions")
        p.add_argument("--impute-validation", action=argparse.BooleanOptionalAction, default=None,
                       help="impute the validation set too when scoring competence (default on)")
        p.add_argument("--dump-weights", action="store_true", help="write per-frame combination weights CSV")

    r = sub.add_parser("run", help="run the full scenario x method experiment")
    experiment_flags(r)
    r.add_argument("--format", action="append", choices=FORMATS,
                   help="artifact format(s) to write; repeatable (default: all)")

    a = sub.add_parser("ablate", help="all-modalities vs one disabled modality, with % CCC change")
    experiment_flags(a)
    a.add_argument("--disable-modality", required=True, choices=("audio", "video"))
    a.add_argument("--impute", default="zero", choices=("zero", "mean"))

    rep = sub.add_parser("report", help="re-render a saved report.json")
    rep.add_argument("--in", dest="inp", required=True, type=Path)
    rep.add_argument("--format", default="markdown", choices=FORMATS)
    rep.add_argument("--sensitivity", action="store_true", help="render % CCC change vs all-available")

    gc = sub.add_parser("grad-check", help="finite-difference check of the cross-attention backward pass")
    gc.add_argument("--seed", type=int, default=7)
    gc.add_argument("--dims", type=_dims, default=(4, 3, 5), help="d_a,d_v,L (default 4,3,5)")
    gc.add_argument("--eps", type=float, default=1e-5)
    gc.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)
    return parser


def _experiment_config(args, **overrides) -> ExperimentConfig:
    if args.config is not None:
        if not args.config.is_file():
            raise ConfigError(f"config file not found: {args.config}")
        config = load_config(args.config, args.seed)
    else:
        data = {}
        env = os.environ.get("MMDES_SEED")
        if env is not None:
            try:
                data["seed"] = int(env)
            except ValueError:
                raise ConfigError(f"MMDES_SEED: not an integer: {env!r}") from None
        if args.seed is not None:
            data["seed"] = args.seed
        config = ExperimentConfig.from_dict(data)
    if args.repetitions is not None:
        overrides["repetitions"] = args.repetitions
    if args.impute_validation is not None:
        overrides["impute_validation"] = args.impute_validation
    if overrides:
        d = config.to_dict()
        d.update(overrides)
        config = ExperimentConfig.from_dict(d)
    return config


def _write_artifacts(report: EvaluationReport, out: Path, formats) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for fmt in formats:
        path = out / f"report.{EXTENSIONS[fmt]}"
        path.write_text(render_report(report, fmt))
        paths.append(path)
    return paths


def cmd_gen(args) -> int:
    config = SyntheticConfig(persons=args.persons, frames=args.frames, noise=args.noise,
                             cross_informativeness=args.cross_informativeness)
    manifest = save_dataset(generate_synthetic(config, args.seed), args.out)
    print(f"wrote {manifest}")
    return 0


def cmd_run(args) -> int:
    config = _experiment_config(args)
    out = args.out or Path("results")
    weights = out / "weights.csv" if args.dump_weights else None
    if weights is not None:
        out.mkdir(parents=True, exist_ok=True)
    report = run_experiment(config, jobs=args.jobs, weights_path=weights)
    formats = list(dict.fromkeys(args.format or FORMATS))
    for path in _write_artifacts(report, out, formats):
        logging.info("wrote %s", path)
    print(render_report(report, "markdown"))
    return 0


def cmd_ablate(args) -> int:
    scenario = f"{args.impute}:{args.disable_modality}"
    config = _experiment_config(args, scenarios=["none", scenario])
    weights = None
    if args.out is not None and args.dump_weights:
        args.out.mkdir(parents=True, exist_ok=True)
        weights = args.out / "weights.csv"
    report = run_experiment(config, jobs=args.jobs, weights_path=weights)
    if args.out is not None:
        _write_artifacts(report, args.out, FORMATS)
    print(render_report(report, "markdown"))
    print(render_sensitivity(report))
    return 0


def cmd_report(args) -> int:
    try:
        report = EvaluationReport.from_dict(json.loads(args.inp.read_text()))
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot read report {args.inp}: {exc}") from None
    text = render_sensitivity(report) if args.sensitivity else render_report(report, args.format)
    sys.stdout.write(text if text.endswith("\n") else text + "\n")
    return 0


def cmd_grad_check(args) -> int:
    from .cross_attention import gradient_check
    d_a, d_v, L = args.dims
    errors = gradient_check(d_a, d_v, L, seed=args.seed, eps=args.eps, corrupt=args.corrupt)
    for name, err in errors.items():
        print(f"{name:8s} {err:.3e}")
    worst = max(errors.values())
    ok = worst < GRAD_TOL
    print(f"max relative error {worst:.3e} ({'PASS' if ok else 'FAIL'}, tolerance {GRAD_TOL:g})")
    return 0 if ok else 2


COMMANDS = {"gen": cmd_gen, "run": cmd_run, "ablate": cmd_ablate, "report": cmd_report,
            "grad-check": cmd_grad_check}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"mmdes {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure: report with context, exit 2
        print(f"mmdes {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
