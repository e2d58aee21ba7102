"""``caltune`` command-line entry point.

Exit codes: 0 success, 2 bad usage or input, 3 internal numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .calibration import ece, fit_temperature, nll
from .config import ExperimentConfig
from .dispersion import DEFAULT_BAND, atfd, correlate_prompt_family
from .errors import CaltuneError, InvalidRange, NumericFailure
from .experiment import run_simulation
from .fileio import atomic_write, csv_text, json_text, log_records, read_csv_columns, read_embeddings, read_log

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


def _parse_lambdas(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if len(vals) < 2 or any(not np.isfinite(v) or v < 0 for v in vals):
        raise argparse.ArgumentTypeError("need at least two finite, non-negative lambda values")
    return vals


def cmd_ece(args) -> int:
    entries = read_log(args.log)
    report = ece(log_records(entries, args.tau), args.bins)
    rows = report.bins.rows()
    csv_path = Path(args.csv) if args.csv else Path(args.log).with_suffix(".reliability.csv")
    atomic_write(csv_path, csv_text(("bin_lo", "bin_hi", "count", "acc", "conf"), rows))
    out = {"ece": report.ece, "accuracy": report.accuracy, "mean_confidence": report.mean_confidence}
    if args.json:
        atomic_write(args.json, json_text(out))
    sys.stdout.write(json_text(out))
    return EXIT_OK


def cmd_atfd(args) -> int:
    sets = read_embeddings(args.embeddings)
    rows = [(s.prompt_id, atfd(s.features).atfd, s.features.shape[0]) for s in sets]
    text = csv_text(("prompt_id", "atfd", "n_classes"), rows)
    if args.out:
        atomic_write(args.out, text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_correlate(args) -> int:
    if args.band < 0:
        raise InvalidRange("--band must be non-negative")
    rows = read_csv_columns(args.results, ("accuracy", "ece", "atfd"))
    c = correlate_prompt_family(rows, args.band)
    sys.stdout.write(
        json_text({"pearson_r": c.pearson_r, "spearman_rho": c.spearman_rho, "retained_count": c.retained_count})
    )
    return EXIT_OK


def cmd_simulate(args) -> int:
    config = ExperimentConfig.load(args.config)
    files = run_simulation(config, sweep=args.sweep_lambda, out_dir=args.out)
    for name in sorted(files):
        print(files[name])
    return EXIT_OK


def cmd_fit_temp(args) -> int:
    entries = read_log(args.log)
    logits = np.stack([e.logits for e in entries])
    labels = np.array([e.label for e in entries])
    t_star = fit_temperature(list(zip(logits, labels)))
    out = {"T_star": t_star, "nll_before": nll(logits, labels, 1.0), "nll_after": nll(logits, labels, t_star)}
    sys.stdout.write(json_text(out))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    from . import __version__

    p = argparse.ArgumentParser(prog="caltune", description="Calibration metrics and test-time prompt tuning simulations.")
    p.add_argument("--version", action="version", version=f"caltune {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ece", help="expected calibration error of a JSONL prediction log")
    s.add_argument("log")
    s.add_argument("--bins", type=int, default=15)
    s.add_argument("--tau", type=float, default=1.0, help="softmax temperature applied to the logged logits")
    s.add_argument("--csv", help="reliability table path (default: <log>.reliability.csv)")
    s.add_argument("--json", help="also write the report to this path")
    s.set_defaults(func=cmd_ece)

    s = sub.add_parser("atfd", help="per-prompt text-feature dispersion of an embedding file")
    s.add_argument("embeddings")
    s.add_argument("--out", help="write the CSV here as well as to stdout")
    s.set_defaults(func=cmd_atfd)

    s = sub.add_parser("correlate", help="ATFD/ECE correlation over an accuracy-banded prompt family")
    s.add_argument("results")
    s.add_argument("--band", type=float, default=DEFAULT_BAND)
    s.set_defaults(func=cmd_correlate)

    s = sub.add_parser("simulate", help="run a configured simulation and write its result bundle")
    s.add_argument("config")
    s.add_argument("--sweep-lambda", type=_parse_lambdas, help="comma-separated lambda values, e.g. 0,5,10,20,50")
    s.add_argument("--out", help="output directory (overrides the config)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fit-temp", help="fit a post-hoc temperature to a labeled JSONL log")
    s.add_argument("log")
    s.set_defaults(func=cmd_fit_temp)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "bins", 1) < 1:
        parser.error("--bins must be >= 1")
    try:
        return args.func(args)
    except NumericFailure as exc:
        print(f"caltune: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CaltuneError, OSError) as exc:
        print(f"caltune: error: {exc}", file=sys.stderr)
        return EXIT_INPUT

if __name__ == "__main__":
    sys.exit(main())
