"""Command-line entry point.

    avg-spde SUBCOMMAND [--config PATH] [--seed N] [--out DIR] [--plot]
                        [--check] [--replicas N] [--KEY VALUE ...]

Each run writes one CSV table and a ``manifest.json`` into ``--out``.
Exit codes: 0 success, 2 invalid input, 3 blow-up dominated study,
4 acceptance threshold missed under ``--check``.
"""

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import experiments
from .config import SUBCOMMAND_DEFAULTS, parse_config
from .errors import BlowUpError, ParameterError

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_BLOWUP = 3
EXIT_CHECK = 4

RUNNERS = {
    "simulate": experiments.run_simulation,
    "average": experiments.run_averaged,
    "deviation": experiments.run_deviation,
    "convergence": experiments.run_convergence_study,
    "bifurcation": experiments.run_bifurcation_sweep,
    "variance": experiments.run_variance_scaling,
    "mixing": experiments.run_mixing_check,
    "benchmark": experiments.run_speedup_benchmark,
    "gaussianity": experiments.run_gaussianity_check,
    "audit": experiments.run_audit,
}


def format_cell(x):
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return "%.17g" % x
    return str(x)


def csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([format_cell(x) for x in row])
    return buf.getvalue()


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


def _atomic_write(path, data):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _timestamp():
    raw = os.environ.get("SOURCE_DATE_EPOCH")
    return int(raw) if raw and raw.isdigit() else None


def emit_outputs(report, out_dir, plot=False, subcommand=None, cfg=None, exit_status=0):
    """Write ``<name>.csv``, optionally ``<name>.svg``, and ``manifest.json``.

    Returns the list of written paths.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ParameterError(f"cannot create output directory {out}: {exc}") from None
    files = [f"{report.name}.csv"]
    _atomic_write(out / files[0], csv_text(report.header, report.rows))
    if plot:
        from .plotting import render

        files.append(f"{report.name}.svg")
        render(report, out / files[1])
    manifest = {
        "subcommand": subcommand or report.name,
        "config": cfg.to_mapping() if cfg is not None else {},
        "base_seed": report.meta.get("seed"),
        "config_hash": report.meta.get("config_hash"),
        "version": report.meta.get("version"),
        "outputs": files,
        "summary": _jsonable(report.summary),
        "audit_warnings": list(report.meta.get("audit_warnings", [])),
        "timestamps": {"created": _timestamp()},
        "exit_status": exit_status,
    }
    _atomic_write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return [out / f for f in files] + [out / "manifest.json"]


def check_report(report):
    """Apply the subcommand's acceptance threshold; return a list of failures."""
    s = report.summary
    fails = []
    if report.name == "convergence":
        if not 0.35 <= s["slope"] <= 0.65:
            fails.append(f"slope {s['slope']:.4f} outside [0.35, 0.65]")
    elif report.name == "bifurcation":
        for L, _, amp in report.rows:
            if L <= 1.3 and not amp <= 1e-3:
                fails.append(f"averaged amplitude {amp:.3g} > 1e-3 at L={L}")
            if L >= 1.4 and not amp >= 0.1:
                fails.append(f"averaged amplitude {amp:.3g} < 0.1 at L={L}")
    elif report.name == "variance":
        for label in ("direct", "surrogate"):
            beta = s.get(f"beta_{label}")
            if beta is None or not 0.4 <= beta <= 0.6:
                fails.append(f"beta_{label} = {beta} outside [0.4, 0.6]")
        rel = s.get("c_relative_difference")
        if rel is None or not rel <= 0.15:
            fails.append(f"c relative difference {rel} > 0.15")
    elif report.name == "mixing":
        if s["max_abs_deviation_from_exact"] > 1e-12:
            fails.append("contraction differs from the exact factor")
        if not s["all_satisfied"]:
            fails.append("contraction bound violated")
    elif report.name == "gaussianity":
        for row in report.rows:
            if not row[5] and not row[2] > 0.01:
                fails.append(f"KS p-value {row[2]:.3g} <= 0.01 at epsilon={row[0]}")
    return fails


def _split_overrides(extra):
    """Turn leftover ``--KEY VALUE`` / ``--KEY=VALUE`` tokens into a dict."""
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise ParameterError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ParameterError(f"missing value for --{key}")
            val = extra[i + 1]
            i += 2
        out[key] = val
    return out


def build_parser():
    parser = argparse.ArgumentParser(
        prog="avg-spde",
        description="Averaging and normal deviations for slow-fast stochastic reaction-diffusion systems.",
        epilog="Any config key may be overridden with --KEY VALUE.",
    )
    parser.add_argument("subcommand", choices=sorted(SUBCOMMAND_DEFAULTS))
    parser.add_argument("--config", metavar="PATH", help="key=value file or a previous manifest.json")
    parser.add_argument("--seed", metavar="U64", help="base seed")
    parser.add_argument("--out", metavar="DIR", default=".", help="output directory (default: .)")
    parser.add_argument("--plot", action="store_true", help="also write an SVG figure")
    parser.add_argument("--check", action="store_true", help="exit 4 if the acceptance threshold is missed")
    parser.add_argument("--replicas", metavar="N", help="Monte Carlo replicas")
    return parser


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        overrides = _split_overrides(extra)
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.replicas is not None:
            overrides["replicas"] = args.replicas
        cfg = parse_config(args.config, overrides, subcommand=args.subcommand)
        report = RUNNERS[args.subcommand](cfg)
    except (ParameterError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (experiments.StudyFailure, BlowUpError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BLOWUP

    for w in report.meta.get("audit_warnings", []):
        print(f"warning: {w}", file=sys.stderr)
    status = EXIT_OK
    if args.check:
        fails = check_report(report)
        for f in fails:
            print(f"check failed: {f}", file=sys.stderr)
        status = EXIT_CHECK if fails else EXIT_OK
    try:
        emit_outputs(report, args.out, args.plot, args.subcommand, cfg, status)
    except (ParameterError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return status


if __name__ == "__main__":
    sys.exit(main())
