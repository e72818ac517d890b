"""Command-line entry point ``ssep``.

Exit codes: 0 success, 2 an acceptance band (or identity tolerance) failed,
3 precondition error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .errors import PreconditionError, SSEPError
from .exact import exact_basic_identity
from .experiments import (
    ExperimentSpec,
    GradientSumsResult,
    RateTable,
    SweepReport,
    fit_rate,
    run_experiment,
)
from .kernel import kernel_from_json, transition_distribution
from .measures import configuration_from_json

EXIT_OK, EXIT_BAND, EXIT_PRECONDITION = 0, 2, 3


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _versions():
    return {"ssep": __version__, "numpy": np.__version__, "scipy": scipy.__version__}


def sidecar_path(csv_path) -> Path:
    """``results.csv`` -> ``results.meta.json``; never the config's own name."""
    csv_path = Path(csv_path)
    return csv_path.with_name(csv_path.stem + ".meta.json")


def _paths(spec: ExperimentSpec, config_path: Path, out: str | None):
    target = out or spec.out or str(config_path.with_suffix(".csv"))
    csv_path = Path(target)
    return csv_path, sidecar_path(csv_path)


def _in_band(slope, band):
    return band is None or band[0] <= slope <= band[1]


def cmd_run(args) -> int:
    cfg = Path(args.config)
    spec = ExperimentSpec.from_file(cfg)
    result = run_experiment(spec, n_jobs=args.jobs)
    csv_path, json_path = _paths(spec, cfg, args.out)
    side = {
        "spec_hash": spec.spec_hash,
        "kind": spec.kind,
        "provenance": {"seed": spec.seed, "replicas": spec.replicas, "versions": _versions()},
    }
    code = EXIT_OK
    if isinstance(result, SweepReport):
        table = RateTable([r["t"] for r in result.rows], [r["gap"] for r in result.rows],
                          [r["error_budget"] for r in result.rows])
        side["fit"] = None
        side["report"] = {k: v for k, v in result.to_json().items() if k != "rows"}
        if not result.passed:
            code = EXIT_BAND
    elif isinstance(result, GradientSumsResult):
        table = result.table(spec.quantity)
        side["fit"] = _fit_json(table.fit)
        side["fits"] = {"S1": _fit_json(result.fit_s1), "S2": _fit_json(result.fit_s2)}
        side["quantity"] = spec.quantity
        if result.s2_ok is False:
            code = EXIT_BAND
        if table.fit is not None and not _in_band(table.fit.slope, spec.band):
            code = EXIT_BAND
    else:
        table = result
        side["fit"] = _fit_json(table.fit)
        extras = {k: v for k, v in table.extras.items() if k in ("loglog_slope", "regime", "mode", "p")}
        if extras:
            side["extras"] = extras
        if table.fit is not None and not _in_band(table.fit.slope, spec.band):
            code = EXIT_BAND
    side["band"] = list(spec.band) if spec.band is not None else None
    side["pass"] = code == EXIT_OK
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    table.write_csv(csv_path)
    json_path.write_text(_dump(side))
    print(f"{spec.kind}: wrote {csv_path} and {json_path}" + ("" if code == EXIT_OK else " (band failed)"))
    return code


def _fit_json(fit):
    if fit is None:
        return None
    return {"slope": fit.slope, "half_width": fit.half_width, "window": list(fit.window)}


def cmd_verify_identity(args) -> int:
    with open(args.config) as fh:
        cfg = json.load(fh)
    kernel = kernel_from_json(cfg.get("kernel", {"d": 1, "nearest_neighbor": True}))
    eta_obj = cfg["eta"] if "eta" in cfg else cfg["measure"]
    eta = configuration_from_json(eta_obj)
    sites = cfg.get("observable", {}).get("sites", cfg.get("sites"))
    L = cfg.get("torus_L")
    res = exact_basic_identity(kernel, eta, np.asarray(sites), float(cfg["t"]),
                               tol=float(cfg.get("tol", 1e-12)), L=L)
    tol = float(cfg.get("gap_tol", 1e-6))
    out = res.to_json() | {"gap_tol": tol, "pass": res.gap <= tol}
    sys.stdout.write(_dump(out))
    return EXIT_OK if res.gap <= tol else EXIT_BAND


def cmd_kernel_check(args) -> int:
    with open(args.config) as fh:
        cfg = json.load(fh)
    kernel = kernel_from_json(cfg.get("kernel", cfg))
    out = {"valid": True, "d": kernel.d, "radius": kernel.radius,
           "second_moment": kernel.second_moment, "support_size": int(kernel.rates.size)}
    times = cfg.get("times", [])
    if times:
        out["p_t(0)"] = [float(transition_distribution(kernel, t).prob(np.zeros(kernel.d, dtype=np.int64)))
                         for t in times]
    sys.stdout.write(_dump(out))
    return EXIT_OK


def cmd_fit(args) -> int:
    table = RateTable.from_csv(args.table)
    window = tuple(args.window) if args.window else None
    fit = fit_rate(table, window, args.shift)
    out = fit.to_json()
    code = EXIT_OK
    if args.band:
        out["band"] = list(args.band)
        out["pass"] = _in_band(fit.slope, args.band)
        code = EXIT_OK if out["pass"] else EXIT_BAND
    sys.stdout.write(_dump(out))
    return code


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssep", description="Symmetric simple exclusion experiments and oracles.")
    p.add_argument("--version", action="version", version=f"ssep {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment config and write CSV + JSON sidecar")
    r.add_argument("config")
    r.add_argument("--out", help="CSV output path (overrides the config's out)")
    r.add_argument("--jobs", type=int, default=1, help="worker processes for Monte Carlo blocks")
    r.set_defaults(fn=cmd_run)

    v = sub.add_parser("verify-identity", help="exact check of the correlation identity on a torus")
    v.add_argument("config")
    v.set_defaults(fn=cmd_verify_identity)

    k = sub.add_parser("kernel-check", help="validate a kernel literal")
    k.add_argument("config")
    k.set_defaults(fn=cmd_kernel_check)

    f = sub.add_parser("fit", help="fit a log-log slope to a t,value,stderr table")
    f.add_argument("table")
    f.add_argument("--window", type=float, nargs=2, metavar=("TMIN", "TMAX"))
    f.add_argument("--shift", type=float, default=1.0, help="fit against log(t + shift)")
    f.add_argument("--band", type=float, nargs=2, metavar=("LO", "HI"))
    f.set_defaults(fn=cmd_fit)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except PreconditionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except SSEPError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAND
    except (ValueError, TypeError, KeyError, OSError) as exc:
        # malformed configs (JSONDecodeError is a ValueError)
        print(f"error: bad input: {exc!r}", file=sys.stderr)
        return EXIT_PRECONDITION


if __name__ == "__main__":
    sys.exit(main())
