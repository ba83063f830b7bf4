"""Command-line driver: validate models, run ensembles, compare to the oracle.

Three subcommands cover the workflow:

``validate``
    Parse and compile a model file, report its structure (variable count,
    noise channels, exactness class, rate-tensor ranks), and optionally
    dump the drift and diffusion polynomials.

``run``
    Integrate a weighted trajectory ensemble and write one table per
    declared observable (columns ``t, re, im, stderr, n_eff, diverged``)
    plus a ``report.json`` carrying the fully resolved configuration; the
    report validates against the bundled ``report_schema.json``.

``compare``
    Run both the stochastic engine and the truncated-Hilbert-space
    reference on the same grid and score ``|engine - oracle| / stderr``
    per output time against the 4-sigma policy.  Noise-free runs have a
    zero standard error, so those are scored against a discretization
    floor proportional to dt instead.

A model argument is either a file path or the name of a bundled example
(free_mode, two_level_decay, dephasing, jaynes_cummings, kerr,
two_atom_dipole).  Exit codes: 0 success, 1 configuration or validation
error, 2 statistical failure (divergence of the whole ensemble, or a
comparison outside the policy band).
"""

from __future__ import annotations

import argparse
import csv
import json
import re
import sys as _sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .algebra import validate_exactness
from .compiler import CompileError, compile_model
from .dsl import DSLError, parse_gauge, parse_model
from .engine import EngineError, TimeGrid, run_ensemble
from .estimator import (
    EstimatorError,
    _jackknife_ratio,
    _kish,
    compile_observables,
    estimate,
    reconstruction_requests,
)
from .gauge import apply_drift_gauge
from .model import ModelError, ModelSpec
from .oracle import HilbertConfig, OracleError, run_oracle

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_STATISTICAL = 2

Z_THRESHOLD = 4.0
# noise-free estimates carry a standard error at plain roundoff level; their
# engine-vs-oracle gap is pure time discretization, scored against this
# multiple of dt instead
DETERMINISTIC_FLOOR_PER_DT = 50.0
ROUNDOFF_STDERR = 1e-12

CSV_HEADER = ["t", "re", "im", "stderr", "n_eff", "diverged"]


class CLIError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def _load_model(spec: str) -> tuple[ModelSpec, str]:
    """Read a model from a path, falling back to the bundled examples."""
    path = Path(spec)
    if path.is_file():
        return parse_model(path.read_text()), str(path)
    name = spec[:-3] if spec.endswith(".pp") else spec
    bundle = resources.files("positivep") / "models" / f"{name}.pp"
    if bundle.is_file():
        return parse_model(bundle.read_text()), f"bundled:{name}"
    raise CLIError(
        f"model {spec!r} is neither a readable file nor a bundled example"
    )


def _compile(args):
    m, display = _load_model(args.model)
    sys_ = compile_model(m, args.formulation, args.allow_truncation)
    gauge_file = None
    if getattr(args, "gauge", None):
        gpath = Path(args.gauge)
        if not gpath.is_file():
            raise CLIError(f"gauge file {args.gauge!r} does not exist")
        gspec = parse_gauge(gpath.read_text(), m)
        sys_ = apply_drift_gauge(sys_, gspec)
        gauge_file = str(gpath)
    return m, sys_, gauge_file, display


def _grid(args) -> TimeGrid:
    return TimeGrid(args.t0, args.t1, args.dt, args.stride)


def _sanitize(label: str, used: set) -> str:
    base = re.sub(r"[^A-Za-z0-9_.-]+", "_", label) or "obs"
    name = base
    k = 1
    while name in used:
        k += 1
        name = f"{base}_{k}"
    used.add(name)
    return name


def _estimate_rows(result, label: str, n_valid: int):
    """(t, re, im, stderr, n_eff, diverged) rows for the surviving outputs.

    A fully alive run goes through the public estimator; a partially
    diverged one replays the same ratio/jackknife arithmetic over the
    outputs that still have survivors.
    """
    rows = []
    if n_valid == result.grid.n_out:
        for i, est in enumerate(estimate(result, label)):
            rows.append(
                (
                    est.time,
                    est.value.real,
                    est.value.imag,
                    est.stderr,
                    est.n_effective,
                    result.diverged_count(i),
                )
            )
        return rows
    idx = result.obs_labels.index(label)
    for i in range(n_valid):
        mask = result.alive_mask(i)
        w = np.exp(result.logweights[mask, i])
        f = result.values[mask, i, idx]
        num = w @ f
        den = w.sum()
        value = num / den if den != 0 else complex(float("nan"), float("nan"))
        stderr = _jackknife_ratio(w, f, num, den) if mask.sum() > 1 else float("inf")
        rows.append(
            (
                float(result.times[i]),
                value.real,
                value.imag,
                stderr,
                _kish(w),
                result.diverged_count(i),
            )
        )
    return rows


def _write_rows(path: Path, label: str, rows, fmt: str) -> None:
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_HEADER)
            writer.writerows(rows)
    else:
        jrows = []
        for t, re_, im_, se, ne, div in rows:
            jrows.append(
                [
                    float(t),
                    _finite_or_none(re_),
                    _finite_or_none(im_),
                    _finite_or_none(se),
                    _finite_or_none(ne),
                    int(div),
                ]
            )
        payload = {"label": label, "columns": CSV_HEADER, "rows": jrows}
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1)
            fh.write("\n")


def _finite_or_none(x: float):
    return float(x) if np.isfinite(x) else None


def _report_schema() -> dict:
    text = (resources.files("positivep") / "report_schema.json").read_text()
    return json.loads(text)


def _write_report(outdir: Path, report: dict) -> None:
    jsonschema.validate(report, _report_schema())
    with open(outdir / "report.json", "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _base_report(args, command, m, sys_, gauge_file, result, display, exit_status):
    stats = result.weight_stats()
    by_output = [result.diverged_count(i) for i in range(result.grid.n_out)]
    return {
        "command": command,
        "model": display,
        "seed": args.seed,
        "grid": {"t0": args.t0, "t1": args.t1, "dt": args.dt, "stride": args.stride},
        "ensemble": args.n,
        "formulation": args.formulation,
        "truncated": sys_.truncated,
        "workers": args.workers,
        "gauge": {
            "identity": gauge_file is None,
            "file": gauge_file,
            "mean_abs_weight": _finite_or_none(stats["mean_abs_weight"]),
            "max_abs_logweight": _finite_or_none(stats["max_abs_logweight"]),
        },
        "emitters": [
            {"name": e.name, "eta": e.eta, "theta": e.theta} for e in m.emitters
        ],
        "divergence": {"total": by_output[-1], "by_output": by_output},
        "observables": [],
        "output_format": args.format,
        "exit_status": exit_status,
    }


def _run_engine(sys_, grid, args):
    """Ensemble run returning (result, n_valid_outputs, exit_status)."""
    table = compile_observables(
        sys_, list(sys_.model.observables) + reconstruction_requests(sys_.model)
    )
    try:
        result = run_ensemble(
            sys_, grid, args.n, args.seed, observables=table, workers=args.workers
        )
        return result, grid.n_out, EXIT_OK
    except EngineError as err:
        partial = getattr(err, "partial_result", None)
        if partial is None:
            raise
        print(f"warning: {err}", file=_sys.stderr)
        n_valid = 0
        for i in range(grid.n_out):
            if partial.alive_mask(i).any():
                n_valid = i + 1
        return partial, n_valid, EXIT_STATISTICAL


# ---------------------------------------------------------------------------
# validate
# ---------------------------------------------------------------------------


def cmd_validate(args) -> int:
    m, display = _load_model(args.model)
    print(f"model: {display}")
    print(f"modes: {len(m.modes)}  emitters: {len(m.emitters)}")
    for idx in sorted(m.lindblad):
        e = m.emitters[idx]
        g = m.lindblad[idx].matricized()
        evals = np.linalg.eigvalsh(g)
        rank = int(np.sum(evals > 1e-12 * np.max(np.abs(evals))))
        print(f"lindblad {e.name}: PSD ok, rank {rank}")

    exactness = validate_exactness(m.hamiltonian)
    try:
        sys_ = compile_model(m, args.formulation, args.allow_truncation)
    except CompileError as err:
        print(f"error: {err}", file=_sys.stderr)
        return EXIT_CONFIG
    klass = "Exact" if exactness.exact else "Approximate"
    if not exactness.exact:
        print(
            "warning: generator truncated at second order; results are "
            "approximate",
            file=_sys.stderr,
        )
    print(f"{klass}; {sys_.n_vars} variables; {sys_.n_noise_vars} noise channels")
    if args.dump:
        print(sys_.describe(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def cmd_run(args) -> int:
    m, sys_, gauge_file, display = _compile(args)
    grid = _grid(args)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)

    result, n_valid, exit_status = _run_engine(sys_, grid, args)

    report = _base_report(
        args, "run", m, sys_, gauge_file, result, display, exit_status
    )
    used = set()
    ext = "csv" if args.format == "csv" else "json"
    for label in result.obs_labels:
        if label.startswith("_"):
            continue
        rows = _estimate_rows(result, label, n_valid)
        fname = f"{_sanitize(label, used)}.{ext}"
        _write_rows(outdir / fname, label, rows, args.format)
        report["observables"].append({"label": label, "file": fname})
        last = rows[-1]
        print(
            f"{label}: t={last[0]:g} value={last[1]:.6g}{last[2]:+.6g}i "
            f"stderr={last[3]:.3g} n_eff={last[4]:.3g}"
        )
    _write_report(outdir, report)
    total = report["divergence"]["total"]
    if total:
        print(f"diverged: {total} of {args.n} trajectories")
    print(f"wrote {len(report['observables'])} series + report.json to {outdir}")
    return exit_status


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------


def _oracle_series(m, args, grid):
    cuts = args.n_max[0] if len(args.n_max) == 1 else args.n_max
    try:
        config = HilbertConfig.for_model(m, cuts)
    except OracleError as err:
        raise CLIError(f"{err}; pick smaller --n-max values") from None
    oracle_dt = args.oracle_dt if args.oracle_dt else args.dt
    span = grid.dt * grid.stride
    substeps = span / oracle_dt
    if abs(substeps - round(substeps)) > 1e-9 or round(substeps) < 1:
        raise CLIError(
            f"--oracle-dt {oracle_dt} must divide the output spacing {span:g}"
        )
    times, series = run_oracle(
        m,
        config.n_max,
        args.t1,
        oracle_dt,
        t0=args.t0,
        stride=int(round(substeps)),
    )
    return times, series, config, oracle_dt


def cmd_compare(args) -> int:
    m, sys_, gauge_file, display = _compile(args)
    grid = _grid(args)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)

    times_o, series_o, config, oracle_dt = _oracle_series(m, args, grid)
    result, n_valid, exit_status = _run_engine(sys_, grid, args)

    floor = DETERMINISTIC_FLOOR_PER_DT * args.dt
    report = _base_report(
        args, "compare", m, sys_, gauge_file, result, display, exit_status
    )
    report["compare"] = {
        "threshold": Z_THRESHOLD,
        "n_max": list(config.n_max),
        "oracle_dt": oracle_dt,
        "deterministic_floor": floor,
        "results": [],
    }

    used = set()
    ext = "csv" if args.format == "csv" else "json"
    print(f"{'observable':<16} {'max z':>10} {'at t':>10}  verdict")
    for label in result.obs_labels:
        if label.startswith("_"):
            continue
        rows = _estimate_rows(result, label, n_valid)
        fname = f"{_sanitize(label, used)}.{ext}"
        _write_rows(outdir / fname, label, rows, args.format)
        ref = series_o[label][:n_valid]
        oracle_rows = [
            (float(times_o[i]), ref[i].real, ref[i].imag, 0.0, 0.0, 0)
            for i in range(n_valid)
        ]
        oname = f"{_sanitize(label + '_oracle', used)}.{ext}"
        _write_rows(outdir / oname, label, oracle_rows, args.format)

        max_z, at_time = 0.0, float(rows[0][0])
        for i, row in enumerate(rows):
            diff = abs(complex(row[1], row[2]) - ref[i])
            stderr = row[3]
            if stderr <= ROUNDOFF_STDERR * max(1.0, abs(ref[i])):
                stderr = floor
            z = diff / stderr if stderr > 0 else float("inf")
            if z > max_z:
                max_z, at_time = z, row[0]
        passed = bool(max_z <= Z_THRESHOLD) and n_valid == grid.n_out
        if not passed:
            exit_status = EXIT_STATISTICAL
        report["compare"]["results"].append(
            {
                "label": label,
                "max_z": _finite_or_none(max_z),
                "at_time": at_time,
                "passed": passed,
            }
        )
        report["observables"].append({"label": label, "file": fname})
        print(f"{label:<16} {max_z:>10.3f} {at_time:>10.4g}  {'pass' if passed else 'FAIL'}")

    report["exit_status"] = exit_status
    _write_report(outdir, report)
    verdict = "agree" if exit_status == EXIT_OK else "DISAGREE"
    print(f"engine and oracle {verdict} at the {Z_THRESHOLD:g}-sigma policy")
    return exit_status


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="positivep",
        description="Weighted positive-P trajectory simulation of coupled "
        "boson modes and multi-level emitters.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    model_args = argparse.ArgumentParser(add_help=False)
    model_args.add_argument(
        "--model", required=True, help="model file path or bundled model name"
    )
    model_args.add_argument(
        "--formulation",
        choices=["rho", "cvar"],
        default="rho",
        help="phase-space variable set (default: rho)",
    )
    model_args.add_argument(
        "--allow-truncation",
        action="store_true",
        help="accept models whose generator is truncated at second order",
    )

    run_args = argparse.ArgumentParser(add_help=False)
    run_args.add_argument("--t0", type=float, default=0.0, help="start time")
    run_args.add_argument("--t1", type=float, required=True, help="end time")
    run_args.add_argument("--dt", type=float, required=True, help="step size")
    run_args.add_argument(
        "--stride", type=int, default=1, help="record every this many steps"
    )
    run_args.add_argument(
        "--n", type=int, required=True, help="number of trajectories"
    )
    run_args.add_argument("--seed", type=int, default=1, help="ensemble seed")
    run_args.add_argument(
        "--gauge", default=None, help="drift-gauge definition file"
    )
    run_args.add_argument(
        "--workers",
        type=int,
        default=None,
        help="thread cap for the integration kernel (default: all cores)",
    )
    run_args.add_argument(
        "--out", default=".", help="output directory (default: current)"
    )
    run_args.add_argument(
        "--format",
        choices=["csv", "json"],
        default="csv",
        help="observable table format (default: csv)",
    )

    p_validate = sub.add_parser(
        "validate",
        parents=[model_args],
        help="parse and compile a model, print its structure",
    )
    p_validate.add_argument(
        "--dump",
        action="store_true",
        help="print the drift and diffusion polynomials",
    )
    p_validate.set_defaults(func=cmd_validate)

    p_run = sub.add_parser(
        "run",
        parents=[model_args, run_args],
        help="integrate an ensemble and write observable tables",
    )
    p_run.set_defaults(func=cmd_run)

    p_compare = sub.add_parser(
        "compare",
        parents=[model_args, run_args],
        help="score the engine against the exact reference",
    )
    p_compare.add_argument(
        "--n-max",
        type=int,
        nargs="+",
        default=[8],
        help="Fock cutoff per mode for the reference (single value broadcasts)",
    )
    p_compare.add_argument(
        "--oracle-dt",
        type=float,
        default=None,
        help="reference integrator step (default: same as --dt)",
    )
    p_compare.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (
        CLIError,
        DSLError,
        ModelError,
        CompileError,
        EngineError,
        EstimatorError,
        OracleError,
        OSError,
    ) as err:
        print(f"error: {err}", file=_sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())
