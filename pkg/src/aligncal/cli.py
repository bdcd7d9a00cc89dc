"""Command-line entry point.

Four subcommands cover the workflows end to end::

    aligncal construct small3x3 --p-minus 0.2 --p-plus 0.8 --utility 1,0,1,0
    aligncal audit process.json --check alignment --alpha 0.5
    aligncal calibrate log.csv --task deepfake --method umd --bins 8
    aligncal repro log.csv --out runs/repro

Every subcommand is deterministic given its flags: one ``--seed`` feeds
named substreams, outputs land in a run directory next to a manifest
recording the resolved configuration and library versions (no timestamps),
and repeated runs write byte-identical files.  Exit codes are a stable
contract: 0 success/pass, 1 audit fail, 2 input or usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import zlib
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .constructions import (
    ConstructionSpec,
    build_continuous,
    build_grid,
    build_small_example,
)
from .core import (
    ModelError,
    Utility,
    decision_threshold,
    process_from_json_dict,
    process_to_json_dict,
)
from .data import (
    advice_shift_table,
    build_cell_table,
    cell_table_rows,
    policy_auc,
    read_records,
    roc_rows,
    shift_table_rows,
    transform_records,
)
from .metrics import (
    GroupWitness,
    cell_table_from_samples,
    check_alignment,
    check_calibration,
    misalignment_metrics,
    miscalibration_metrics,
)
from .multical import (
    ConvergenceError,
    multicalibrate_iterative,
    multicalibrate_umd,
    umd_min_group_size,
)

OUTPUT_DIR_ENV = "ALIGNCAL_OUT"

EXIT_OK = 0
EXIT_AUDIT_FAILED = 1
EXIT_USAGE = 2


class CLIError(ModelError):
    """Bad invocation caught before any computation runs."""


@dataclass(frozen=True)
class RunConfig:
    """Resolved invocation: subcommand plus every flag, manifest-ready."""

    subcommand: str
    options: dict

    def __post_init__(self):
        for name in ("alpha", "lam", "xi", "gamma"):
            v = self.options.get(name)
            if v is not None and not 0 <= v <= 1:
                raise CLIError(f"--{name.replace('lam', 'lambda')} must lie in [0, 1]")
        seed = self.options.get("seed")
        if seed is not None and seed < 0:
            raise CLIError("--seed must be non-negative")

    def manifest(self) -> dict:
        config = {"subcommand": self.subcommand}
        config.update((k, _jsonable(v)) for k, v in sorted(self.options.items()))
        return {
            "config": config,
            "versions": {
                "aligncal": __version__,
                "numpy": np.__version__,
                "python": "%d.%d.%d" % sys.version_info[:3],
            },
        }


def _jsonable(v):
    if isinstance(v, Fraction):
        return str(v)
    if isinstance(v, Utility):
        return ",".join(str(x) for x in (v.u11, v.u10, v.u00, v.u01))
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def _run_config(args) -> RunConfig:
    options = {
        k: v for k, v in vars(args).items() if k not in ("func", "subcommand")
    }
    return RunConfig(subcommand=args.subcommand, options=options)


def _fraction(text: str) -> Fraction:
    try:
        return Fraction(text)
    except (ValueError, ZeroDivisionError) as exc:
        raise argparse.ArgumentTypeError(f"not a number: {text!r} ({exc})")


def _utility(text: str) -> Utility:
    parts = text.split(",")
    if len(parts) != 4:
        raise argparse.ArgumentTypeError(
            "utility must be four comma-separated numbers u11,u10,u00,u01"
        )
    return Utility(*(Fraction(p) for p in parts))


def _substream(seed: int, name: str) -> int:
    """Derive a named child seed from the single --seed flag."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


def _out_dir(args) -> Path:
    out = args.out or os.environ.get(OUTPUT_DIR_ENV) or f"aligncal-{args.subcommand}"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_csv(path: Path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh).writerows(rows)


def _emit(out: Path, args, files: dict) -> None:
    _write_json(out / "manifest.json", _run_config(args).manifest())
    for name, doc in files.items():
        _write_json(out / name, doc)


# ---------------------------------------------------------------------------
# construct


_FAMILIES = {"small3x3": "small_3x3", "grid": "grid", "continuous": "continuous"}


def cmd_construct(args) -> int:
    spec = ConstructionSpec(
        kind=_FAMILIES[args.family],
        p_minus=args.p_minus,
        p_plus=args.p_plus,
        utility=args.utility,
        k=args.k,
        m=args.m,
        n_discretization=args.n_disc,
        seed=args.seed,
    )
    builder = {
        "small_3x3": build_small_example,
        "grid": build_grid,
        "continuous": build_continuous,
    }[spec.kind]
    proc = builder(spec)
    out = _out_dir(args)
    _emit(out, args, {"process.json": process_to_json_dict(proc)})
    print(f"{args.family}: {proc.n_h} h-levels x {proc.n_b} b-levels")
    print("b_values:", " ".join(f"{float(b):g}" for b in proc.b_values))
    print(f"decision threshold c = {float(decision_threshold(proc.utility)):g}")
    print(f"wrote {out / 'process.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# audit


def _load_auditable(args):
    """A process (JSON input) or empirical cell table (CSV log input)."""
    path = Path(args.input)
    if path.suffix.lower() == ".json":
        return process_from_json_dict(json.loads(path.read_text(encoding="utf-8")))
    records, _ = read_records(path, skip_bad_rows=args.skip_bad_rows)
    transformed = transform_records(records)
    tasks = sorted({r.task for r in transformed})
    task = args.task
    if task is None:
        if len(tasks) > 1:
            raise CLIError(f"log holds tasks {tasks}; pick one with --task")
        task = tasks[0]
    return build_cell_table(transformed, task)


def _witness_doc(w):
    if isinstance(w, GroupWitness):
        return {
            "kind": "group",
            "h": None if w.h is None else float(w.h),
            "b": float(w.b),
            "gap": float(w.gap),
            "mass_fraction": float(w.mass_fraction),
        }
    return {
        "kind": "pair",
        "lo": [float(x) for x in w.lo],
        "hi": [float(x) for x in w.hi],
        "gap": float(w.gap),
    }


def _report_doc(check: str, report) -> dict:
    return {
        "check": check,
        "passed": report.passed,
        "alpha": float(report.alpha),
        "excluded_mass": float(report.excluded_mass),
        "exact_search": report.exact_search,
        "kept_cells": None
        if report.kept_cells is None
        else [list(c) for c in report.kept_cells],
        "note": report.note,
        "witnesses": [_witness_doc(w) for w in report.witnesses],
    }


_MAX_WITNESS_LINES = 8


def cmd_audit(args) -> int:
    obj = _load_auditable(args)
    checks = (
        ["calibration", "alignment"]
        if args.check == "aligned-calibration"
        else [args.check]
    )
    reports = []
    for check in checks:
        fn = check_calibration if check == "calibration" else check_alignment
        reports.append((check, fn(obj, args.alpha)))
    out = _out_dir(args)
    _emit(
        out,
        args,
        {"audit.json": {"passed": all(r.passed for _, r in reports),
                        "reports": [_report_doc(c, r) for c, r in reports]}},
    )
    for check, report in reports:
        print(f"{check:>20s}  alpha={float(args.alpha):g}  "
              f"{'PASS' if report.passed else 'FAIL'}")
        shown = report.witnesses[:_MAX_WITNESS_LINES]
        for w in shown:
            d = _witness_doc(w)
            if d["kind"] == "group":
                where = f"b={d['b']:g}" + ("" if d["h"] is None else f" | h={d['h']:g}")
                print(f"{'':>22s}witness: {where}  gap {d['gap']:g}")
            else:
                lo = tuple(f"{x:g}" for x in d["lo"])
                hi = tuple(f"{x:g}" for x in d["hi"])
                print(f"{'':>22s}witness: rate drops {d['gap']:g} "
                      f"from ({', '.join(lo)}) to ({', '.join(hi)})")
        hidden = len(report.witnesses) - len(shown)
        if hidden:
            print(f"{'':>22s}... and {hidden} more (see audit.json)")
    return EXIT_OK if all(r.passed for _, r in reports) else EXIT_AUDIT_FAILED


# ---------------------------------------------------------------------------
# calibrate


def _task_samples(args):
    records, _ = read_records(Path(args.log), skip_bad_rows=args.skip_bad_rows)
    transformed = transform_records(records)
    tasks = sorted({r.task for r in transformed})
    task = args.task
    if task is None:
        if len(tasks) > 1:
            raise CLIError(f"log holds tasks {tasks}; pick one with --task")
        task = tasks[0]
    sub = [r for r in transformed if r.task == task]
    if not sub:
        raise CLIError(f"no records for task {task!r}")
    return task, sub


def _sample_metrics(h, b, y, lam, min_count):
    tbl = cell_table_from_samples(h, b, y, lam=lam, min_count=min_count)
    mm = misalignment_metrics(tbl)
    mc = miscalibration_metrics(tbl)
    return {
        "eae": float(mm.eae),
        "mae": float(mm.mae),
        "violations": mm.violation_count,
        "ece": float(mc.ece),
        "mce": float(mc.mce),
    }


def cmd_calibrate(args) -> int:
    if args.method == "umd" and args.bins is None:
        raise CLIError("--method umd requires --bins")
    if args.method == "iterative" and (args.alpha is None or args.lam is None):
        raise CLIError("--method iterative requires --alpha and --lambda")

    task, sub = _task_samples(args)
    h = [r.h for r in sub]
    b = [r.b for r in sub]
    y = [r.y for r in sub]
    strata = sorted({v for v in h})
    counts = {lev: sum(1 for v in h if v == lev) for lev in strata}

    if args.method == "iterative":
        floor = umd_min_group_size(args.alpha, args.lam, args.xi, len(strata))
        short = {lev: n for lev, n in counts.items() if n < floor}
        if short:
            lev, n = min(short.items(), key=lambda kv: kv[1])
            raise CLIError(
                f"stratum {lev:g} has {n} samples but calibrating at "
                f"alpha={float(args.alpha):g}, lambda={float(args.lam):g}, "
                f"xi={float(args.xi):g} needs at least {floor} per group"
            )
        func = multicalibrate_iterative(
            list(zip(h, b, y)), alpha_prime=args.alpha, lam=args.lam
        )
        table_lam = args.lam
    else:
        func = multicalibrate_umd(
            list(zip(h, b, y)),
            n_bins=args.bins,
            jitter=args.jitter,
            seed=_substream(args.seed, "umd-jitter"),
        )
        table_lam = Fraction(1, 8)

    b_after = [func(hv, bv) for hv, bv in zip(h, b)]
    before = _sample_metrics(h, b, y, table_lam, args.min_count)
    after = _sample_metrics(h, b_after, y, table_lam, args.min_count)

    out = _out_dir(args)
    _emit(
        out,
        args,
        {
            "function.json": func.to_json_dict(),
            "calibration_report.json": {
                "task": task,
                "method": args.method,
                "n": len(sub),
                "strata": {f"{lev:g}": counts[lev] for lev in strata},
                "before": before,
                "after": after,
            },
        },
    )
    print(f"task {task}: {len(sub)} records, {len(strata)} strata ({args.method})")
    print(f"{'metric':>8s} {'before':>10s} {'after':>10s}")
    for key in ("eae", "mae", "ece", "mce"):
        print(f"{key.upper():>8s} {before[key]:>10.4f} {after[key]:>10.4f}")
    print(f"wrote {out / 'function.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# repro


def _slug(text: str) -> str:
    return "".join(ch if ch.isalnum() else "-" for ch in text)


_REPORT_COLUMNS = ("EAE", "MAE", "ECE", "MCE", "AUC(B)", "AUC(H)", "AUC(H+AI)")


def _format_report_lines(per_task: dict) -> list:
    width = max([len("task")] + [len(t) for t in per_task])
    head = f"{'task':<{width}s}  " + "  ".join(f"{c:>9s}" for c in _REPORT_COLUMNS)
    lines = [head, "-" * len(head)]
    for task, row in per_task.items():
        cells = [f"{row[k]:>9.3g}" for k in ("eae", "mae", "ece", "mce")]
        for src in ("b", "h", "h_ai"):
            auc = row["auc"][src]
            cells.append(f"{'n/a':>9s}" if auc is None else f"{100 * auc:>8.1f}%")
        lines.append(f"{task:<{width}s}  " + "  ".join(cells))
    return lines


def cmd_repro(args) -> int:
    records, _ = read_records(Path(args.log), skip_bad_rows=args.skip_bad_rows)
    transformed = transform_records(records)
    present = sorted({r.task for r in transformed})
    tasks = args.tasks or present
    missing = [t for t in tasks if t not in present]
    for t in missing:
        print(f"warning: task {t!r} not in log; skipping", file=sys.stderr)

    out = _out_dir(args)
    per_task = {}
    for task in [t for t in tasks if t in present]:
        tbl = build_cell_table(transformed, task)
        mm = misalignment_metrics(tbl)
        mc = miscalibration_metrics(tbl)
        shift = advice_shift_table(
            transformed,
            task,
            n_boot=args.boot,
            seed=_substream(args.seed, "shift-bootstrap"),
            cluster_by_participant=args.cluster_by_participant,
        )
        _write_csv(out / f"cells_{_slug(task)}.csv", cell_table_rows(tbl))
        _write_csv(out / f"shifts_{_slug(task)}.csv", shift_table_rows(shift))
        aucs = {}
        for src in ("B", "H", "H_AI"):
            try:
                points, auc = policy_auc(transformed, task, src)
            except ModelError as exc:
                print(f"warning: AUC({src}) undefined for {task!r}: {exc}",
                      file=sys.stderr)
                aucs[src.lower()] = None
                continue
            aucs[src.lower()] = auc
            _write_csv(out / f"roc_{_slug(task)}_{src.lower()}.csv", roc_rows(points))
        per_task[task] = {
            "n": sum(1 for r in transformed if r.task == task),
            "eae": float(mm.eae),
            "mae": float(mm.mae),
            "ece": float(mc.ece),
            "mce": float(mc.mce),
            "auc": aucs,
        }

    lines = _format_report_lines(per_task)
    (out / "table.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _emit(out, args, {"report.json": {"tasks": per_task, "missing_tasks": missing}})
    print("\n".join(lines))
    print(f"wrote {out / 'report.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aligncal",
        description="Audit, construct, calibrate, and reproduce "
        "human-aligned confidence analyses.",
    )
    parser.add_argument("--version", action="version", version=f"aligncal {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help=f"run directory (default: env {OUTPUT_DIR_ENV} "
                        "or ./aligncal-<subcommand>)")
    common.add_argument("--seed", type=int, default=0,
                        help="root seed; all randomness derives from it")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    c = sub.add_parser("construct", parents=[common],
                       help="materialize an analytic decision process as JSON")
    c.add_argument("family", choices=sorted(_FAMILIES))
    c.add_argument("--p-minus", type=_fraction, default=Fraction(1, 5))
    c.add_argument("--p-plus", type=_fraction, default=Fraction(4, 5))
    c.add_argument("--utility", type=_utility, default=Utility(1, 0, 1, 0),
                   help="u11,u10,u00,u01")
    c.add_argument("--k", type=int, help="human levels (grid/continuous)")
    c.add_argument("--m", type=int, help="classifier levels (grid)")
    c.add_argument("--n-disc", type=int, default=16,
                   help="sub-bins per interval (continuous)")
    c.set_defaults(func=cmd_construct)

    a = sub.add_parser("audit", parents=[common],
                       help="run calibration/alignment audits on a process or log")
    a.add_argument("input", help="process JSON or prediction-log CSV")
    a.add_argument("--check", required=True,
                   choices=["calibration", "alignment", "aligned-calibration"])
    a.add_argument("--alpha", type=_fraction, required=True)
    a.add_argument("--task", help="task to audit when the input is a CSV log")
    a.add_argument("--skip-bad-rows", action="store_true")
    a.set_defaults(func=cmd_audit)

    l = sub.add_parser("calibrate", parents=[common],
                       help="fit a per-stratum discretized confidence function")
    l.add_argument("log", help="prediction-log CSV")
    l.add_argument("--task")
    l.add_argument("--method", required=True, choices=["umd", "iterative"])
    l.add_argument("--bins", type=int, help="quantile bins per stratum (umd)")
    l.add_argument("--alpha", type=_fraction, help="target level (iterative)")
    l.add_argument("--lambda", dest="lam", type=_fraction,
                   help="bin width (iterative)")
    l.add_argument("--xi", type=_fraction, default=Fraction(1, 10),
                   help="failure probability for the sample-size floor")
    l.add_argument("--jitter", action="store_true",
                   help="break ties in b before quantile binning (umd)")
    l.add_argument("--min-count", type=int, default=30)
    l.add_argument("--skip-bad-rows", action="store_true")
    l.set_defaults(func=cmd_calibrate)

    r = sub.add_parser("repro", parents=[common],
                       help="per-task metric table plus figure CSVs from a log")
    r.add_argument("log", help="prediction-log CSV")
    r.add_argument("--tasks", nargs="*", help="expected tasks (default: all in log)")
    r.add_argument("--boot", type=int, default=1000,
                   help="bootstrap resamples for shift intervals")
    r.add_argument("--cluster-by-participant", action="store_true")
    r.add_argument("--skip-bad-rows", action="store_true")
    r.set_defaults(func=cmd_repro)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _run_config(args)  # validate ranges before touching any input
        return args.func(args)
    except ConvergenceError as exc:
        print(f"aligncal: {exc}", file=sys.stderr)
        return EXIT_AUDIT_FAILED
    except (ModelError, OSError, json.JSONDecodeError) as exc:
        print(f"aligncal: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
