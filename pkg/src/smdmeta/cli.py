"""Command-line surface: analyze real data, run simulations, render plots.

Exit codes: 0 ok, 2 input error, 3 data invariant violation, 4 numerical
non-convergence summary.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import tempfile
from dataclasses import dataclass

from . import simlab, svgplot
from .numkernel import DomainError
from .qstat import MetaInput
from .smd import ArmSummary, Study, hedges_g

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_INVARIANT = 3
EXIT_NONCONVERGENCE = 4

RESULTS_HEADER = ("delta", "tau2", "k", "pattern", "n_bar", "q",
                  "estimator", "metric", "value", "mc_se", "reps", "seed")

RAW_COLUMNS = ("mean_t", "sd_t", "mean_c", "sd_c")
PRECOMP_COLUMNS = ("g", "var_g")

FAMILIES = {
    "equal-main": ("equal", (20, 40, 100, 250)),
    "equal-small": ("equal", (30, 50, 60, 70)),
    "unequal": ("unequal", (30, 60, 100, 160)),
}

METRIC_ESTIMATORS = {
    "tau2_bias": list(simlab.TAU2_POINT),
    "tau2_trunc_rate": list(simlab.TAU2_POINT),
    "tau2_coverage": list(simlab.TAU2_CI),
    "delta_bias": list(simlab.DELTA_POINT),
    "delta_coverage": list(simlab.DELTA_CI),
    "delta_mse_ratio": [label for label, _, _ in simlab.MSE_RATIOS],
}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class AnalysisRequest:
    input_path: str
    tau2_methods: tuple[str, ...]
    delta_methods: tuple[str, ...]
    level: float
    output_format: str  # "text" | "json"

    def __post_init__(self):
        if not 0.5 < self.level < 1.0:
            raise CliError(f"--level must be in (0.5, 1), got {self.level}",
                           EXIT_INPUT)
        if not self.tau2_methods and not self.delta_methods:
            raise CliError("at least one method must be requested", EXIT_INPUT)


@dataclass(frozen=True)
class ResultsRow:
    delta: float
    tau2: float
    k: int
    pattern: str
    n_bar: int
    q: float
    estimator: str
    metric: str
    value: float
    mc_se: float
    reps: int
    seed: int


def _fmt(x: float) -> str:
    return "%.9g" % x


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def _cell_float(row: dict, col: str, line_no: int) -> float:
    raw = (row.get(col) or "").strip()
    if raw == "":
        raise CliError(f"row {line_no}: missing value in column '{col}'",
                       EXIT_INPUT)
    try:
        return float(raw)
    except ValueError:
        raise CliError(f"row {line_no}: column '{col}' is not a number: "
                       f"{raw!r}", EXIT_INPUT)


def _cell_int(row: dict, col: str, line_no: int) -> int:
    val = _cell_float(row, col, line_no)
    if val != int(val):
        raise CliError(f"row {line_no}: column '{col}' must be an integer, "
                       f"got {val}", EXIT_INPUT)
    return int(val)


def read_analysis_csv(path: str) -> MetaInput:
    """Parse the analyze input schema.

    Columns: study_id, n_t, n_c, then arm summaries (mean_t, sd_t, mean_c,
    sd_c) and/or precomputed (g, var_g).  When both are present the raw
    summaries win and a mismatch beyond 1e-6 is an invariant violation.
    """
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise CliError(f"cannot open input: {exc}", EXIT_INPUT)
    with fh:
        reader = csv.DictReader(fh)
        cols = set(reader.fieldnames or ())
        for col in ("study_id", "n_t", "n_c"):
            if col not in cols:
                raise CliError(f"missing required column '{col}'", EXIT_INPUT)
        has_raw = all(c in cols for c in RAW_COLUMNS)
        has_pre = all(c in cols for c in PRECOMP_COLUMNS)
        if not has_raw and not has_pre:
            raise CliError(
                "need either arm-summary columns "
                f"{RAW_COLUMNS} or precomputed columns {PRECOMP_COLUMNS}",
                EXIT_INPUT)
        studies = []
        for line_no, row in enumerate(reader, start=2):
            n_t = _cell_int(row, "n_t", line_no)
            n_c = _cell_int(row, "n_c", line_no)
            try:
                if has_raw:
                    study = hedges_g(
                        ArmSummary(n_t, _cell_float(row, "mean_t", line_no),
                                   _cell_float(row, "sd_t", line_no)),
                        ArmSummary(n_c, _cell_float(row, "mean_c", line_no),
                                   _cell_float(row, "sd_c", line_no)))
                    if has_pre:
                        g = _cell_float(row, "g", line_no)
                        var_g = _cell_float(row, "var_g", line_no)
                        if abs(study.g - g) > 1e-6 or abs(study.v2 - var_g) > 1e-6:
                            raise CliError(
                                f"row {line_no}: precomputed (g, var_g) "
                                f"disagree with arm summaries by more than "
                                f"1e-6", EXIT_INVARIANT)
                else:
                    study = Study(n_t, n_c,
                                  _cell_float(row, "g", line_no),
                                  _cell_float(row, "var_g", line_no))
            except DomainError as exc:
                raise CliError(f"row {line_no}: {exc}", EXIT_INVARIANT)
            studies.append(study)
    if len(studies) < 2:
        raise CliError(f"need at least 2 studies, got {len(studies)}",
                       EXIT_INVARIANT)
    return MetaInput(tuple(studies))


def _analysis_payload(est: simlab.ReplicateEstimates,
                      request: AnalysisRequest) -> dict:
    out: dict = {"level": request.level, "tau2": {}, "tau2_intervals": {},
                 "delta": {}, "delta_intervals": {}, "failures": []}
    for name in request.tau2_methods:
        if name in est.tau2_points:
            r = est.tau2_points[name]
            out["tau2"][name] = {"estimate": r.value, "status": r.status,
                                 "iterations": r.iterations}
        if name in est.tau2_intervals:
            ci = est.tau2_intervals[name]
            out["tau2_intervals"][name] = {
                "lo": ci.lo, "hi": ci.hi, "flags": list(ci.flags)}
    # QP/BJ/PL interval methods that have no point-estimator namesake
    for name in simlab.TAU2_CI:
        if name in request.tau2_methods and name not in out["tau2_intervals"] \
                and name in est.tau2_intervals:
            ci = est.tau2_intervals[name]
            out["tau2_intervals"][name] = {
                "lo": ci.lo, "hi": ci.hi, "flags": list(ci.flags)}
    for name, res in est.delta_points.items():
        out["delta"][name] = {"estimate": res.value, "variance": res.variance}
    for name in request.delta_methods:
        if name in est.delta_intervals:
            ci = est.delta_intervals[name]
            out["delta_intervals"][name] = {
                "center": ci.center, "half_width": ci.half_width,
                "lo": ci.lo, "hi": ci.hi, "flags": list(ci.flags)}
    out["failures"] = [{"estimator": n, "message": m} for n, m in est.failures]
    return out


def _print_analysis_text(payload: dict, out=None) -> None:
    w = (out or sys.stdout).write
    w(f"confidence level: {payload['level']:g}\n\n")
    w("tau^2 point estimates\n")
    for name, r in payload["tau2"].items():
        w(f"  {name:<6} {_fmt(r['estimate']):>12}  {r['status']}"
          f" ({r['iterations']} iter)\n")
    w("\ntau^2 intervals\n")
    for name, ci in payload["tau2_intervals"].items():
        flags = f"  [{', '.join(ci['flags'])}]" if ci["flags"] else ""
        w(f"  {name:<6} [{_fmt(ci['lo'])}, {_fmt(ci['hi'])}]{flags}\n")
    w("\noverall effect\n")
    for name, r in payload["delta"].items():
        w(f"  {name:<8} {_fmt(r['estimate']):>12}  var {_fmt(r['variance'])}\n")
    w("\ndelta intervals\n")
    for name, ci in payload["delta_intervals"].items():
        flags = f"  [{', '.join(ci['flags'])}]" if ci["flags"] else ""
        w(f"  {name:<9} {_fmt(ci['center']):>12} +/- {_fmt(ci['half_width'])}"
          f"  -> [{_fmt(ci['lo'])}, {_fmt(ci['hi'])}]{flags}\n")
    if payload["failures"]:
        w("\nnon-convergent estimators\n")
        for f in payload["failures"]:
            w(f"  {f['estimator']}: {f['message']}\n")


def cmd_analyze(args) -> int:
    tau2_methods = tuple(args.tau2_methods.split(",")) if args.tau2_methods \
        else tuple(dict.fromkeys(simlab.TAU2_POINT + simlab.TAU2_CI))
    delta_methods = tuple(args.delta_methods.split(",")) if args.delta_methods \
        else simlab.DELTA_CI
    request = AnalysisRequest(args.input, tau2_methods, delta_methods,
                              args.level, args.format)
    for name in request.tau2_methods:
        if name not in set(simlab.TAU2_POINT) | set(simlab.TAU2_CI):
            raise CliError(f"unknown tau^2 method '{name}'", EXIT_INPUT)
    for name in request.delta_methods:
        if name not in simlab.DELTA_CI:
            raise CliError(f"unknown delta interval method '{name}'",
                           EXIT_INPUT)
    data = read_analysis_csv(request.input_path)
    est = simlab.estimate_all(data, request.level)
    payload = _analysis_payload(est, request)
    if request.output_format == "json":
        json.dump(payload, sys.stdout, indent=2, allow_nan=True)
        sys.stdout.write("\n")
    else:
        _print_analysis_text(payload)
    if est.failures:
        print(f"{len(est.failures)} estimator(s) did not converge",
              file=sys.stderr)
        return EXIT_NONCONVERGENCE
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def _float_list(text: str, flag: str) -> tuple[float, ...]:
    try:
        return tuple(float(tok) for tok in text.split(","))
    except ValueError:
        raise CliError(f"{flag}: expected comma-separated numbers, got "
                       f"{text!r}", EXIT_INPUT)


def _int_list(text: str, flag: str) -> tuple[int, ...]:
    vals = _float_list(text, flag)
    if any(v != int(v) for v in vals):
        raise CliError(f"{flag}: expected integers, got {text!r}", EXIT_INPUT)
    return tuple(int(v) for v in vals)


def results_rows(report: simlab.CellReport) -> list[ResultsRow]:
    cell = report.cell
    return [ResultsRow(cell.delta, cell.tau2, cell.k, cell.pattern, cell.size,
                       cell.q, row.estimator, row.metric, row.value, row.mc_se,
                       cell.reps, cell.seed)
            for row in report.rows]


def write_results_csv(path: str, reports: list[simlab.CellReport]) -> None:
    """Write the long-format results CSV atomically (temp file + rename)."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(",".join(RESULTS_HEADER) + "\n")
            for report in reports:
                for r in results_rows(report):
                    fh.write(",".join((
                        _fmt(r.delta), _fmt(r.tau2), str(r.k), r.pattern,
                        str(r.n_bar), _fmt(r.q), r.estimator, r.metric,
                        _fmt(r.value), _fmt(r.mc_se), str(r.reps),
                        str(r.seed))) + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def cmd_simulate(args) -> int:
    if args.n is None and args.nbar is None:
        raise CliError("need --n (equal sizes) and/or --nbar (unequal sizes)",
                       EXIT_INPUT)
    if not 0.5 < args.level < 1.0:
        raise CliError(f"--level must be in (0.5, 1), got {args.level}",
                       EXIT_INPUT)
    config = simlab.GridConfig(
        deltas=_float_list(args.delta, "--delta"),
        tau2s=_float_list(args.tau2, "--tau2"),
        ks=_int_list(args.k, "--k"),
        equal_sizes=_int_list(args.n, "--n") if args.n else (),
        unequal_sizes=_int_list(args.nbar, "--nbar") if args.nbar else (),
        qs=_float_list(args.q, "--q"),
        reps=args.reps, chunks=args.chunks, seed=args.seed)
    try:
        cells = simlab.expand_grid(config, allow_custom=args.allow_custom)
    except simlab.GridValidationError as exc:
        raise CliError(str(exc), EXIT_INPUT)
    reports = simlab.run_grid(cells, level=args.level, threads=args.threads)
    write_results_csv(args.out, reports)
    print(f"wrote {sum(len(r.rows) for r in reports)} rows "
          f"for {len(cells)} cell(s) to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# plot
# ---------------------------------------------------------------------------

def _read_results(path: str) -> list[dict]:
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise CliError(f"cannot open results: {exc}", EXIT_INPUT)
    with fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RESULTS_HEADER:
            raise CliError(
                f"results header mismatch: expected {','.join(RESULTS_HEADER)}",
                EXIT_INPUT)
        return list(reader)


def cmd_plot(args) -> int:
    rows = _read_results(args.results)
    metric = args.metric
    if metric not in METRIC_ESTIMATORS:
        raise CliError(f"unknown metric '{metric}'; choose from "
                       f"{sorted(METRIC_ESTIMATORS)}", EXIT_INPUT)
    estimators = METRIC_ESTIMATORS[metric]
    data: dict = {}
    for r in rows:
        if r["metric"] != metric:
            continue
        key = (float(r["delta"]), float(r["q"]), r["pattern"], int(r["n_bar"]),
               int(r["k"]), r["estimator"])
        data.setdefault(key, []).append((float(r["tau2"]), float(r["value"])))

    if args.delta is not None and args.q is not None and args.family:
        combos = [(float(args.delta), float(args.q), args.family)]
    else:
        combos = sorted({
            (d, q, fam)
            for (d, q, pattern, size, _k, _e) in data
            for fam, (fpattern, fsizes) in FAMILIES.items()
            if pattern == fpattern and size in fsizes})
        if args.delta is not None:
            combos = [c for c in combos if c[0] == float(args.delta)]
        if args.q is not None:
            combos = [c for c in combos if c[1] == float(args.q)]
        if args.family:
            combos = [c for c in combos if c[2] == args.family]
    if not combos:
        raise CliError("no matching figures in the results file", EXIT_INPUT)

    os.makedirs(args.out_dir, exist_ok=True)
    written = []
    for delta, q, family in combos:
        pattern, sizes = FAMILIES[family]
        ks = [5, 10, 30]
        series = {}
        missing = []
        for size in sizes:
            for k in ks:
                panel_ok = False
                for name in estimators:
                    pts = data.get((delta, q, pattern, size, k, name))
                    if pts:
                        series[(size, k, name)] = sorted(pts)
                        panel_ok = True
                if not panel_ok:
                    missing.append(f"(n={size}, K={k})")
        if missing:
            raise CliError(
                f"missing cells for metric={metric}, delta={delta:g}, "
                f"q={q:g}, family={family}: {', '.join(missing)}", EXIT_INPUT)
        reference = None
        if metric.endswith("coverage"):
            reference = args.level
        elif metric.endswith("bias"):
            reference = 0.0
        elif metric == "delta_mse_ratio":
            reference = 1.0
        title = (f"{metric}  |  delta={delta:g}, q={q:g}, {family} sizes")
        svg = svgplot.figure_svg(title, list(sizes), ks, series, estimators,
                                 reference)
        name = f"{metric}_delta{delta:g}_q{q:g}_{family}.svg"
        path = os.path.join(args.out_dir, name)
        with open(path, "w") as fh:
            fh.write(svg)
        written.append(path)
    for path in written:
        print(path)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smdmeta",
        description="Random-effects meta-analysis of the standardized mean "
                    "difference, and its simulation lab.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="estimate tau^2 and the overall "
                                       "effect from a study-level CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.add_argument("--tau2-methods", default="",
                   help="comma list from DL,MP,REML,J,KDB,QP,BJ,PL")
    p.add_argument("--delta-methods", default="",
                   help="comma list from " + ",".join(simlab.DELTA_CI))
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("simulate", help="run simulation cells and write a "
                                        "long-format results CSV")
    p.add_argument("--delta", required=True, help="comma list")
    p.add_argument("--tau2", required=True, help="comma list")
    p.add_argument("--k", required=True, help="comma list")
    p.add_argument("--q", required=True, help="comma list")
    p.add_argument("--n", default=None, help="equal study sizes, comma list")
    p.add_argument("--nbar", default=None,
                   help="unequal mean sizes, comma list")
    p.add_argument("--reps", type=int, default=2000)
    p.add_argument("--chunks", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--out", required=True)
    p.add_argument("--allow-custom", action="store_true",
                   help="accept grid values outside the built-in table")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("plot", help="render 4x3 panel SVG figures from a "
                                    "results CSV")
    p.add_argument("--results", required=True)
    p.add_argument("--metric", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--delta", default=None)
    p.add_argument("--q", default=None)
    p.add_argument("--family", default=None, choices=sorted(FAMILIES))
    p.add_argument("--level", type=float, default=0.95)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
