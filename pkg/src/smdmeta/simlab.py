"""Monte-Carlo simulation lab: parameter grid, exact data generation,
deterministic chunked replication, and bias/coverage/MSE metrics.

Replicate streams are keyed by (seed, cell coordinates, replicate index)
only, so results are bit-identical for a fixed seed no matter how the
replications are chunked or scheduled.  Chunks return per-replicate arrays
and all aggregation happens once, in global replicate order.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import effect as eff
from . import tau2 as t2
from .numkernel import NonConvergenceError, RandomStream, derive_stream_id
from .qstat import MetaInput
from .smd import sample_g

DELTAS = (0.0, 0.2, 0.5, 1.0, 2.0)
TAU2S = (0.0, 0.5, 1.0, 1.5, 2.0, 2.5)
KS = (5, 10, 30)
EQUAL_SIZES = (20, 40, 100, 250, 30, 50, 60, 70)
UNEQUAL_SIZES = {
    30: (12, 16, 18, 20, 84),
    60: (24, 32, 36, 40, 168),
    100: (64, 72, 76, 80, 208),
    160: (124, 132, 136, 140, 268),
}
QS = (0.5, 0.75)

TAU2_POINT = t2.POINT_METHODS
TAU2_CI = t2.INTERVAL_METHODS
DELTA_POINT = eff.POINT_METHODS
DELTA_CI = eff.INTERVAL_METHODS
MSE_ESTIMATORS = ("SSW", "IV-KDB", "IV-MP")
MSE_RATIOS = (("SSW/IV-KDB", "SSW", "IV-KDB"), ("SSW/IV-MP", "SSW", "IV-MP"))


class GridValidationError(ValueError):
    """A grid value is outside the supported parameter table."""

    def __init__(self, fld: str, value):
        super().__init__(f"unsupported value for {fld}: {value!r} "
                         f"(pass allow_custom to override)")
        self.field = fld


@dataclass(frozen=True)
class SimCell:
    """One parameter combination of the simulation grid."""

    delta: float
    tau2: float
    k: int
    pattern: str  # "equal" | "unequal"
    size: int     # n for equal, mean size nbar for unequal
    q: float      # proportion of each study in the control arm
    reps: int = 2000
    chunks: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.pattern not in ("equal", "unequal"):
            raise GridValidationError("pattern", self.pattern)
        if self.reps <= 0 or self.chunks <= 0:
            raise GridValidationError("reps/chunks", (self.reps, self.chunks))
        if self.reps % self.chunks != 0:
            raise GridValidationError(
                "chunks", f"{self.chunks} does not divide reps={self.reps}")

    def coord_parts(self) -> tuple:
        """Cell coordinates that key the random streams (reps/chunks/seed
        excluded, so the same seed extends rather than reshuffles)."""
        return (self.delta, self.tau2, self.k, self.pattern, self.size, self.q)


def validate_cell(cell: SimCell, allow_custom: bool = False) -> None:
    if cell.pattern == "unequal":
        if cell.size not in UNEQUAL_SIZES:
            raise GridValidationError("size (unequal nbar)", cell.size)
        if cell.k % 5 != 0:
            raise GridValidationError("k", f"{cell.k} not divisible by 5 "
                                           "under the unequal pattern")
    if allow_custom:
        return
    if cell.delta not in DELTAS:
        raise GridValidationError("delta", cell.delta)
    if cell.tau2 not in TAU2S:
        raise GridValidationError("tau2", cell.tau2)
    if cell.k not in KS:
        raise GridValidationError("k", cell.k)
    if cell.q not in QS:
        raise GridValidationError("q", cell.q)
    if cell.pattern == "equal" and cell.size not in EQUAL_SIZES:
        raise GridValidationError("size (equal n)", cell.size)


def study_sizes(cell: SimCell) -> tuple[tuple[int, int], ...]:
    """Arm sizes (n_t, n_c) for every study in the cell.

    Equal pattern: K copies of the cell size.  Unequal pattern: the
    five-study size vector for nbar repeated K/5 times.  Arms split as
    n_t = ceil((1 - q) n), n_c = n - n_t.
    """
    if cell.pattern == "equal":
        totals = (cell.size,) * cell.k
    else:
        base = UNEQUAL_SIZES.get(cell.size)
        if base is None:
            raise GridValidationError("size (unequal nbar)", cell.size)
        if cell.k % 5 != 0:
            raise GridValidationError("k", cell.k)
        totals = base * (cell.k // 5)
    out = []
    for n in totals:
        n_t = math.ceil((1.0 - cell.q) * n)
        out.append((n_t, n - n_t))
    return tuple(out)


@dataclass(frozen=True)
class GridConfig:
    deltas: tuple[float, ...] = DELTAS
    tau2s: tuple[float, ...] = TAU2S
    ks: tuple[int, ...] = KS
    equal_sizes: tuple[int, ...] = EQUAL_SIZES
    unequal_sizes: tuple[int, ...] = tuple(UNEQUAL_SIZES)
    qs: tuple[float, ...] = QS
    reps: int = 2000
    chunks: int = 10
    seed: int = 0


def expand_grid(config: GridConfig, allow_custom: bool = False) -> list[SimCell]:
    """Cartesian product in lexicographic (delta, tau2, k, sizes, q) order."""
    size_specs = [("equal", n) for n in config.equal_sizes]
    size_specs += [("unequal", n) for n in config.unequal_sizes]
    cells = []
    for delta in config.deltas:
        for tau2 in config.tau2s:
            for k in config.ks:
                for pattern, size in size_specs:
                    for q in config.qs:
                        cell = SimCell(delta, tau2, k, pattern, size, q,
                                       config.reps, config.chunks, config.seed)
                        validate_cell(cell, allow_custom)
                        cells.append(cell)
    return cells


# ---------------------------------------------------------------------------
# the estimator battery (shared verbatim by the analyze command)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReplicateEstimates:
    """Every estimator's output for one meta-analysis input."""

    tau2_points: dict[str, t2.Tau2Result]
    tau2_intervals: dict[str, t2.Tau2Interval]
    delta_points: dict[str, eff.EffectResult]
    delta_intervals: dict[str, eff.EffectInterval]
    failures: tuple[tuple[str, str], ...]


def estimate_all(data: MetaInput, level: float = 0.95) -> ReplicateEstimates:
    """Run the full battery; non-convergent estimators are recorded in
    ``failures`` (never silently dropped) and omitted from the dicts."""
    failures: list[tuple[str, str]] = []

    def attempt(name, fn, into):
        try:
            into[name] = fn()
        except NonConvergenceError as exc:
            failures.append((name, str(exc)))

    tau2_points: dict[str, t2.Tau2Result] = {}
    attempt("DL", lambda: t2.tau2_dl(data), tau2_points)
    attempt("MP", lambda: t2.tau2_mp(data), tau2_points)
    attempt("REML", lambda: t2.tau2_reml(data), tau2_points)
    attempt("J", lambda: t2.tau2_jackson(data), tau2_points)

    try:
        expected_q = t2.corrected_expected_q(data)
    except NonConvergenceError as exc:
        expected_q = None
        failures.append(("KDB", str(exc)))
    if expected_q is not None:
        attempt("KDB", lambda: t2.tau2_kdb(data, expected_q), tau2_points)

    tau2_intervals: dict[str, t2.Tau2Interval] = {}
    attempt("QP", lambda: t2.ci_qp(data, level), tau2_intervals)
    attempt("BJ", lambda: t2.ci_bj(data, level), tau2_intervals)
    attempt("J", lambda: t2.ci_jackson(data, level), tau2_intervals)
    if "REML" in tau2_points:
        attempt("PL", lambda: t2.ci_pl(data, level, tau2_points["REML"]),
                tau2_intervals)
    else:
        failures.append(("PL", "REML prerequisite failed"))
    if expected_q is not None:
        attempt("KDB", lambda: t2.ci_kdb(data, level, expected_q),
                tau2_intervals)
    else:
        failures.append(("KDB-interval", "corrected E[Q] failed"))

    delta_points: dict[str, eff.EffectResult] = {}
    for name in TAU2_POINT:
        if name in tau2_points:
            attempt(f"IV-{name}",
                    lambda name=name: eff.effect_iv(data, tau2_points[name]),
                    delta_points)
        else:
            failures.append((f"IV-{name}", "tau^2 prerequisite failed"))
    if "KDB" in tau2_points:
        kdb_value = tau2_points["KDB"].value
        attempt("SSW", lambda: eff.effect_ssw(data, kdb_value), delta_points)
    else:
        kdb_value = None
        failures.append(("SSW", "KDB prerequisite failed"))

    delta_intervals: dict[str, eff.EffectInterval] = {}
    for name in TAU2_POINT:
        if name in tau2_points:
            attempt(f"Z-{name}",
                    lambda name=name: eff.ci_z(data, tau2_points[name], level),
                    delta_intervals)
        else:
            failures.append((f"Z-{name}", "tau^2 prerequisite failed"))
    if "DL" in tau2_points:
        attempt("HKSJ", lambda: eff.ci_hksj(data, tau2_points["DL"], level),
                delta_intervals)
    if "KDB" in tau2_points:
        attempt("HKSJ-KDB",
                lambda: eff.ci_hksj(data, tau2_points["KDB"], level),
                delta_intervals)
        attempt("SSW-KDB",
                lambda: eff.ci_ssw_kdb(data, level, kdb_value),
                delta_intervals)
    else:
        failures.append(("HKSJ-KDB", "KDB prerequisite failed"))
        failures.append(("SSW-KDB", "KDB prerequisite failed"))

    return ReplicateEstimates(tau2_points, tau2_intervals, delta_points,
                              delta_intervals, tuple(failures))


# ---------------------------------------------------------------------------
# replication
# ---------------------------------------------------------------------------

@dataclass
class RawCellResult:
    """Per-replicate estimator outputs for one cell, in global replicate
    order; NaN marks a non-convergent replicate for that estimator."""

    cell: SimCell
    tau2_est: dict[str, np.ndarray]
    tau2_trunc: dict[str, np.ndarray]
    tau2_cover: dict[str, np.ndarray]
    delta_est: dict[str, np.ndarray]
    delta_cover: dict[str, np.ndarray]
    n_failed: dict[str, int]


def simulate_meta_input(cell: SimCell, replicate: int) -> MetaInput:
    """Generate one meta-analysis sample: true effects delta_i ~ N(delta,
    tau2), then each g_i exactly from its scaled noncentral t model."""
    sizes = study_sizes(cell)
    sid = derive_stream_id("cell", *cell.coord_parts(), replicate)
    gen = RandomStream(cell.seed, sid).generator()
    deltas = cell.delta + math.sqrt(cell.tau2) * gen.standard_normal(cell.k)
    studies = tuple(sample_g(gen, n_t, n_c, deltas[i])
                    for i, (n_t, n_c) in enumerate(sizes))
    return MetaInput(studies)


def _run_chunk(cell: SimCell, rep_lo: int, rep_hi: int, level: float):
    n = rep_hi - rep_lo
    tau2_est = {m: np.full(n, np.nan) for m in TAU2_POINT}
    tau2_trunc = {m: np.full(n, np.nan) for m in TAU2_POINT}
    tau2_cover = {m: np.full(n, np.nan) for m in TAU2_CI}
    delta_est = {m: np.full(n, np.nan) for m in DELTA_POINT}
    delta_cover = {m: np.full(n, np.nan) for m in DELTA_CI}
    n_failed: dict[str, int] = {}
    for idx in range(n):
        data = simulate_meta_input(cell, rep_lo + idx)
        est = estimate_all(data, level)
        for name, res in est.tau2_points.items():
            tau2_est[name][idx] = res.value
            tau2_trunc[name][idx] = 1.0 if res.status == "truncated_at_zero" else 0.0
        for name, ci in est.tau2_intervals.items():
            tau2_cover[name][idx] = 1.0 if ci.contains(cell.tau2) else 0.0
        for name, res in est.delta_points.items():
            delta_est[name][idx] = res.value
        for name, ci in est.delta_intervals.items():
            delta_cover[name][idx] = 1.0 if ci.contains(cell.delta) else 0.0
        for name, _msg in est.failures:
            n_failed[name] = n_failed.get(name, 0) + 1
    return tau2_est, tau2_trunc, tau2_cover, delta_est, delta_cover, n_failed


def _chunk_task(args):
    return _run_chunk(*args)


def run_cell_raw(cell: SimCell, level: float = 0.95,
                 threads: int = 1) -> RawCellResult:
    """All replicates of one cell; chunked for scheduling only.

    The concatenation happens in chunk order, and each replicate's stream
    depends only on (seed, cell, replicate), so the result is identical
    for any chunk count and any worker count.
    """
    per = cell.reps // cell.chunks
    ranges = [(i * per, (i + 1) * per) for i in range(cell.chunks)]
    if threads > 1 and cell.chunks > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(_chunk_task,
                                  [(cell, lo, hi, level) for lo, hi in ranges]))
    else:
        parts = [_run_chunk(cell, lo, hi, level) for lo, hi in ranges]

    def cat(which: int, names) -> dict[str, np.ndarray]:
        return {m: np.concatenate([p[which][m] for p in parts]) for m in names}

    n_failed: dict[str, int] = {}
    for p in parts:
        for name, cnt in p[5].items():
            n_failed[name] = n_failed.get(name, 0) + cnt
    return RawCellResult(
        cell=cell,
        tau2_est=cat(0, TAU2_POINT),
        tau2_trunc=cat(1, TAU2_POINT),
        tau2_cover=cat(2, TAU2_CI),
        delta_est=cat(3, DELTA_POINT),
        delta_cover=cat(4, DELTA_CI),
        n_failed=n_failed,
    )


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricRow:
    estimator: str
    metric: str
    value: float
    mc_se: float


@dataclass(frozen=True)
class CellReport:
    cell: SimCell
    rows: tuple[MetricRow, ...]

    def value(self, estimator: str, metric: str) -> float:
        for row in self.rows:
            if row.estimator == estimator and row.metric == metric:
                return row.value
        raise KeyError((estimator, metric))

    def se(self, estimator: str, metric: str) -> float:
        for row in self.rows:
            if row.estimator == estimator and row.metric == metric:
                return row.mc_se
        raise KeyError((estimator, metric))


def _mean_se(x: np.ndarray) -> tuple[float, float, int]:
    ok = x[~np.isnan(x)]
    n = ok.size
    if n == 0:
        return math.nan, math.nan, 0
    mean = float(ok.mean())
    se = float(ok.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan
    return mean, se, n


def _prop_se(x: np.ndarray) -> tuple[float, float]:
    ok = x[~np.isnan(x)]
    if ok.size == 0:
        return math.nan, math.nan
    p = float(ok.mean())
    return p, math.sqrt(p * (1.0 - p) / ok.size)


def metrics(raw: RawCellResult) -> CellReport:
    """Aggregate per-replicate outputs into bias / coverage / MSE rows with
    Monte-Carlo standard errors (coverage SE is sqrt(p(1-p)/R))."""
    cell = raw.cell
    rows: list[MetricRow] = []
    for name in TAU2_POINT:
        mean, se, _ = _mean_se(raw.tau2_est[name])
        rows.append(MetricRow(name, "tau2_bias", mean - cell.tau2, se))
    for name in TAU2_POINT:
        p, se = _prop_se(raw.tau2_trunc[name])
        rows.append(MetricRow(name, "tau2_trunc_rate", p, se))
    for name in TAU2_CI:
        p, se = _prop_se(raw.tau2_cover[name])
        rows.append(MetricRow(name, "tau2_coverage", p, se))
    for name in DELTA_POINT:
        mean, se, _ = _mean_se(raw.delta_est[name])
        rows.append(MetricRow(name, "delta_bias", mean - cell.delta, se))
    sq_err = {name: (raw.delta_est[name] - cell.delta) ** 2
              for name in MSE_ESTIMATORS}
    for name in MSE_ESTIMATORS:
        mean, se, _ = _mean_se(sq_err[name])
        rows.append(MetricRow(name, "delta_mse", mean, se))
    for label, num_name, den_name in MSE_RATIOS:
        a, b = sq_err[num_name], sq_err[den_name]
        both = ~np.isnan(a) & ~np.isnan(b)
        if both.sum() > 1 and float(b[both].mean()) > 0.0:
            a, b = a[both], b[both]
            ratio = float(a.mean() / b.mean())
            resid = a - ratio * b
            se = float(resid.std(ddof=1) / math.sqrt(both.sum()) / b.mean())
            rows.append(MetricRow(label, "delta_mse_ratio", ratio, se))
        else:
            rows.append(MetricRow(label, "delta_mse_ratio", math.nan, math.nan))
    for name in DELTA_CI:
        p, se = _prop_se(raw.delta_cover[name])
        rows.append(MetricRow(name, "delta_coverage", p, se))
    for name in sorted(raw.n_failed):
        rows.append(MetricRow(name, "n_failed", float(raw.n_failed[name]), 0.0))
    return CellReport(cell, tuple(rows))


def run_cell(cell: SimCell, level: float = 0.95, threads: int = 1) -> CellReport:
    """Simulate one cell and aggregate it into a CellReport."""
    return metrics(run_cell_raw(cell, level, threads))


def run_grid(cells: list[SimCell], level: float = 0.95,
             threads: int = 1) -> list[CellReport]:
    """Run many cells; chunks within each cell execute in parallel."""
    return [run_cell(cell, level, threads) for cell in cells]
