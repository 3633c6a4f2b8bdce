"""Parameter sweeps over a base scenario, written as CSV."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

from .scenario import Scenario, SweepSpec, apply_axis
from .simnet.runner import run_scenario

COLUMNS = ("axis_value", "seed", "init_delay_s", "mean_config_latency_s", "control_msg_count", "retry_count", "error")


@dataclass(frozen=True)
class RunRow:
    axis_value: float
    seed: int
    init_delay: float | None
    latency: float | None
    control: int | None
    retries: int | None
    overhead: float | None = None
    error: str = ""


def _clean(x):
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return None
    return x


def run_point(scenario: Scenario, axis_value, seed: int) -> RunRow:
    """One (scenario, seed) run; failures come back as a row, not an exception."""
    try:
        m, _ = run_scenario(scenario, seed, keep_trace=False)
    except Exception as exc:  # reported per point, the sweep carries on
        return RunRow(axis_value, seed, None, None, None, None, None, f"{type(exc).__name__}: {exc}")
    return RunRow(axis_value, seed, _clean(m.init_delay), _clean(m.mean_config_latency), m.control_msg_count,
                  m.retry_count, _clean(m.mean_join_overhead))


def _call(args):
    return run_point(*args)


def sweep_jobs(sweep: SweepSpec, seed_base: int):
    for value in sweep.values:
        sc = apply_axis(sweep.base, sweep.axis, value)
        for i in range(sweep.runs):
            yield sc, value, seed_base + i


def run_sweep_rows(sweep: SweepSpec, seed_base: int = 0, jobs: int = 1) -> list[RunRow]:
    tasks = list(sweep_jobs(sweep, seed_base))
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            # map keeps submission order, so rows stay axis-then-seed
            return list(pool.map(_call, tasks))
    return [run_point(*t) for t in tasks]


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return sum(xs) / len(xs) if xs else None


def mean_rows(rows: list[RunRow]) -> dict:
    """Axis value -> averaged RunRow over the runs that produced a value."""
    out = {}
    for value in dict.fromkeys(r.axis_value for r in rows):
        pts = [r for r in rows if r.axis_value == value]
        errs = sum(1 for r in pts if r.error)
        out[value] = RunRow(
            value, -1,
            _mean([r.init_delay for r in pts]),
            _mean([r.latency for r in pts]),
            _mean([r.control for r in pts]),
            _mean([r.retries for r in pts]),
            _mean([r.overhead for r in pts]),
            f"{errs} of {len(pts)} runs failed" if errs else "",
        )
    return out


def _num(x) -> str:
    if x is None:
        return ""
    if isinstance(x, int):
        return str(x)
    return f"{x:.6f}"


def _axis(v) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def format_csv(rows: list[RunRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    means = mean_rows(rows)
    for value, mean in means.items():
        for r in (r for r in rows if r.axis_value == value):
            w.writerow([_axis(value), r.seed, _num(r.init_delay), _num(r.latency), _num(r.control), _num(r.retries), r.error])
        w.writerow([_axis(value), "mean", _num(mean.init_delay), _num(mean.latency), _num(mean.control),
                    _num(mean.retries), mean.error])
    return buf.getvalue()


def run_sweep(sweep: SweepSpec, seed_base: int = 0, jobs: int = 1) -> str:
    """Per-run rows followed by a mean row for each axis value."""
    return format_csv(run_sweep_rows(sweep, seed_base, jobs))


def format_run_csv(metrics, seed: int) -> str:
    """One row per measured join, then a ``run`` row with the aggregates."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("row", "seed", "node", "first_discovery_s", "config_latency_s", "join_overhead",
                "init_delay_s", "mean_config_latency_s", "control_msg_count", "retry_count", "failed_joins"))
    for j in metrics.joins:
        w.writerow(["join", seed, j.node, _num(j.first_discovery), _num(j.latency), j.overhead, "", "", "", "", ""])
    w.writerow(["run", seed, "", "", "", _num(_clean(metrics.mean_join_overhead)), _num(_clean(metrics.init_delay)),
                _num(_clean(metrics.mean_config_latency)), metrics.control_msg_count, metrics.retry_count,
                len(metrics.failed_joins)])
    return buf.getvalue()
