"""Experiment orchestration: spec files, estimation, sweeps and export.

An experiment is described by a single JSON document (schema documented in
the README): the base system minus its scale, a list of scales ``n_list``,
policies, horizon/warmup, replication count and a master seed.  Each grid
cell runs one simulation, estimates steady-state quantities by batch means
over the post-warmup window, and contributes one row to the result table.
Tables export to CSV (floats printed with 12 significant digits) or JSON
(exact values); identical spec and seed reproduce the bytes.
"""

from __future__ import annotations

import csv
import io
import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .equilibrium import EquilibriumPoint, solve_equilibrium
from .fluid import FluidTrajectory
from .model import MeanFieldState, SystemConfig, state_distance, validate_config
from .simulator import Policy, SimMetrics, TraceSample, simulate
from .streams import EventStream


class SpecParseError(ValueError):
    """The experiment file does not match the documented schema."""


class InsufficientDataError(ValueError):
    """Not enough post-warmup observations for batch-means estimation."""


MIN_BATCHES = 10
DEFAULT_BATCHES = 20
#: Fraction of the horizon discarded as warm-up when the spec omits it.
DEFAULT_WARMUP_FRACTION = 0.2

_SPEC_KEYS = {
    "pool_fractions", "service_rates", "buffer_sizes", "arrival_rate",
    "num_routers", "n_list", "policies", "horizon", "warmup",
    "replications", "seed", "batches", "output",
}


@dataclass(frozen=True)
class ExperimentSpec:
    """A validated sweep description."""

    pool_fractions: tuple[float, ...]
    service_rates: tuple[float, ...]
    buffer_sizes: tuple[int | None, ...]
    arrival_rate: float
    num_routers: int
    n_list: tuple[int, ...]
    policies: tuple[Policy, ...]
    horizon: float
    warmup: float
    replications: int
    seed: int
    batches: int = DEFAULT_BATCHES
    output_path: str | None = None
    output_format: str = "csv"

    def config_for(self, n: int) -> SystemConfig:
        return validate_config(
            pool_fractions=self.pool_fractions,
            service_rates=self.service_rates,
            buffer_sizes=self.buffer_sizes,
            arrival_rate=self.arrival_rate,
            num_servers=n,
            num_routers=self.num_routers,
        )


def load_spec(path: str | Path) -> ExperimentSpec:
    """Parse and validate an experiment file.

    Raises :class:`SpecParseError` on malformed JSON (with the line) or on
    missing/unknown/ill-typed fields, and the configuration errors of
    :func:`pullsim.model.validate_config` for every scale in ``n_list``.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SpecParseError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise SpecParseError(f"{path}: top level must be an object")
    unknown = set(raw) - _SPEC_KEYS
    if unknown:
        raise SpecParseError(f"{path}: unknown fields {sorted(unknown)}")
    missing = {"pool_fractions", "service_rates", "arrival_rate", "n_list", "policies", "horizon"} - set(raw)
    if missing:
        raise SpecParseError(f"{path}: missing required fields {sorted(missing)}")

    def bad(fieldname: str, why: str) -> SpecParseError:
        return SpecParseError(f"{path}: field {fieldname!r}: {why}")

    horizon = float(raw["horizon"])
    warmup = float(raw.get("warmup", DEFAULT_WARMUP_FRACTION * horizon))
    if not 0.0 <= warmup < horizon:
        raise bad("warmup", f"must satisfy 0 <= warmup < horizon, got {warmup} vs {horizon}")
    replications = int(raw.get("replications", 1))
    if replications < 1:
        raise bad("replications", "must be at least 1")
    batches = int(raw.get("batches", DEFAULT_BATCHES))
    if batches < MIN_BATCHES:
        raise bad("batches", f"must be at least {MIN_BATCHES}")
    try:
        policies = tuple(Policy.parse(p) for p in raw["policies"])
    except (TypeError, ValueError) as exc:
        raise bad("policies", str(exc)) from exc
    n_list = tuple(int(n) for n in raw["n_list"])

    output = raw.get("output", {})
    if output and not isinstance(output, dict):
        raise bad("output", "must be an object with 'path' and 'format'")
    output_format = output.get("format", "csv")
    if output_format not in ("csv", "json"):
        raise bad("output.format", f"must be 'csv' or 'json', got {output_format!r}")

    spec = ExperimentSpec(
        pool_fractions=tuple(float(b) for b in raw["pool_fractions"]),
        service_rates=tuple(float(m) for m in raw["service_rates"]),
        buffer_sizes=tuple(
            None if b is None else int(b)
            for b in raw.get("buffer_sizes", [None] * len(raw["pool_fractions"]))
        ),
        arrival_rate=float(raw["arrival_rate"]),
        num_routers=int(raw.get("num_routers", 1)),
        n_list=n_list,
        policies=policies,
        horizon=horizon,
        warmup=warmup,
        replications=replications,
        seed=int(raw.get("seed", 0)),
        batches=batches,
        output_path=output.get("path"),
        output_format=output_format,
    )
    for n in spec.n_list:
        spec.config_for(n)  # delegate scale validation; raises ConfigError
    for policy in spec.policies:
        if policy.kind == "pull1" and any(b != 1 for b in spec.buffer_sizes):
            raise bad("policies", "pull1 requires unit buffer_sizes")
    return spec


@dataclass
class SteadyStateEstimate:
    """Batch-means estimates of long-run quantities.

    Ratio metrics with an empty denominator (for example blocking with no
    arrivals) are ``None``; standard errors are over batch means.
    """

    batch_count: int
    duration: float
    blocking_prob: float | None
    blocking_prob_se: float | None
    waiting_prob: float | None
    waiting_prob_se: float | None
    msgs_per_customer: float | None
    msgs_per_customer_se: float | None
    no_message_fraction: float | None
    no_message_fraction_se: float | None
    rho_to_star: float
    rho_to_star_se: float
    x1_bar: np.ndarray
    x1_bar_se: np.ndarray
    xi_bar: np.ndarray
    xi_bar_se: np.ndarray
    mean_state: MeanFieldState


def _ratio(num: int, den: int) -> float | None:
    return None if den == 0 else num / den


def _scalar_stats(values: list[float | None]) -> tuple[float | None, float | None]:
    present = [v for v in values if v is not None]
    if not present:
        return None, None
    arr = np.asarray(present)
    se = float(arr.std(ddof=1) / math.sqrt(len(arr))) if len(arr) > 1 else 0.0
    return float(arr.mean()), se


def estimate_steady_state(
    samples: Sequence[TraceSample],
    metrics: SimMetrics,
    warmup: float,
    cfg: SystemConfig,
    equilibrium: EquilibriumPoint | None = None,
) -> SteadyStateEstimate:
    """Batch-means estimation over the post-warmup observation window.

    Consecutive post-warmup samples delimit the batches (at least
    :data:`MIN_BATCHES` of them).  Point estimates of the ratio metrics use
    the whole post-warmup window; standard errors come from the batch
    spread.  ``metrics`` is the cumulative end-of-run record and is used
    only for sanity (the window totals are taken from the samples).
    """
    eps = 1e-9 * max(1.0, warmup)
    post = [s for s in samples if s.time >= warmup - eps]
    if len(post) < MIN_BATCHES + 1:
        raise InsufficientDataError(
            f"{len(post)} post-warmup samples give {max(len(post) - 1, 0)} batches,"
            f" need at least {MIN_BATCHES}"
        )
    if post[-1].time > metrics.sim_time + eps:
        raise ValueError("samples extend past the recorded run horizon")

    star = (equilibrium or solve_equilibrium(cfg)).state
    deltas = [b.metrics.delta(a.metrics) for a, b in zip(post, post[1:])]
    window = post[-1].metrics.delta(post[0].metrics)

    def occupancy(d: SimMetrics) -> tuple[np.ndarray, np.ndarray, float]:
        state = d.mean_state(cfg)
        return state.tail[1].copy(), state.idle.copy(), state_distance(state, star)

    blocking = [_ratio(d.blocked_total, d.arrivals_total) for d in deltas]
    waiting = [_ratio(d.waited, d.admitted) for d in deltas]
    msgs = [_ratio(d.pull_messages + d.pull_remove_messages, d.admitted) for d in deltas]
    fallback = [_ratio(d.fallback_routings, d.arrivals_total) for d in deltas]
    x1_list, xi_list, rho_list = zip(*(occupancy(d) for d in deltas))

    _, blocking_se = _scalar_stats(blocking)
    _, waiting_se = _scalar_stats(waiting)
    _, msgs_se = _scalar_stats(msgs)
    _, fallback_se = _scalar_stats(fallback)
    _, rho_se = _scalar_stats(list(rho_list))

    window_state = window.mean_state(cfg)
    b = len(deltas)
    x1_arr = np.stack(x1_list)
    xi_arr = np.stack(xi_list)

    return SteadyStateEstimate(
        batch_count=b,
        duration=window.integrated_to,
        blocking_prob=_ratio(window.blocked_total, window.arrivals_total),
        blocking_prob_se=blocking_se,
        waiting_prob=_ratio(window.waited, window.admitted),
        waiting_prob_se=waiting_se,
        msgs_per_customer=_ratio(window.pull_messages + window.pull_remove_messages, window.admitted),
        msgs_per_customer_se=msgs_se,
        no_message_fraction=_ratio(window.fallback_routings, window.arrivals_total),
        no_message_fraction_se=fallback_se,
        rho_to_star=state_distance(window_state, star),
        rho_to_star_se=rho_se if rho_se is not None else 0.0,
        x1_bar=window_state.tail[1].copy(),
        x1_bar_se=x1_arr.std(axis=0, ddof=1) / math.sqrt(b),
        xi_bar=window_state.idle.copy(),
        xi_bar_se=xi_arr.std(axis=0, ddof=1) / math.sqrt(b),
        mean_state=window_state,
    )


@dataclass
class SweepTable:
    """Result table with a fixed, documented column order."""

    columns: list[str]
    rows: list[dict[str, Any]] = field(default_factory=list)


def table_columns(num_routers: int, num_pools: int) -> list[str]:
    """Column order of sweep tables (1-based router/pool labels)."""
    cols = [
        "policy", "n", "replication",
        "blocking_prob", "waiting_prob", "msgs_per_customer", "rho_to_star",
    ]
    cols += [
        f"xi_bar_r{r}_j{j}"
        for r in range(1, num_routers + 1)
        for j in range(1, num_pools + 1)
    ]
    cols += [f"x1_bar_j{j}" for j in range(1, num_pools + 1)]
    cols += [f"nu_j{j}" for j in range(1, num_pools + 1)]
    cols += [
        f"xi_star_r{r}_j{j}"
        for r in range(1, num_routers + 1)
        for j in range(1, num_pools + 1)
    ]
    cols += [
        "no_message_fraction",
        "se_blocking_prob", "se_waiting_prob", "se_msgs_per_customer",
        "se_rho_to_star", "se_no_message_fraction",
        "batch_count", "error",
    ]
    return cols


def cell_seed(master_seed: int, n: int, policy: Policy, replication: int) -> np.random.SeedSequence:
    """Deterministic per-cell seed, stable under reordering of the grid."""
    return np.random.SeedSequence(
        [master_seed, n, zlib.crc32(policy.name.encode()), replication]
    )


def run_cell(
    spec: ExperimentSpec,
    n: int,
    policy: Policy,
    replication: int,
    equilibrium: EquilibriumPoint | None = None,
) -> dict[str, Any]:
    """Run one grid cell and return its result row."""
    cfg = spec.config_for(n)
    eq = equilibrium or solve_equilibrium(cfg)
    observe = [
        spec.warmup + i * (spec.horizon - spec.warmup) / spec.batches
        for i in range(spec.batches + 1)
    ]
    streams = EventStream(cell_seed(spec.seed, n, policy, replication), cfg.num_routers)
    result = simulate(cfg, policy, spec.horizon, streams, init="empty", observe_at=observe)
    est = estimate_steady_state(result.samples, result.metrics, spec.warmup, cfg, eq)

    row: dict[str, Any] = {
        "policy": policy.name,
        "n": n,
        "replication": replication,
        "blocking_prob": est.blocking_prob,
        "waiting_prob": est.waiting_prob,
        "msgs_per_customer": est.msgs_per_customer,
        "rho_to_star": est.rho_to_star,
    }
    num_routers, num_pools = cfg.num_routers, cfg.num_pools
    for r in range(num_routers):
        for j in range(num_pools):
            row[f"xi_bar_r{r + 1}_j{j + 1}"] = float(est.xi_bar[r, j])
    for j in range(num_pools):
        row[f"x1_bar_j{j + 1}"] = float(est.x1_bar[j])
    for j in range(num_pools):
        row[f"nu_j{j + 1}"] = float(eq.busy_fractions[j])
    for r in range(num_routers):
        for j in range(num_pools):
            row[f"xi_star_r{r + 1}_j{j + 1}"] = float(eq.state.idle[r, j])
    row.update(
        no_message_fraction=est.no_message_fraction,
        se_blocking_prob=est.blocking_prob_se,
        se_waiting_prob=est.waiting_prob_se,
        se_msgs_per_customer=est.msgs_per_customer_se,
        se_rho_to_star=est.rho_to_star_se,
        se_no_message_fraction=est.no_message_fraction_se,
        batch_count=est.batch_count,
        error=None,
    )
    return row


def run_sweep(spec: ExperimentSpec) -> SweepTable:
    """Run the full (n, policy, replication) grid.

    A failing cell is recorded in its row's ``error`` column instead of
    aborting the sweep.  Rows appear in grid order, so the output is
    deterministic for a fixed spec and seed.
    """
    columns = table_columns(spec.num_routers, len(spec.pool_fractions))
    table = SweepTable(columns=columns)
    equilibria: dict[int, EquilibriumPoint] = {}
    for n in spec.n_list:
        for policy in spec.policies:
            for rep in range(spec.replications):
                try:
                    if n not in equilibria:
                        equilibria[n] = solve_equilibrium(spec.config_for(n))
                    row = run_cell(spec, n, policy, rep, equilibria[n])
                except Exception as exc:  # record, keep sweeping
                    row = {c: None for c in columns}
                    row.update(policy=policy.name, n=n, replication=rep, error=f"{type(exc).__name__}: {exc}")
                table.rows.append(row)
    return table


def _format_cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".12g")
    return str(value)


def render_table(table: SweepTable, fmt: str) -> str:
    """Render a result table as CSV or JSON text.

    CSV prints floats with 12 significant digits (re-exporting a re-parsed
    CSV reproduces it byte for byte); JSON keeps exact values and
    round-trips losslessly.
    """
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(table.columns)
        for row in table.rows:
            writer.writerow([_format_cell(row.get(c)) for c in table.columns])
        return buf.getvalue()
    if fmt == "json":
        records = [{c: row.get(c) for c in table.columns} for row in table.rows]
        return json.dumps(records, indent=2) + "\n"
    raise ValueError(f"unknown export format {fmt!r}")


def export(table: SweepTable, fmt: str, path: str | Path) -> None:
    """Write a result table as CSV or JSON (see :func:`render_table`)."""
    Path(path).write_text(render_table(table, fmt))


_INT_COLUMNS = {"n", "replication", "batch_count"}
_STR_COLUMNS = {"policy", "error"}


def read_table(path: str | Path, fmt: str) -> SweepTable:
    """Read back an exported table, restoring numeric types."""
    path = Path(path)
    if fmt == "json":
        records = json.loads(path.read_text())
        columns = list(records[0].keys()) if records else []
        return SweepTable(columns=columns, rows=records)
    if fmt != "csv":
        raise ValueError(f"unknown export format {fmt!r}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            columns = next(reader)
        except StopIteration:
            return SweepTable(columns=[], rows=[])
        rows = []
        for record in reader:
            row: dict[str, Any] = {}
            for c, cell in zip(columns, record):
                if cell == "":
                    row[c] = None
                elif c in _STR_COLUMNS:
                    row[c] = cell
                elif c in _INT_COLUMNS:
                    row[c] = int(cell)
                else:
                    row[c] = float(cell)
            rows.append(row)
    return SweepTable(columns=columns, rows=rows)


def export_trajectory(trajectory: FluidTrajectory, path: str | Path) -> None:
    """Write a fluid trajectory as CSV: time, tail levels, idle split."""
    path = Path(path)
    k_hi = max(s.k_max for s in trajectory.states)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        first = trajectory.states[0]
        header = ["t"]
        header += [f"tail_k{k}_j{j}" for k in range(k_hi + 1) for j in range(1, first.num_pools + 1)]
        header += [f"idle_r{r}_j{j}" for r in range(1, first.num_routers + 1) for j in range(1, first.num_pools + 1)]
        writer.writerow(header)
        for t, s in zip(trajectory.times, trajectory.states):
            tail = np.zeros((k_hi + 1, s.num_pools))
            tail[: s.k_max + 1] = s.tail
            cells = [t, *tail.ravel(), *s.idle.ravel()]
            writer.writerow([_format_cell(float(v)) for v in cells])
