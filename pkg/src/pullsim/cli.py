"""Command-line front end.

Subcommands::

    pullsim sweep EXPERIMENT.json        run a sweep, write the result table
    pullsim fluid CONFIG.json            integrate the fluid ODE
    pullsim equilibrium CONFIG.json      print the equilibrium point
    pullsim couple CONFIG.json           coupled ordered-pair dominance check

``CONFIG.json`` holds one system (the fields of ``SystemConfig``);
``EXPERIMENT.json`` holds the sweep schema documented in the README.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
from pathlib import Path

import numpy as np

from .coupling import coupled_simulate
from .equilibrium import solve_equilibrium
from .fluid import integrate_fluid, max_unit_buffer_state
from .harness import SweepTable, export, export_trajectory, load_spec, render_table, run_sweep
from .model import FullState, MeanFieldState, SystemConfig, state_distance, validate_config
from .simulator import Policy, init_state
from .streams import EventStream


def _load_config(path: str) -> SystemConfig:
    raw = json.loads(Path(path).read_text())
    return validate_config(raw)


def _cmd_sweep(args: argparse.Namespace) -> int:
    spec = load_spec(args.spec)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    table = run_sweep(spec)
    fmt = args.format or spec.output_format
    out = args.out or spec.output_path
    if out:
        export(table, fmt, out)
        print(f"wrote {len(table.rows)} rows to {out}")
    else:
        sys.stdout.write(render_table(table, fmt))
    failed = [r for r in table.rows if r.get("error")]
    for r in failed:
        print(f"cell (n={r['n']}, {r['policy']}, rep {r['replication']}) failed: {r['error']}", file=sys.stderr)
    return 1 if failed else 0


def _initial_fluid_state(name: str, cfg: SystemConfig) -> MeanFieldState:
    if name == "star":
        return solve_equilibrium(cfg).state
    if name == "max":
        if any(b != 1 for b in cfg.buffer_sizes):
            raise SystemExit("init 'max' is the unit-buffer fullest state; set all buffer_sizes to 1")
        return max_unit_buffer_state(cfg)
    raw = json.loads(Path(name).read_text())
    return MeanFieldState(np.asarray(raw["tail"], dtype=float), np.asarray(raw["idle"], dtype=float))


def _cmd_fluid(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    start = _initial_fluid_state(args.init, cfg)
    trajectory = integrate_fluid(start, args.horizon, args.step, cfg)
    star = solve_equilibrium(cfg).state
    final = trajectory.final
    print(f"integrated {len(trajectory.states) - 1} steps of {trajectory.step} to t={trajectory.times[-1]:g}")
    print(f"distance to the equilibrium point at the end: {state_distance(final, star):.6g}")
    if args.out:
        export_trajectory(trajectory, args.out)
        print(f"wrote trajectory to {args.out}")
    return 0


def _cmd_equilibrium(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    eq = solve_equilibrium(cfg)
    print(f"common ratio: {eq.common_ratio!r}")
    for j in range(cfg.num_pools):
        print(
            f"pool {j + 1}: busy fraction {float(eq.busy_fractions[j])!r}"
            f" of pool mass {cfg.pool_fractions[j]!r},"
            f" idle-per-router {float(eq.state.idle[0, j])!r}"
        )
    if args.out:
        if (args.format or "json") == "json":
            payload = {
                "common_ratio": eq.common_ratio,
                "busy_fractions": list(map(float, eq.busy_fractions)),
                "idle_split": [[float(v) for v in row] for row in eq.state.idle],
            }
            Path(args.out).write_text(json.dumps(payload, indent=2) + "\n")
        else:
            table = SweepTable(
                columns=["pool", "pool_fraction", "service_rate", "nu", "common_ratio"]
                + [f"xi_star_r{r + 1}" for r in range(cfg.num_routers)],
            )
            for j in range(cfg.num_pools):
                row = {
                    "pool": j + 1,
                    "pool_fraction": cfg.pool_fractions[j],
                    "service_rate": cfg.service_rates[j],
                    "nu": float(eq.busy_fractions[j]),
                    "common_ratio": eq.common_ratio,
                }
                for r in range(cfg.num_routers):
                    row[f"xi_star_r{r + 1}"] = float(eq.state.idle[r, j])
                table.rows.append(row)
            export(table, "csv", args.out)
        print(f"wrote equilibrium to {args.out}")
    return 0


def _parse_buffers(text: str, num_pools: int) -> tuple[int | None, ...]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != num_pools:
        raise SystemExit(f"--high-buffers needs {num_pools} comma-separated entries")
    return tuple(None if p in ("inf", "unbounded", "none") else int(p) for p in parts)


def _cmd_couple(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    if any(b is None for b in cfg.buffer_sizes):
        raise SystemExit("couple starts the higher system full; buffers must be finite")
    policy = Policy.parse(args.policy)
    cfg_high = cfg
    if args.high_buffers:
        cfg_high = validate_config(
            pool_fractions=cfg.pool_fractions,
            service_rates=cfg.service_rates,
            buffer_sizes=_parse_buffers(args.high_buffers, cfg.num_pools),
            arrival_rate=cfg.arrival_rate,
            num_servers=cfg.num_servers,
            num_routers=cfg.num_routers,
        )
    seed = args.seed if args.seed is not None else 0
    streams = EventStream(seed, cfg.num_routers)
    high = init_state(cfg_high, "full", streams)
    low_messages = [
        d if d else 1 + streams.init_messages.randint(cfg.num_routers)
        for d in high.messages
    ]
    low = FullState([0] * cfg.num_servers, low_messages)
    report = coupled_simulate(
        cfg, policy, low, high, args.horizon, streams,
        cfg_high=cfg_high, max_events=args.events,
    )
    print(f"processed {report.events} events to t={report.sim_time:g}")
    if report.ordered_throughout:
        print("order low <= high held after every event")
        return 0
    print(
        f"order violated after {report.violation_events} events,"
        f" first at event {report.first_violation_event}"
    )
    return 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the master seed")
    common.add_argument("--out", type=str, default=None, help="output file path")
    common.add_argument("--format", choices=("csv", "json"), default=None, help="output format")

    parser = argparse.ArgumentParser(prog="pullsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sweep", parents=[common], help="run an experiment sweep")
    p.add_argument("spec", help="experiment JSON file")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("fluid", parents=[common], help="integrate the fluid ODE")
    p.add_argument("config", help="system config JSON file")
    p.add_argument("--init", default="star", help="star | max | path to a state JSON")
    p.add_argument("--horizon", type=float, default=50.0)
    p.add_argument("--step", type=float, default=1e-3)
    p.set_defaults(func=_cmd_fluid)

    p = sub.add_parser("equilibrium", parents=[common], help="print the equilibrium point")
    p.add_argument("config", help="system config JSON file")
    p.set_defaults(func=_cmd_equilibrium)

    p = sub.add_parser("couple", parents=[common], help="coupled dominance check (empty vs full)")
    p.add_argument("config", help="system config JSON file")
    p.add_argument("--policy", default="pull2", help="pull1 or pull2")
    p.add_argument("--events", type=int, default=100_000, help="stop after this many events")
    p.add_argument("--horizon", type=float, default=math.inf)
    p.add_argument("--high-buffers", type=str, default=None,
                   help="buffer sizes of the higher system, e.g. '2,2' or 'inf,inf'")
    p.set_defaults(func=_cmd_couple)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
