"""Command-line front end: single runs, SMC batches, controller comparison.

Configuration is one JSON file with a strict schema (unknown keys are
rejected); every constant the experiments depend on surfaces there, with
defaults matching the standard evaluation setup. The seed can be overridden
by the ``DAMPC_SEED`` environment variable and that in turn by ``--seed``
(precedence: flag > env > file).

Subcommands:
    run      one controller run; writes trace.csv and summary.json
    smc      a seeded batch; writes runs.csv, stats_*.json, table.txt,
             plotdata.csv
    compare  smc for both controllers plus the comparison table

Exit status: 0 on success (for ``run``: the goal was reached), 2 when a run
did not converge, 1 on configuration errors (no output files are written).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .ampc import ampc_run, derive_rng, NS_INIT
from .dampc import dampc_run
from .dynamics import ActionLimits, InitBox, sample_initial, vec2
from .metrics import UpwashParams, WingConfig
from .pso import SwarmConfig
from .smc import (
    CONTROLLERS,
    DisturbanceSpec,
    ExperimentConfig,
    estimate,
)


class ConfigError(Exception):
    """Invalid or unreadable configuration."""


_TOP_KEYS = {
    "controller", "controllers", "birds", "phi", "h_max", "m", "beta",
    "k_min", "k_max", "v_max", "rho", "wing_span", "view_angle", "upwash",
    "swarm", "init_box", "seed", "runs", "epsilon", "delta", "sample_mode",
    "post_goal_steps", "workers", "disturbance", "out_dir",
}
_UPWASH_KEYS = {"mu1", "mu2", "sigma1", "sigma2"}
_SWARM_KEYS = {"iterations", "inertia", "cognitive", "social",
               "stall_iterations", "stall_tolerance"}
_BOX_KEYS = {"pos_lo", "pos_hi", "vel_lo", "vel_hi"}
_DISTURBANCE_KEYS = {"kind", "magnitude", "schedule", "target", "offset"}


def _check_keys(section: dict, allowed: set, where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown {where} keys: {', '.join(sorted(unknown))}")


def load_raw_config(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    _check_keys(raw, _TOP_KEYS, "config")
    return raw


def build_experiment(raw: dict, *, seed_override: int | None = None,
                     controller: str | None = None,
                     runs: int | None = None) -> ExperimentConfig:
    """Validate a raw config dict and assemble the experiment parameters."""
    try:
        seed = raw.get("seed", 0)
        env_seed = os.environ.get("DAMPC_SEED")
        if env_seed is not None:
            try:
                seed = int(env_seed)
            except ValueError:
                raise ConfigError(f"DAMPC_SEED is not an integer: {env_seed!r}")
        if seed_override is not None:
            seed = seed_override

        wing = WingConfig(w=raw.get("wing_span", 1.0),
                          theta=raw.get("view_angle", math.pi / 4))

        upwash = None
        if "upwash" in raw and raw["upwash"] is not None:
            section = raw["upwash"]
            _check_keys(section, _UPWASH_KEYS, "upwash")
            defaults = UpwashParams.for_wing(wing.w)
            upwash = UpwashParams(
                mu1=np.asarray(section.get("mu1", defaults.mu1), float),
                mu2=np.asarray(section.get("mu2", defaults.mu2), float),
                sigma1=np.asarray(section.get("sigma1", defaults.sigma1), float),
                sigma2=np.asarray(section.get("sigma2", defaults.sigma2), float),
            )

        swarm_kwargs = dict(raw.get("swarm") or {})
        _check_keys(swarm_kwargs, _SWARM_KEYS, "swarm")
        swarm = SwarmConfig(particles=2, **swarm_kwargs)

        box_kwargs = raw.get("init_box") or {}
        _check_keys(box_kwargs, _BOX_KEYS, "init_box")
        box = InitBox(**{key: vec2(*value) for key, value in box_kwargs.items()})

        disturbance = None
        if raw.get("disturbance") is not None:
            section = dict(raw["disturbance"])
            _check_keys(section, _DISTURBANCE_KEYS, "disturbance")
            if "offset" in section and section["offset"] is not None:
                section["offset"] = tuple(section["offset"])
            if "schedule" in section:
                section["schedule"] = tuple(section["schedule"])
            disturbance = DisturbanceSpec(**section)

        return ExperimentConfig(
            n_birds=raw.get("birds", 5),
            controller=controller or raw.get("controller", "dampc"),
            phi=raw.get("phi", 0.1),
            h_max=raw.get("h_max", 3),
            m=raw.get("m", 60),
            beta=raw.get("beta", 100.0),
            k_min=raw.get("k_min", 3),
            k_max=raw.get("k_max"),
            limits=ActionLimits(v_max=raw.get("v_max", 2.0),
                                rho=raw.get("rho", 0.9)),
            wing=wing,
            upwash=upwash,
            swarm=swarm,
            init_box=box,
            runs=runs if runs is not None else raw.get("runs"),
            epsilon=raw.get("epsilon", 0.01),
            delta=raw.get("delta", 0.05),
            sample_mode=raw.get("sample_mode", "literal"),
            base_seed=seed,
            disturbance=disturbance,
            post_goal_steps=raw.get("post_goal_steps", 10),
            workers=raw.get("workers", 1),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _fmt(value) -> str:
    """Full-precision text for floats so a parsed trace round-trips exactly."""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, header: list[str], rows) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _state_cells(state) -> list[float]:
    cells: list[float] = []
    for i in range(state.size):
        cells.extend([state.positions[i, 0], state.positions[i, 1],
                      state.velocities[i, 0], state.velocities[i, 1]])
    return cells


def _trace_header(n_birds: int) -> list[str]:
    header = ["run", "step", "J", "CV", "VM", "UB", "level_index",
              "level_value", "k", "max_horizon", "rounds"]
    for i in range(n_birds):
        header.extend([f"x{i}", f"y{i}", f"vx{i}", f"vy{i}"])
    return header


def cmd_run(args: argparse.Namespace) -> int:
    cfg = build_experiment(load_raw_config(args.config),
                           seed_override=args.seed, controller=args.controller)
    out_dir = Path(args.out or load_raw_config(args.config).get("out_dir", "out"))
    ctrl = cfg.controller_config()
    cost = ctrl.cost_model()
    seed = cfg.base_seed

    if cfg.controller == "ampc":
        s0 = sample_initial(derive_rng(seed, NS_INIT), cfg.n_birds, cfg.init_box)
        result = ampc_run(s0, ctrl, seed)
        steps = [(r.state, r.cost, r.level_index, r.level_value, r.horizon_used, 1)
                 for r in result.records]
        k_for = lambda _i: cfg.n_birds
    else:
        result = dampc_run(ctrl, cfg.n_birds, seed, policy=cfg.policy(),
                           init_box=cfg.init_box)
        steps = [(r.state, r.cost, r.level_index, r.level_value,
                  max(r.horizons), r.rounds) for r in result.records]
        k_for = lambda i: result.records[i].k

    out_dir.mkdir(parents=True, exist_ok=True)
    bd0 = cost.breakdown(result.s0)
    k0 = cfg.policy().resolve(cfg.n_birds).k_max
    rows = [[0, 0, bd0.total, bd0.cv, bd0.vm, bd0.ub, 0,
             result.level_log[0], k0, 0, 0] + _state_cells(result.s0)]
    for i, (state, bd, level_i, level_v, horizon, rounds) in enumerate(steps):
        rows.append([0, i + 1, bd.total, bd.cv, bd.vm, bd.ub, level_i,
                     level_v, k_for(i), horizon, rounds] + _state_cells(state))
    _write_csv(out_dir / "trace.csv", _trace_header(cfg.n_birds), rows)

    summary = {
        "controller": cfg.controller,
        "birds": cfg.n_birds,
        "seed": seed,
        "success": bool(result.success),
        "steps": len(steps),
        "final_cost": rows[-1][2],
        "levels": list(result.level_log),
        "deltas": list(result.delta_log),
        "phi": cfg.phi,
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"{cfg.controller} seed={seed}: "
          f"{'reached goal' if result.success else 'no convergence'} "
          f"in {len(steps)} steps, final J={summary['final_cost']:.6g}")
    return 0 if result.success else 2


_TABLE_ROWS = [
    ("Success rate", "success_rate", "{:.2f}"),
    ("Avg. convergence duration (steps)", "avg_convergence_steps", "{:.2f}"),
    ("Avg. horizon", "avg_horizon", "{:.2f}"),
    ("Avg. wall clock per run (s)", None, "{:.2f}"),
]
_K_ROWS = [
    ("  for good runs until convergence", "avg_neighborhood_until"),
    ("  for good runs over m steps", "avg_neighborhood_over_m"),
    ("  for good runs after convergence", "avg_neighborhood_after"),
    ("  for bad runs", "avg_neighborhood_bad"),
]


def format_table(stats_by_controller: dict) -> str:
    names = list(stats_by_controller)
    width = 38
    lines = ["".ljust(width) + "".join(n.upper().rjust(12) for n in names)]
    for label, attr, fmt in _TABLE_ROWS:
        cells = []
        for name in names:
            stats = stats_by_controller[name]
            if attr is None:
                value = stats.wall_clock_total / max(stats.runs, 1)
            else:
                value = getattr(stats, attr)
            cells.append(fmt.format(value).rjust(12))
        lines.append(label.ljust(width) + "".join(cells))
    lines.append("Avg. neighborhood size, k")
    for label, attr in _K_ROWS:
        cells = [
            "{:.2f}".format(getattr(stats_by_controller[n], attr)).rjust(12)
            for n in names
        ]
        lines.append(label.ljust(width) + "".join(cells))
    return "\n".join(lines) + "\n"


def _runs_csv_rows(records):
    for r in records:
        yield [r.seed, r.controller, int(r.success), int(r.reached_goal),
               r.steps, r.final_cost,
               float(np.mean(r.k_seq)) if r.k_seq else float("nan"),
               float(np.mean(r.horizon_seq)) if r.horizon_seq else float("nan"),
               "" if r.recovered is None else int(r.recovered),
               "" if r.recovery_steps is None else r.recovery_steps,
               r.wall_seconds]


_RUNS_HEADER = ["seed", "controller", "success", "reached_goal", "steps",
                "final_cost", "mean_k", "mean_horizon", "recovered",
                "recovery_steps", "wall_seconds"]


def _plotdata_rows(records):
    for r in records:
        for i, (j, level, k) in enumerate(zip(r.j_seq, r.level_seq, r.k_seq)):
            yield [r.seed, i + 1, j, level, k]


def _run_batches(cfg: ExperimentConfig, controllers, out_dir: Path) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    all_records = []
    stats_by = {}
    for name in controllers:
        batch_cfg = ExperimentConfig(**{**_config_kwargs(cfg), "controller": name})
        mu, stats, records = estimate(batch_cfg)
        stats_by[name] = stats
        all_records.extend(records)
        payload = asdict(stats)
        payload["mu_Z"] = mu
        (out_dir / f"stats_{name}.json").write_text(
            json.dumps(payload, indent=2, default=float) + "\n"
        )
        print(f"{name}: mu_Z={mu:.3f} over {stats.runs} runs "
              f"({stats.wall_clock_total:.1f}s)")
    _write_csv(out_dir / "runs.csv", _RUNS_HEADER, _runs_csv_rows(all_records))
    _write_csv(out_dir / "plotdata.csv", ["run", "step", "J", "level_value", "k"],
               _plotdata_rows(all_records))
    table = format_table(stats_by)
    (out_dir / "table.txt").write_text(table)
    print(table, end="")
    return stats_by


def _config_kwargs(cfg: ExperimentConfig) -> dict:
    return {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}


def cmd_smc(args: argparse.Namespace) -> int:
    raw = load_raw_config(args.config)
    cfg = build_experiment(raw, seed_override=args.seed,
                           controller=args.controller, runs=args.runs)
    controllers = [cfg.controller] if (args.controller or "controller" in raw) \
        else list(raw.get("controllers", [cfg.controller]))
    for name in controllers:
        if name not in CONTROLLERS:
            raise ConfigError(f"unknown controller: {name}")
    out_dir = Path(args.out or raw.get("out_dir", "out"))
    _run_batches(cfg, controllers, out_dir)
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    raw = load_raw_config(args.config)
    cfg = build_experiment(raw, seed_override=args.seed, runs=args.runs)
    out_dir = Path(args.out or raw.get("out_dir", "out"))
    _run_batches(cfg, list(CONTROLLERS), out_dir)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vflock",
        description="Distributed adaptive-neighborhood MPC for V-formation",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, desc in (
        ("run", cmd_run, "execute one run and export its trace"),
        ("smc", cmd_smc, "estimate success probability over a seeded batch"),
        ("compare", cmd_compare, "run both controllers and tabulate"),
    ):
        p = sub.add_parser(name, help=desc)
        p.add_argument("--config", required=True, help="path to the JSON config")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config/DAMPC_SEED seed")
        p.add_argument("--out", default=None, help="output directory")
        if name != "compare":
            p.add_argument("--controller", choices=CONTROLLERS, default=None)
        if name != "run":
            p.add_argument("--runs", type=int, default=None,
                           help="override the number of runs")
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
