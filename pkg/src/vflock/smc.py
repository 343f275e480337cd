"""Statistical model checking of formation reachability.

Batches independent controller runs with seeds ``base_seed + l``, records a
Bernoulli outcome per run (cost below the goal threshold, or recovery after
a disturbance), and aggregates comparison statistics: success rate, mean
convergence duration, mean horizon, and the neighborhood-size average in
four modes (good runs until convergence, good runs padded to the full step
budget, good runs over a post-convergence extension window, and bad runs).

Sample sizes for an additive-error estimate can be derived in two modes:
``literal`` uses ceil(4 ln(2/delta) / eps) and ``squared`` the standard
Chernoff-Hoeffding ceil(4 ln(2/delta) / eps^2).

Runs are embarrassingly parallel; with ``workers > 1`` they execute in a
process pool and are folded in seed order, so results are identical to the
sequential schedule.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .ampc import (
    NS_DISTURB,
    NS_INIT,
    ControllerConfig,
    ampc_run,
    derive_rng,
)
from .dampc import NeighborhoodPolicy, dampc_run
from .dynamics import ActionLimits, FlockState, InitBox, sample_initial
from .metrics import UpwashParams, WingConfig
from .pso import SwarmConfig

CONTROLLERS = ("dampc", "ampc")
SAMPLE_MODES = ("literal", "squared")


def required_runs(epsilon: float, delta: float, mode: str = "literal") -> int:
    """Number of i.i.d. runs for an additive-error (eps, delta) estimate."""
    if epsilon <= 0 or delta <= 0:
        raise ValueError("epsilon and delta must be positive")
    if mode not in SAMPLE_MODES:
        raise ValueError(f"mode must be one of {SAMPLE_MODES}")
    base = 4.0 * math.log(2.0 / delta)
    denom = epsilon if mode == "literal" else epsilon * epsilon
    return max(0, math.ceil(base / denom))


@dataclass(frozen=True)
class DisturbanceSpec:
    """How and when to perturb a run.

    ``displacement`` shifts one bird's position (an explicit ``offset``
    vector, or a random direction of the given magnitude); ``crash`` zeroes
    one bird's velocity, which under the relative acceleration bound also
    holds its acceleration at zero for the following step. An empty
    ``schedule`` means the disturbance fires once the goal is reached;
    otherwise it is applied before each scheduled step index.
    """

    kind: str = "displacement"
    magnitude: float = 1.0
    schedule: tuple[int, ...] = ()
    target: Union[int, str] = "random"
    offset: Optional[tuple[float, float]] = None

    def __post_init__(self) -> None:
        if self.kind not in ("displacement", "crash"):
            raise ValueError("kind must be 'displacement' or 'crash'")
        if self.magnitude < 0:
            raise ValueError("magnitude must be nonnegative")
        if isinstance(self.target, str) and self.target != "random":
            raise ValueError("target must be a bird index or 'random'")
        object.__setattr__(self, "schedule", tuple(int(s) for s in self.schedule))


def apply_disturbance(state: FlockState, spec: DisturbanceSpec,
                      rng: np.random.Generator) -> FlockState:
    """Perturb one bird of ``state``; deterministic for a given generator."""
    if isinstance(spec.target, int):
        target = spec.target
        if not 0 <= target < state.size:
            raise ValueError("disturbance target out of range")
    else:
        target = int(rng.integers(0, state.size))

    positions = state.positions.copy()
    velocities = state.velocities.copy()
    if spec.kind == "displacement":
        if spec.offset is not None:
            offset = np.asarray(spec.offset, dtype=float)
        else:
            angle = rng.uniform(0.0, 2.0 * math.pi)
            offset = spec.magnitude * np.array([math.cos(angle), math.sin(angle)])
        positions[target] = positions[target] + offset
    else:  # crash
        velocities[target] = 0.0
    return FlockState(positions=positions, velocities=velocities, time=state.time)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one SMC batch."""

    n_birds: int = 5
    controller: str = "dampc"
    phi: float = 0.1
    h_max: int = 3
    m: int = 60
    beta: float = 100.0
    k_min: int = 3
    k_max: Optional[int] = None
    limits: ActionLimits = field(default_factory=ActionLimits)
    wing: WingConfig = field(default_factory=WingConfig)
    upwash: Optional[UpwashParams] = None
    swarm: SwarmConfig = field(default_factory=lambda: SwarmConfig(particles=2))
    init_box: InitBox = field(default_factory=InitBox)
    runs: Optional[int] = None  # None: derive from (epsilon, delta)
    epsilon: float = 0.01
    delta: float = 0.05
    sample_mode: str = "literal"
    base_seed: int = 0
    disturbance: Optional[DisturbanceSpec] = None
    post_goal_steps: int = 10
    workers: int = 1

    def __post_init__(self) -> None:
        if self.n_birds < 1:
            raise ValueError("n_birds must be at least 1")
        if self.controller not in CONTROLLERS:
            raise ValueError(f"controller must be one of {CONTROLLERS}")
        if not (0 < self.epsilon < 1) or not (0 < self.delta < 1):
            raise ValueError("epsilon and delta must lie in (0, 1)")
        if self.sample_mode not in SAMPLE_MODES:
            raise ValueError(f"sample_mode must be one of {SAMPLE_MODES}")
        if self.runs is not None and self.runs < 1:
            raise ValueError("runs must be positive when given")
        if self.base_seed < 0:
            raise ValueError("base_seed must be nonnegative")
        if self.post_goal_steps < 0:
            raise ValueError("post_goal_steps must be nonnegative")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        if self.disturbance is not None and self.controller != "dampc":
            raise ValueError("disturbance experiments require the dampc controller")

    @property
    def total_runs(self) -> int:
        if self.runs is not None:
            return self.runs
        return required_runs(self.epsilon, self.delta, self.sample_mode)

    def controller_config(self) -> ControllerConfig:
        return ControllerConfig(
            phi=self.phi, h_max=self.h_max, m=self.m, beta=self.beta,
            limits=self.limits, wing=self.wing, upwash=self.upwash,
            swarm=self.swarm,
        )

    def policy(self) -> NeighborhoodPolicy:
        return NeighborhoodPolicy(k_min=self.k_min, k_max=self.k_max)


@dataclass(frozen=True)
class RunRecord:
    """Per-run outcome and the sequences the aggregate statistics need."""

    seed: int
    controller: str
    success: bool  # the Bernoulli outcome Z for this run
    reached_goal: bool
    steps: int
    final_cost: float
    k_seq: tuple[int, ...]
    k_post: tuple[int, ...]
    horizon_seq: tuple[float, ...]  # per-step mean per-bird horizon
    rounds_seq: tuple[int, ...]
    j_seq: tuple[float, ...]  # cost after each executed step
    level_seq: tuple[float, ...]  # level value in force after each step
    levels: tuple[float, ...]
    deltas: tuple[float, ...]
    recovered: Optional[bool]
    recovery_steps: Optional[int]
    wall_seconds: float


@dataclass(frozen=True)
class RunStatistics:
    """Aggregate metrics over one batch, Table-style."""

    controller: str
    n_birds: int
    runs: int
    success_rate: float
    avg_convergence_steps: float
    avg_horizon: float
    avg_neighborhood_until: float
    avg_neighborhood_over_m: float
    avg_neighborhood_after: float
    avg_neighborhood_bad: float
    wall_clock_total: float


def _mean(values) -> float:
    values = list(values)
    return float(np.mean(values)) if values else float("nan")


def _recovery_seed(seed: int) -> int:
    return int(np.random.SeedSequence((seed, NS_DISTURB, 1)).generate_state(1)[0])


def _execute_one(cfg: ExperimentConfig, seed: int) -> RunRecord:
    """One seeded run (plus disturbance recovery when configured)."""
    start = time.perf_counter()
    ctrl = cfg.controller_config()
    spec = cfg.disturbance
    recovered: Optional[bool] = None
    recovery_steps: Optional[int] = None

    if cfg.controller == "ampc":
        s0 = sample_initial(derive_rng(seed, NS_INIT), cfg.n_birds, cfg.init_box)
        res = ampc_run(s0, ctrl, seed)
        reached = res.success
        steps = res.steps
        final_cost = (res.records[-1].cost.total if res.records
                      else ctrl.cost_model()(res.s0))
        B = cfg.n_birds
        k_seq = (B,) * steps
        k_post = (B,) * (cfg.post_goal_steps if reached else 0)
        horizon_seq = tuple(float(h) for h in res.horizon_log)
        rounds_seq = (1,) * steps
        j_seq = tuple(r.cost.total for r in res.records)
        level_seq = tuple(r.level_value for r in res.records)
        levels, deltas = res.level_log, res.delta_log
    else:
        perturbation = None
        if spec is not None and spec.schedule:
            schedule = set(spec.schedule)

            def perturbation(step_i, state, _spec=spec, _seed=seed):
                if step_i in schedule:
                    return apply_disturbance(
                        state, _spec, derive_rng(_seed, NS_DISTURB, step_i)
                    )
                return state

        post = cfg.post_goal_steps if spec is None else 0
        res = dampc_run(
            ctrl, cfg.n_birds, seed, policy=cfg.policy(), init_box=cfg.init_box,
            post_goal_steps=post, perturbation=perturbation,
        )
        reached = res.success
        steps = res.steps
        final_cost = (res.records[-1].cost.total if res.records
                      else ctrl.cost_model()(res.s0))
        k_seq = tuple(r.k for r in res.records)
        k_post = tuple(r.k for r in res.post_records)
        horizon_seq = tuple(float(np.mean(r.horizons)) for r in res.records)
        rounds_seq = tuple(r.rounds for r in res.records)
        j_seq = tuple(r.cost.total for r in res.records)
        level_seq = tuple(r.level_value for r in res.records)
        levels, deltas = res.level_log, res.delta_log

        if spec is not None and not spec.schedule and reached:
            disturbed = apply_disturbance(
                res.final_state, spec, derive_rng(seed, NS_DISTURB)
            )
            rec = dampc_run(
                ctrl, cfg.n_birds, _recovery_seed(seed),
                policy=cfg.policy(), initial=disturbed,
            )
            recovered = rec.success
            recovery_steps = rec.steps if rec.success else None

    if spec is not None and not spec.schedule:
        success = reached and bool(recovered)
    else:
        success = reached

    return RunRecord(
        seed=seed,
        controller=cfg.controller,
        success=success,
        reached_goal=reached,
        steps=steps,
        final_cost=float(final_cost),
        k_seq=k_seq,
        k_post=k_post,
        horizon_seq=horizon_seq,
        rounds_seq=rounds_seq,
        j_seq=j_seq,
        level_seq=level_seq,
        levels=tuple(levels),
        deltas=tuple(deltas),
        recovered=recovered,
        recovery_steps=recovery_steps,
        wall_seconds=time.perf_counter() - start,
    )


def aggregate(records, cfg: ExperimentConfig) -> RunStatistics:
    """Fold per-run records into Table-style statistics.

    Good/bad partition is by goal reachability and is exhaustive and
    disjoint. Neighborhood modes: "until" averages each good run's k over
    its executed steps; "over m" pads with the post-goal extension and then
    the last known k out to the full budget; "after" averages the extension
    window only; "bad" averages failed runs over their (full) step budget.
    Each run weighs equally.
    """
    records = list(records)
    good = [r for r in records if r.reached_goal]
    bad = [r for r in records if not r.reached_goal]

    def padded_to_m(r: RunRecord) -> list[int]:
        seq = list(r.k_seq) + list(r.k_post)
        if not seq:
            seq = [cfg.n_birds]
        while len(seq) < cfg.m:
            seq.append(seq[-1])
        return seq[: cfg.m]

    return RunStatistics(
        controller=cfg.controller,
        n_birds=cfg.n_birds,
        runs=len(records),
        success_rate=_mean([1.0 if r.success else 0.0 for r in records]),
        avg_convergence_steps=_mean([r.steps for r in good]),
        avg_horizon=_mean([np.mean(r.horizon_seq) for r in good if r.horizon_seq]),
        avg_neighborhood_until=_mean([np.mean(r.k_seq) for r in good if r.k_seq]),
        avg_neighborhood_over_m=_mean([np.mean(padded_to_m(r)) for r in good]),
        avg_neighborhood_after=_mean([np.mean(r.k_post) for r in good if r.k_post]),
        avg_neighborhood_bad=_mean([np.mean(r.k_seq) for r in bad if r.k_seq]),
        wall_clock_total=float(sum(r.wall_seconds for r in records)),
    )


def estimate(cfg: ExperimentConfig):
    """Run the batch and estimate the success probability.

    Returns ``(mu_z, statistics, records)`` where ``mu_z`` is the mean of
    the per-run Bernoulli outcomes and ``records`` is ordered by seed.
    """
    seeds = [cfg.base_seed + l for l in range(cfg.total_runs)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            records = list(pool.map(_execute_one, [cfg] * len(seeds), seeds))
    else:
        records = [_execute_one(cfg, seed) for seed in seeds]
    records = tuple(records)
    mu = _mean([1.0 if r.success else 0.0 for r in records])
    return mu, aggregate(records, cfg), records
