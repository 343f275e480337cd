"""Adaptive-horizon model-predictive controllers.

Two layers live here. :func:`local_ampc` optimizes a single neighborhood:
it grows the prediction horizon from the longest already-fixed prefix up to
``h_max`` until the swarm finds a plan whose achieved cost undercuts the
neighborhood's current cost by a required decrement. :func:`ampc_run` is the
centralized controller that drives the whole flock with the same
grow-the-horizon loop plus a level ("Lyapunov") bookkeeping scheme: each time
the look-ahead cost drops by more than the threshold in force, a new level is
recorded and the per-step improvement demanded from then on shrinks with the
remaining budget.

Only the first action of a winning plan is ever applied; the next step
re-plans from the actual state, receding-horizon style.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .dynamics import ActionLimits, FlockState, step
from .metrics import CostBreakdown, CostModel, UpwashParams, WingConfig
from .pso import AccelerationPlan, CostFn, SwarmConfig, optimize, particle_count

# Namespaces for deriving independent random streams from one run seed.
NS_INIT = 0  # initial-state sampling
NS_CONSENSUS = 1  # (seed, NS_CONSENSUS, step, round, bird)
NS_CENTRAL = 2  # (seed, NS_CENTRAL, step)
NS_DISTURB = 3  # disturbance injection


def derive_rng(*key: int) -> np.random.Generator:
    """Deterministic generator for a structured key, schedule-independent."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def initial_threshold(ell_0: float, phi: float, m: int) -> float:
    """First required decrement: the cost-to-goal spread over the budget."""
    return (ell_0 - phi) / m


def dynamic_threshold(prev_level: float, i: int, m: int) -> float:
    """Decrement demanded for reaching level ``i``: ell_{i-1} / (m - i + 1)."""
    if not 1 <= i <= m:
        raise ValueError(f"level index must lie in [1, {m}], got {i}")
    return prev_level / (m - i + 1)


@dataclass(frozen=True)
class ThresholdSchedule:
    """Level-decrement schedule for a run with initial cost ``ell_0``."""

    ell_0: float
    phi: float
    m: int

    def __post_init__(self) -> None:
        if not self.phi > 0:
            raise ValueError("phi must be positive")
        if self.m < 1:
            raise ValueError("m must be at least 1")

    def delta(self, levels_reached: int, current_level: float) -> float:
        """Threshold in force after ``levels_reached`` advances."""
        if levels_reached == 0:
            return initial_threshold(self.ell_0, self.phi, self.m)
        return dynamic_threshold(
            current_level, min(levels_reached + 1, self.m), self.m
        )


@dataclass(frozen=True)
class ControllerConfig:
    """Parameters shared by the centralized and distributed controllers."""

    phi: float = 0.1
    h_max: int = 3
    m: int = 60
    beta: float = 100.0
    limits: ActionLimits = field(default_factory=ActionLimits)
    wing: WingConfig = field(default_factory=WingConfig)
    upwash: Optional[UpwashParams] = None
    swarm: SwarmConfig = field(default_factory=lambda: SwarmConfig(particles=2))

    def __post_init__(self) -> None:
        if not self.phi > 0:
            raise ValueError("phi must be positive")
        if self.h_max < 1:
            raise ValueError("h_max must be at least 1")
        if self.m < 0:
            raise ValueError("m must be nonnegative")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.upwash is None:
            object.__setattr__(self, "upwash", UpwashParams.for_wing(self.wing.w))

    def cost_model(self) -> CostModel:
        return CostModel(self.wing, self.upwash)

    def swarm_for(self, horizon: int, n_birds: int) -> SwarmConfig:
        """Swarm sized proportionally to the search dimension (p = 2*beta*h*B)."""
        return replace(
            self.swarm,
            particles=particle_count(self.beta, horizon, n_birds),
            seed=None,
        )


@dataclass(frozen=True)
class LocalResult:
    """Outcome of one neighborhood optimization.

    ``s_tilde`` is the subflock state after the first action, ``s_hat``
    after the last; ``cost_hat`` is the cost the plan achieved.
    """

    s_hat: FlockState
    s_tilde: FlockState
    plan: AccelerationPlan
    cost_hat: float
    horizon_used: int


def local_ampc(
    state_n: FlockState,
    constraint: AccelerationPlan,
    delta: float,
    cfg: ControllerConfig,
    cost_fn: CostFn,
    rng: np.random.Generator,
    hint: Optional[np.ndarray] = None,
) -> LocalResult:
    """Optimize a subflock, growing the horizon until ``delta`` is achieved.

    Starts at the longest fixed prefix so committed entries are always fully
    simulated before free tail actions, and stops at the first horizon whose
    plan decreases the subflock cost by at least ``delta``. If no horizon up
    to ``h_max`` succeeds, the ``h_max`` attempt is returned and the caller's
    resizing logic handles recovery. ``hint`` optionally warm-starts the
    swarm with a carried-over plan, shape (subflock, h', 2).
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    if constraint.n_birds != state_n.size:
        raise ValueError("constraint does not match the subflock size")
    h_start = max(1, constraint.longest_prefix)
    if h_start > cfg.h_max:
        raise ValueError("fixed prefixes exceed the maximum horizon")

    hints = () if hint is None else (hint,)
    j_start = cost_fn(state_n)
    res = None
    h = h_start
    for h in range(h_start, cfg.h_max + 1):
        res = optimize(
            state_n, constraint, h,
            cfg.swarm_for(h, state_n.size), cfg.limits, cost_fn, rng,
            hints=hints,
        )
        if j_start - res.achieved_cost >= delta:
            break
    return LocalResult(
        s_hat=res.state_after_last,
        s_tilde=res.state_after_first,
        plan=res.best_plan,
        cost_hat=res.achieved_cost,
        horizon_used=h,
    )


@dataclass(frozen=True)
class CentralStepRecord:
    """One executed step of the centralized controller."""

    step: int
    state: FlockState
    cost: CostBreakdown
    level_index: int
    level_value: float
    horizon_used: int


@dataclass(frozen=True)
class CentralRunResult:
    """Trace of a centralized adaptive-horizon run."""

    s0: FlockState
    success: bool
    action_log: tuple[np.ndarray, ...]
    level_log: tuple[float, ...]
    delta_log: tuple[float, ...]
    horizon_log: tuple[int, ...]
    records: tuple[CentralStepRecord, ...]

    @property
    def steps(self) -> int:
        return len(self.records)

    @property
    def final_state(self) -> FlockState:
        return self.records[-1].state if self.records else self.s0


def ampc_run(
    s0: FlockState,
    cfg: ControllerConfig,
    seed: int,
) -> CentralRunResult:
    """Drive the flock from ``s0`` toward cost <= phi within ``cfg.m`` steps.

    Per step the horizon grows from 1 to ``h_max`` until the plan's achieved
    cost undercuts the current level by the threshold in force; the first
    action of that plan (or of the best ``h_max`` plan if none qualifies) is
    applied. Non-success within the budget is a valid outcome.
    """
    cost = cfg.cost_model()
    ell_0 = cost(s0)
    levels = [ell_0]
    deltas: list[float] = []
    if ell_0 <= cfg.phi:
        return CentralRunResult(
            s0=s0, success=True, action_log=(), level_log=(ell_0,),
            delta_log=(), horizon_log=(), records=(),
        )

    schedule = ThresholdSchedule(ell_0=ell_0, phi=cfg.phi, m=max(cfg.m, 1))
    s = s0
    B = s0.size
    actions: list[np.ndarray] = []
    horizons: list[int] = []
    records: list[CentralStepRecord] = []
    success = False
    empty = AccelerationPlan.empty(B)

    carried: Optional[np.ndarray] = None  # previous plan, shifted one action
    for step_i in range(1, cfg.m + 1):
        delta = schedule.delta(len(levels) - 1, levels[-1])
        rng = derive_rng(seed, NS_CENTRAL, step_i)
        hints = () if carried is None else (carried,)
        found = None
        res = None
        for h in range(1, cfg.h_max + 1):
            res = optimize(s, empty, h, cfg.swarm_for(h, B),
                           cfg.limits, cost, rng, hints=hints)
            if levels[-1] - res.achieved_cost > delta:
                found = (res, h)
                break
        if found is not None:
            res, h_used = found
            levels.append(res.achieved_cost)
            deltas.append(delta)
        else:
            h_used = cfg.h_max  # fall back to the best full-horizon plan
        plan_array = res.best_plan.as_array(h_used)
        carried = plan_array[:, 1:, :] if h_used > 1 else None
        first = res.best_plan.first_actions()
        s = step(s, first)
        actions.append(first)
        horizons.append(h_used)
        bd = cost.breakdown(s)
        records.append(CentralStepRecord(
            step=step_i, state=s, cost=bd,
            level_index=len(levels) - 1, level_value=levels[-1],
            horizon_used=h_used,
        ))
        if bd.total <= cfg.phi:
            success = True
            break

    return CentralRunResult(
        s0=s0,
        success=success,
        action_log=tuple(actions),
        level_log=tuple(levels),
        delta_log=tuple(deltas),
        horizon_log=tuple(horizons),
        records=tuple(records),
    )
