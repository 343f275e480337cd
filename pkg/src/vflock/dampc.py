"""Distributed adaptive-neighborhood, adaptive-horizon MPC engine.

Each time step runs a sequence of consensus rounds: every bird without a
fixed plan optimizes its k-nearest-neighbor subflock (honoring plans already
fixed by earlier winners), the proposal with the lowest achieved cost wins,
and the winner's whole subflock commits to its plan. Rounds repeat until all
birds are fixed, which takes at most B rounds since each round fixes at
least the winner itself.

After the step, the flock-wide look-ahead state (everyone's full fixed
sequence, shorter sequences padded with zero accelerations) is costed
against the current level: a drop larger than the threshold in force
advances the level, and the neighborhood size k shrinks or grows
accordingly. The recorded level sequence is strictly decreasing and serves
as the run's Lyapunov certificate.

Determinism: every optimizer call draws from a generator derived from
(run seed, step, round, bird), so results do not depend on scheduling and
any run can be reproduced bit for bit from its seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .ampc import (
    ControllerConfig,
    LocalResult,
    NS_CONSENSUS,
    NS_INIT,
    derive_rng,
    local_ampc,
)
from .dynamics import FlockState, InitBox, neighbors, restrict, sample_initial, step
from .metrics import CostBreakdown, CostModel
from .pso import AccelerationPlan


@dataclass(frozen=True)
class NeighborhoodPolicy:
    """Bounds for the adaptive neighborhood size."""

    k_min: int = 3
    k_max: Optional[int] = None  # None = flock size

    def __post_init__(self) -> None:
        if self.k_min < 1:
            raise ValueError("k_min must be at least 1")
        if self.k_max is not None and self.k_max < self.k_min:
            raise ValueError("k_max must be >= k_min")

    def resolve(self, n_birds: int) -> "NeighborhoodPolicy":
        """Clamp the bounds to an actual flock size."""
        k_max = n_birds if self.k_max is None else min(self.k_max, n_birds)
        k_min = min(self.k_min, k_max)
        return NeighborhoodPolicy(k_min=k_min, k_max=k_max)


def neigh_size(j_current: float, k: int, level_incremented: bool,
               policy: NeighborhoodPolicy) -> int:
    """Resize the neighborhood given the current look-ahead cost.

    On a level advance, k shrinks by ``ceil(1 - J/k)`` (one bird for small
    costs); otherwise it grows by one. Always clamped into the policy bounds.
    """
    if policy.k_max is None:
        raise ValueError("policy must be resolved against a flock size")
    if level_incremented:
        k_new = k - math.ceil(1.0 - j_current / k)
        return min(max(k_new, policy.k_min), policy.k_max)
    return min(k + 1, policy.k_max)


@dataclass
class ConsensusState:
    """Mutable bookkeeping for one time step's consensus rounds."""

    plans: AccelerationPlan
    unfixed: set[int]
    round: int = 0


@dataclass(frozen=True)
class ConsensusOutcome:
    plans: AccelerationPlan  # every bird fixed
    results: dict[int, LocalResult]  # last local result per bird
    rounds: int
    r_sizes: tuple[int, ...]  # |R| at the start of each round
    winners: tuple[int, ...]


@dataclass(frozen=True)
class LevelLedger:
    """Recorded levels with the threshold that was in force at each advance."""

    levels: tuple[float, ...]
    deltas: tuple[float, ...]

    @property
    def current(self) -> float:
        return self.levels[-1]

    @property
    def index(self) -> int:
        return len(self.levels)


@dataclass(frozen=True)
class StepRecord:
    """One executed step of the distributed engine."""

    step: int
    state: FlockState  # state after applying the first actions
    cost: CostBreakdown
    j_lookahead: float
    level_index: int
    level_value: float
    k: int  # neighborhood size used for this step's consensus
    horizons: tuple[int, ...]  # per-bird fixed-sequence lengths
    rounds: int
    r_sizes: tuple[int, ...]
    post_goal: bool = False


@dataclass(frozen=True)
class RunResult:
    """Full trace of one distributed run."""

    s0: FlockState
    success: bool
    action_log: tuple[np.ndarray, ...]
    records: tuple[StepRecord, ...]
    post_records: tuple[StepRecord, ...]
    ledger: LevelLedger

    @property
    def steps(self) -> int:
        return len(self.records)

    @property
    def final_state(self) -> FlockState:
        return self.records[-1].state if self.records else self.s0

    @property
    def level_log(self) -> tuple[float, ...]:
        return self.ledger.levels

    @property
    def delta_log(self) -> tuple[float, ...]:
        return self.ledger.deltas


def _shift_plans(plans: AccelerationPlan) -> Optional[np.ndarray]:
    """Drop each bird's applied first action; zero-pad to a rectangle.

    The result warm-starts the next step's optimizations; ``None`` when no
    bird has actions left.
    """
    tails = [p[1:] for p in plans.prefixes]
    horizon = max(len(t) for t in tails)
    if horizon == 0:
        return None
    out = np.zeros((len(tails), horizon, 2))
    for b, tail in enumerate(tails):
        out[b, : len(tail)] = tail
    return out


def compose_lookahead(state: FlockState, plans: AccelerationPlan) -> FlockState:
    """Flock state after every bird executes its full fixed sequence.

    Sequences shorter than the longest are padded with zero accelerations.
    """
    horizon = plans.longest_prefix
    X = state.positions.copy()
    V = state.velocities.copy()
    for t in range(horizon):
        A = np.zeros((state.size, 2))
        for b in range(state.size):
            if t < plans.prefix_len(b):
                A[b] = plans.prefixes[b][t]
        X = X + V
        V = V + A
    return FlockState(positions=X, velocities=V, time=state.time + horizon)


def consensus_step(
    state: FlockState,
    k: int,
    t: int,
    cfg: ControllerConfig,
    cost: CostModel,
    seed: int,
    step_index: int,
    initial_plans: Optional[AccelerationPlan] = None,
    hint_plans: Optional[np.ndarray] = None,
) -> ConsensusOutcome:
    """Run consensus rounds until every bird has a fixed plan.

    ``t`` is the current level index; each unfixed bird demands a decrement
    of its subflock cost divided by the remaining budget. The round winner is
    the proposal with the lowest achieved cost (ties to the lowest bird
    index); its whole neighborhood commits, except birds fixed earlier,
    whose sequences are never modified. ``hint_plans`` (shape (B, h', 2))
    optionally warm-start every optimization with carried-over actions.
    """
    B = state.size
    if not 1 <= k <= B:
        raise ValueError(f"neighborhood size must lie in [1, {B}], got {k}")
    plans = initial_plans if initial_plans is not None else AccelerationPlan.empty(B)
    cs = ConsensusState(
        plans=plans,
        unfixed={b for b in range(B) if plans.prefix_len(b) == 0},
    )
    results: dict[int, LocalResult] = {}
    r_sizes: list[int] = []
    winners: list[int] = []

    while cs.unfixed:
        cs.round += 1
        r_sizes.append(len(cs.unfixed))
        proposals: dict[int, tuple[LocalResult, tuple[int, ...]]] = {}
        for i in sorted(cs.unfixed):
            subflock = neighbors(state, i, k)
            s_ni = restrict(state, subflock)
            delta_i = cost(s_ni) / max(cfg.m - t, 1)
            if delta_i <= 0.0:
                delta_i = math.inf  # cost already zero: any plan will do
            res = local_ampc(
                s_ni,
                cs.plans.restrict(subflock),
                delta_i,
                cfg,
                cost,
                derive_rng(seed, NS_CONSENSUS, step_index, cs.round, i),
                hint=None if hint_plans is None else hint_plans[list(subflock)],
            )
            proposals[i] = (res, subflock)
            results[i] = res

        winner = min(sorted(proposals), key=lambda i: proposals[i][0].cost_hat)
        winners.append(winner)
        res_w, subflock_w = proposals[winner]
        for local_idx, b in enumerate(subflock_w):
            if b in cs.unfixed:  # already-fixed sequences are never touched
                cs.plans = cs.plans.with_fixed(b, res_w.plan.prefixes[local_idx])
                cs.unfixed.discard(b)

    return ConsensusOutcome(
        plans=cs.plans,
        results=results,
        rounds=cs.round,
        r_sizes=tuple(r_sizes),
        winners=tuple(winners),
    )


def dampc_run(
    cfg: ControllerConfig,
    n_birds: int,
    seed: int,
    policy: Optional[NeighborhoodPolicy] = None,
    init_box: Optional[InitBox] = None,
    initial: Optional[FlockState] = None,
    post_goal_steps: int = 0,
    perturbation: Optional[Callable[[int, FlockState], FlockState]] = None,
    on_step: Optional[Callable[[StepRecord], None]] = None,
) -> RunResult:
    """One full distributed run from a sampled (or given) initial state.

    Per outer step: consensus fixes everyone's sequences, the first actions
    are applied, the level advances when the look-ahead cost drops by more
    than the threshold in force, and k is resized. Terminates on cost <= phi
    (success) or after ``cfg.m`` steps (failure, a valid outcome). When
    ``post_goal_steps > 0``, successful runs keep the loop going that many
    extra steps to observe post-convergence behavior.

    ``perturbation`` is invoked as ``perturbation(step_index, state)`` before
    each step's consensus and may return a modified state (used for
    disturbance injection).
    """
    policy = (policy or NeighborhoodPolicy()).resolve(n_birds)
    cost = cfg.cost_model()
    if initial is not None:
        if initial.size != n_birds:
            raise ValueError("initial state does not match n_birds")
        s0 = initial
    else:
        s0 = sample_initial(derive_rng(seed, NS_INIT), n_birds,
                            init_box if init_box is not None else InitBox())

    levels = [cost(s0)]
    deltas: list[float] = []
    t = 1  # level index: levels[t - 1] is current
    k = policy.k_max
    s = s0
    records: list[StepRecord] = []
    post_records: list[StepRecord] = []
    actions: list[np.ndarray] = []
    success = levels[0] <= cfg.phi
    goal_step: Optional[int] = None if not success else 0

    step_i = 0
    carried: Optional[np.ndarray] = None  # previous plans, shifted one action
    while True:
        step_i += 1
        in_main = goal_step is None
        if in_main and step_i > cfg.m:
            break
        if not in_main and step_i > goal_step + post_goal_steps:
            break

        if perturbation is not None:
            s = perturbation(step_i, s)

        outcome = consensus_step(s, k, t, cfg, cost, seed, step_i,
                                 hint_plans=carried)
        carried = _shift_plans(outcome.plans)
        firsts = outcome.plans.first_actions()
        s_next = step(s, firsts)
        s_hat = compose_lookahead(s, outcome.plans)
        j_hat = cost(s_hat)

        delta = levels[t - 1] / max(cfg.m - t + 1, 1)
        incremented = levels[t - 1] - j_hat > delta
        if incremented:
            levels.append(j_hat)
            deltas.append(delta)
            t += 1
        k_used = k
        k = neigh_size(j_hat, k, incremented, policy)

        s = s_next
        bd = cost.breakdown(s)
        record = StepRecord(
            step=step_i,
            state=s,
            cost=bd,
            j_lookahead=j_hat,
            level_index=t - 1,
            level_value=levels[t - 1],
            k=k_used,
            horizons=outcome.plans.lengths,
            rounds=outcome.rounds,
            r_sizes=outcome.r_sizes,
            post_goal=not in_main,
        )
        (records if in_main else post_records).append(record)
        actions.append(firsts)
        if on_step is not None:
            on_step(record)

        if in_main and bd.total <= cfg.phi:
            success = True
            goal_step = step_i
            if post_goal_steps == 0:
                break

    return RunResult(
        s0=s0,
        success=success,
        action_log=tuple(actions),
        records=tuple(records),
        post_records=tuple(post_records),
        ledger=LevelLedger(levels=tuple(levels), deltas=tuple(deltas)),
    )
