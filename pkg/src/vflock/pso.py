"""Global-best particle swarm over horizon-length acceleration plans.

Plans carry per-bird *fixed prefixes*: the first entries of a bird's
sequence may already be committed (from an earlier consensus round) while
the remainder is "not fixed yet" (:data:`NFY`). The optimizer treats every
entry beyond a bird's prefix as a free decision variable, a 2D acceleration
living in the box ``[-rho*v_max, rho*v_max]^2``; at rollout time each free
entry is projected through the state-dependent action clamp, so any particle
decodes to a feasible plan. Fixed entries are replayed verbatim.

Plan fitness is the minimum flock cost over the states visited while
executing the plan, so a plan is as good as the best state it reaches
within the horizon.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union  # noqa: F401

import numpy as np

from .dynamics import ActionLimits, FlockState, Vec2, clamp_actions, step


class _NotFixedYet:
    """Marker for an acceleration entry awaiting consensus."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "NFY"


NFY = _NotFixedYet()

PlanEntry = Union[Vec2, _NotFixedYet]


@dataclass(frozen=True)
class AccelerationPlan:
    """Per-bird acceleration sequences where only a prefix may be fixed.

    Each bird's entry is an ``(L_b, 2)`` array of committed accelerations;
    everything past ``L_b`` is implicitly :data:`NFY`. Lengths may differ
    between birds.
    """

    prefixes: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        frozen = []
        for seq in self.prefixes:
            arr = np.asarray(seq, dtype=float).reshape(-1, 2)
            if not np.all(np.isfinite(arr)):
                raise ValueError("plan entries must be finite")
            arr = arr.copy()
            arr.flags.writeable = False
            frozen.append(arr)
        if not frozen:
            raise ValueError("plan needs at least one bird")
        object.__setattr__(self, "prefixes", tuple(frozen))

    @classmethod
    def empty(cls, n_birds: int) -> "AccelerationPlan":
        """All entries NFY for every bird."""
        return cls(prefixes=tuple(np.zeros((0, 2)) for _ in range(n_birds)))

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[PlanEntry]]) -> "AccelerationPlan":
        """Build from explicit rows of Vec2 / NFY entries.

        Within a row every fixed entry must precede every NFY entry.
        """
        prefixes = []
        for row in rows:
            fixed: list[np.ndarray] = []
            seen_nfy = False
            for entry in row:
                if entry is NFY:
                    seen_nfy = True
                elif seen_nfy:
                    raise ValueError("fixed entry after NFY violates prefix invariant")
                else:
                    fixed.append(np.asarray(entry, dtype=float))
            prefixes.append(np.array(fixed).reshape(-1, 2))
        return cls(prefixes=tuple(prefixes))

    @classmethod
    def concrete(cls, actions: np.ndarray) -> "AccelerationPlan":
        """Fully fixed plan from an ``(B, h, 2)`` array."""
        a = np.asarray(actions, dtype=float)
        if a.ndim != 3 or a.shape[2] != 2:
            raise ValueError("expected actions of shape (B, h, 2)")
        return cls(prefixes=tuple(a[b] for b in range(a.shape[0])))

    @property
    def n_birds(self) -> int:
        return len(self.prefixes)

    @property
    def lengths(self) -> tuple[int, ...]:
        return tuple(p.shape[0] for p in self.prefixes)

    @property
    def longest_prefix(self) -> int:
        return max(self.lengths)

    def prefix_len(self, b: int) -> int:
        return self.prefixes[b].shape[0]

    def entry(self, b: int, t: int) -> PlanEntry:
        if t < self.prefix_len(b):
            return self.prefixes[b][t]
        return NFY

    def is_concrete(self, horizon: int) -> bool:
        return all(n == horizon for n in self.lengths)

    def as_array(self, horizon: int) -> np.ndarray:
        """Stack a concrete plan into shape (B, horizon, 2)."""
        if not self.is_concrete(horizon):
            raise ValueError("plan is not concrete at the requested horizon")
        return np.stack(self.prefixes)

    def first_actions(self) -> np.ndarray:
        """First fixed action of every bird, shape (B, 2)."""
        if any(n == 0 for n in self.lengths):
            raise ValueError("some birds have no fixed action yet")
        return np.stack([p[0] for p in self.prefixes])

    def restrict(self, indices) -> "AccelerationPlan":
        return AccelerationPlan(prefixes=tuple(self.prefixes[b] for b in indices))

    def with_fixed(self, b: int, sequence: np.ndarray) -> "AccelerationPlan":
        """Copy of the plan with bird ``b``'s prefix replaced."""
        seq = np.asarray(sequence, dtype=float).reshape(-1, 2)
        prefixes = list(self.prefixes)
        prefixes[b] = seq
        return AccelerationPlan(prefixes=tuple(prefixes))


@dataclass(frozen=True)
class SwarmConfig:
    """Particle swarm hyperparameters.

    Defaults are the standard constriction-equivalent constants. ``seed``
    is only consulted when :func:`optimize` is not handed a generator.
    The search stops early once the global best has not improved by a
    relative ``stall_tolerance`` for ``stall_iterations`` iterations
    (set ``stall_iterations=None`` to always run the full budget).
    """

    particles: int
    iterations: int = 40
    inertia: float = 0.7298
    cognitive: float = 1.49618
    social: float = 1.49618
    seed: Optional[int] = None
    stall_iterations: Optional[int] = 12
    stall_tolerance: float = 1e-6

    def __post_init__(self) -> None:
        if self.particles < 2:
            raise ValueError("swarm needs at least two particles")
        if self.iterations < 1:
            raise ValueError("swarm needs at least one iteration")
        if self.stall_iterations is not None and self.stall_iterations < 1:
            raise ValueError("stall_iterations must be positive or None")


def particle_count(beta: float, horizon: int, n_birds: int) -> int:
    """Swarm size proportional to the search dimension: 2 * beta * h * B."""
    return max(2, int(math.ceil(2.0 * beta * horizon * n_birds)))


@dataclass(frozen=True)
class OptimizeResult:
    """Best plan found plus the states its execution visits."""

    best_plan: AccelerationPlan
    state_after_first: FlockState
    state_after_last: FlockState
    achieved_cost: float


CostFn = Callable[[FlockState], float]


def rollout(state: FlockState, plan: AccelerationPlan, horizon: int) -> list[FlockState]:
    """States visited by executing a concrete plan, ``[s^1 .. s^h]``."""
    actions = plan.as_array(horizon)
    states = []
    s = state
    for t in range(horizon):
        s = step(s, actions[:, t, :])
        states.append(s)
    return states


def horizon_cost(state: FlockState, plan: AccelerationPlan, cost_fn: CostFn) -> float:
    """Minimum cost over the states visited while executing ``plan``.

    The plan must be concrete and rectangular; actions are applied as given
    (feasibility is the caller's concern).
    """
    horizon = plan.longest_prefix
    if horizon < 1:
        raise ValueError("plan must cover at least one step")
    if not plan.is_concrete(horizon):
        raise ValueError("horizon_cost needs a fully concrete rectangular plan")
    return min(cost_fn(s) for s in rollout(state, plan, horizon))


def _batched_rollout_cost(
    X0: np.ndarray,
    V0: np.ndarray,
    free: np.ndarray,  # (p, n_slots, 2)
    slot_cols: list[np.ndarray],  # per step: indices into slot axis
    slot_birds: list[np.ndarray],  # per step: bird index per free slot
    fixed_birds: list[np.ndarray],  # per step: birds with a frozen entry
    fixed_vals: list[np.ndarray],  # per step: their (n_fixed, 2) values
    limits: ActionLimits,
    batch_cost: Callable[[np.ndarray, np.ndarray], np.ndarray],
) -> np.ndarray:
    p, B = free.shape[0], X0.shape[0]
    X = np.broadcast_to(X0, (p, B, 2)).copy()
    V = np.broadcast_to(V0, (p, B, 2)).copy()
    best = np.full(p, np.inf)
    for t in range(len(slot_cols)):
        A = np.zeros((p, B, 2))
        if fixed_birds[t].size:
            A[:, fixed_birds[t]] = fixed_vals[t]
        if slot_birds[t].size:
            birds = slot_birds[t]
            A[:, birds] = clamp_actions(V[:, birds], free[:, slot_cols[t]], limits)
        X = X + V  # position update uses the pre-step velocity
        V = V + A
        np.minimum(best, batch_cost(X, V), out=best)
    return best


def _decode_plan(
    state: FlockState,
    constraint: AccelerationPlan,
    horizon: int,
    free_vec: np.ndarray,
    slots: list[tuple[int, int]],
    limits: ActionLimits,
) -> AccelerationPlan:
    """Turn one particle into the concrete plan it executes.

    Frozen prefix entries are copied bit-identically; free entries record
    the clamped acceleration actually applied along the rollout.
    """
    B = state.size
    free = free_vec.reshape(-1, 2)
    by_step: dict[int, list[tuple[int, int]]] = {}
    for idx, (b, t) in enumerate(slots):
        by_step.setdefault(t, []).append((b, idx))
    rows = [np.zeros((horizon, 2)) for _ in range(B)]
    V = state.velocities.copy()
    for t in range(horizon):
        A = np.zeros((B, 2))
        for b in range(B):
            if t < constraint.prefix_len(b):
                A[b] = constraint.prefixes[b][t]
        for b, idx in by_step.get(t, ()):
            A[b] = clamp_actions(V[b][None, :], free[idx][None, :], limits)[0]
        for b in range(B):
            rows[b][t] = A[b]
        V = V + A
    return AccelerationPlan(prefixes=tuple(rows))


def optimize(
    state: FlockState,
    constraint: AccelerationPlan,
    horizon: int,
    cfg: SwarmConfig,
    limits: ActionLimits,
    cost_fn: CostFn,
    rng: Optional[np.random.Generator] = None,
    hints: Sequence[np.ndarray] = (),
) -> OptimizeResult:
    """Search acceleration plans of length ``horizon`` honoring ``constraint``.

    Standard global-best PSO over the free entries only. One particle is
    always seeded with the all-zero completion, so the result never scores
    worse than coasting; ``hints`` (arrays of shape (B, h', 2), typically the
    previous control step's plan shifted by one action) seed further
    particles, receding-horizon style. Deterministic given the generator
    (or ``cfg.seed``); global-best ties resolve to the lowest particle index.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    B = state.size
    if constraint.n_birds != B:
        raise ValueError("constraint and state disagree on flock size")
    lens = constraint.lengths
    if max(lens) > horizon:
        raise ValueError("fixed prefix longer than the requested horizon")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)

    slots = [(b, t) for b in range(B) for t in range(lens[b], horizon)]

    def finish(plan: AccelerationPlan) -> OptimizeResult:
        states = rollout(state, plan, horizon)
        achieved = min(cost_fn(s) for s in states)
        return OptimizeResult(
            best_plan=plan,
            state_after_first=states[0],
            state_after_last=states[-1],
            achieved_cost=achieved,
        )

    if not slots:  # fully fixed: nothing to optimize
        return finish(constraint)

    n_slots = len(slots)
    dim = 2 * n_slots
    a_bound = limits.accel_bound
    v_clamp = a_bound  # half the decision box width

    # Per-step decode tables for the batched rollout.
    slot_cols, slot_birds, fixed_birds, fixed_vals = [], [], [], []
    for t in range(horizon):
        cols = np.array([i for i, (_, tt) in enumerate(slots) if tt == t], dtype=int)
        slot_cols.append(cols)
        slot_birds.append(np.array([slots[i][0] for i in cols], dtype=int))
        fb = np.array([b for b in range(B) if lens[b] > t], dtype=int)
        fixed_birds.append(fb)
        fixed_vals.append(
            np.stack([constraint.prefixes[b][t] for b in fb]) if fb.size else np.zeros((0, 2))
        )

    batch = getattr(cost_fn, "cost_batch", None)
    if batch is None:
        def batch(X, V):  # scalar fallback, used by tests with plain callables
            return np.array(
                [cost_fn(FlockState(positions=x, velocities=v, time=state.time))
                 for x, v in zip(X, V)]
            )

    def fitness(pos: np.ndarray) -> np.ndarray:
        return _batched_rollout_cost(
            state.positions, state.velocities, pos.reshape(len(pos), n_slots, 2),
            slot_cols, slot_birds, fixed_birds, fixed_vals, limits, batch,
        )

    p = cfg.particles
    pos = rng.uniform(-a_bound, a_bound, size=(p, dim))
    pos[0] = 0.0  # zero-acceleration completion is always in the swarm
    for offset, hint in enumerate(hints):
        if offset + 1 >= p:
            break
        coords = np.zeros(dim)
        for idx, (b, t) in enumerate(slots):
            if t < hint.shape[1]:
                coords[2 * idx: 2 * idx + 2] = hint[b, t]
        pos[offset + 1] = np.clip(coords, -a_bound, a_bound)
    vel = rng.uniform(-v_clamp, v_clamp, size=(p, dim))

    fit = fitness(pos)
    pbest_x = pos.copy()
    pbest_f = fit.copy()
    g = int(np.argmin(pbest_f))
    gbest_x = pbest_x[g].copy()
    gbest_f = float(pbest_f[g])

    stall = 0
    stall_ref = gbest_f
    for _ in range(cfg.iterations):
        r1 = rng.uniform(size=(p, dim))
        r2 = rng.uniform(size=(p, dim))
        vel = (cfg.inertia * vel
               + cfg.cognitive * r1 * (pbest_x - pos)
               + cfg.social * r2 * (gbest_x - pos))
        np.clip(vel, -v_clamp, v_clamp, out=vel)
        pos = np.clip(pos + vel, -a_bound, a_bound)
        fit = fitness(pos)
        improved = fit < pbest_f
        pbest_x[improved] = pos[improved]
        pbest_f[improved] = fit[improved]
        g = int(np.argmin(pbest_f))  # argmin takes the lowest index on ties
        if pbest_f[g] < gbest_f:
            gbest_f = float(pbest_f[g])
            gbest_x = pbest_x[g].copy()
        if cfg.stall_iterations is not None:
            if stall_ref - gbest_f > cfg.stall_tolerance * max(abs(stall_ref), 1e-12):
                stall_ref = gbest_f
                stall = 0
            else:
                stall += 1
                if stall >= cfg.stall_iterations:
                    break

    best_plan = _decode_plan(state, constraint, horizon, gbest_x, slots, limits)
    return finish(best_plan)
