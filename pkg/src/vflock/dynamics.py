"""Flock state, discrete-time dynamics, action constraints, and neighbor queries.

Each bird carries a 2D position and a 2D velocity. Per time step every bird
picks a 2D acceleration ``a``; velocities update as ``v' = v + a`` while
positions advance with the *old* velocity, ``x' = x + v``. Accelerations are
constrained by ``|a| <= rho * |v|`` and the resulting speed by
``|v + a| <= v_max``; :func:`clamp_action` projects arbitrary proposals into
that feasible set.

All functions here are pure: state values are immutable once constructed and
randomness enters only through explicitly passed generators.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt

Vec2 = npt.NDArray[np.float64]  # shape (2,)


def vec2(x: float, y: float) -> Vec2:
    """Build a 2D float vector."""
    return np.array([x, y], dtype=float)


def _frozen_array(values, shape=None) -> np.ndarray:
    out = np.array(values, dtype=float)
    if shape is not None and out.shape != shape:
        raise ValueError(f"expected array of shape {shape}, got {out.shape}")
    if not np.all(np.isfinite(out)):
        raise ValueError("array contains non-finite values")
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class ActionLimits:
    """Speed cap and relative acceleration bound.

    ``v_max`` bounds every bird's speed; a proposed acceleration is kept
    within ``rho * |v|`` of the current velocity. Defaults are chosen so the
    standard initial-velocity box is feasible and turning stays agile; both
    are configurable.
    """

    v_max: float = 2.0
    rho: float = 0.9

    def __post_init__(self) -> None:
        if not (self.v_max > 0):
            raise ValueError("v_max must be positive")
        if not (0 < self.rho < 1):
            raise ValueError("rho must lie in (0, 1)")

    @property
    def accel_bound(self) -> float:
        """Largest acceleration magnitude any bird may ever use."""
        return self.rho * self.v_max


@dataclass(frozen=True)
class BirdState:
    """Position and velocity of a single bird."""

    position: Vec2
    velocity: Vec2


@dataclass(frozen=True)
class FlockState:
    """Positions and velocities of all birds at one time step.

    Bird identity is the row index; the ordering is stable across a run.
    Arrays are copied on construction and frozen read-only.
    """

    positions: np.ndarray  # (B, 2)
    velocities: np.ndarray  # (B, 2)
    time: int = 0

    def __post_init__(self) -> None:
        pos = np.atleast_2d(np.asarray(self.positions, dtype=float))
        vel = np.atleast_2d(np.asarray(self.velocities, dtype=float))
        if pos.ndim != 2 or pos.shape[1] != 2:
            raise ValueError(f"positions must have shape (B, 2), got {pos.shape}")
        if vel.shape != pos.shape:
            raise ValueError("positions and velocities must have matching shapes")
        if pos.shape[0] < 1:
            raise ValueError("flock needs at least one bird")
        object.__setattr__(self, "positions", _frozen_array(pos))
        object.__setattr__(self, "velocities", _frozen_array(vel))
        if self.time < 0:
            raise ValueError("time must be nonnegative")

    @property
    def size(self) -> int:
        return self.positions.shape[0]

    @property
    def birds(self) -> tuple[BirdState, ...]:
        return tuple(
            BirdState(self.positions[i], self.velocities[i]) for i in range(self.size)
        )

    def bird(self, i: int) -> BirdState:
        return BirdState(self.positions[i], self.velocities[i])

    @classmethod
    def from_birds(cls, birds, time: int = 0) -> "FlockState":
        birds = list(birds)
        return cls(
            positions=np.array([b.position for b in birds], dtype=float),
            velocities=np.array([b.velocity for b in birds], dtype=float),
            time=time,
        )


@dataclass(frozen=True)
class InitBox:
    """Componentwise bounds for uniform initial positions and velocities."""

    pos_lo: Vec2 = field(default_factory=lambda: vec2(0.0, 0.0))
    pos_hi: Vec2 = field(default_factory=lambda: vec2(3.0, 3.0))
    vel_lo: Vec2 = field(default_factory=lambda: vec2(0.25, 0.25))
    vel_hi: Vec2 = field(default_factory=lambda: vec2(0.75, 0.75))

    def __post_init__(self) -> None:
        for name in ("pos_lo", "pos_hi", "vel_lo", "vel_hi"):
            object.__setattr__(self, name, _frozen_array(getattr(self, name), (2,)))
        if np.any(self.pos_lo > self.pos_hi) or np.any(self.vel_lo > self.vel_hi):
            raise ValueError("box bounds must satisfy lo <= hi componentwise")


def clamp_action(velocity: Vec2, proposal: Vec2, limits: ActionLimits) -> Vec2:
    """Project a proposed acceleration into the feasible set for ``velocity``.

    First rescales radially so ``|a| <= rho * |v|``, then shrinks ``a``
    further (toward zero) until ``|v + a| <= v_max``. Total on finite inputs;
    a zero velocity forces a zero acceleration.
    """
    v = np.asarray(velocity, dtype=float)
    a = np.asarray(proposal, dtype=float)
    return clamp_actions(v[None, :], a[None, :], limits)[0]


def clamp_actions(
    velocities: np.ndarray, proposals: np.ndarray, limits: ActionLimits
) -> np.ndarray:
    """Vectorized :func:`clamp_action` over arrays of shape ``(..., 2)``."""
    v = np.asarray(velocities, dtype=float)
    a = np.asarray(proposals, dtype=float)
    if v.shape != a.shape:
        raise ValueError("velocities and proposals must share a shape")

    vnorm = np.sqrt(np.sum(v * v, axis=-1))
    anorm = np.sqrt(np.sum(a * a, axis=-1))
    bound = limits.rho * vnorm
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(anorm > bound, bound / np.where(anorm > 0, anorm, 1.0), 1.0)
    out = a * scale[..., None]

    # Shrink toward zero until |v + a| <= v_max: largest s in [0, 1] with
    # |v + s*a| = v_max, the positive root of a quadratic in s.
    new_v = v + out
    over = np.sum(new_v * new_v, axis=-1) > limits.v_max**2
    if np.any(over):
        c2 = np.sum(out * out, axis=-1)
        c1 = np.sum(v * out, axis=-1)
        c0 = vnorm * vnorm - limits.v_max**2
        disc = np.maximum(c1 * c1 - c2 * c0, 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (-c1 + np.sqrt(disc)) / np.where(c2 > 0, c2, 1.0)
        s = np.clip(s, 0.0, 1.0)
        out = np.where(over[..., None], out * s[..., None], out)
    return out


def step(state: FlockState, actions: np.ndarray) -> FlockState:
    """Advance the flock one step: ``v' = v + a`` and ``x' = x + v`` (old v)."""
    a = np.asarray(actions, dtype=float)
    if a.shape != (state.size, 2):
        raise ValueError(f"actions must have shape ({state.size}, 2), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("actions contain non-finite values")
    return FlockState(
        positions=state.positions + state.velocities,
        velocities=state.velocities + a,
        time=state.time + 1,
    )


def sample_initial(rng: np.random.Generator, n_birds: int, box: InitBox) -> FlockState:
    """Sample positions and velocities i.i.d. uniformly inside ``box``."""
    if n_birds < 1:
        raise ValueError("need at least one bird")
    positions = rng.uniform(box.pos_lo, box.pos_hi, size=(n_birds, 2))
    velocities = rng.uniform(box.vel_lo, box.vel_hi, size=(n_birds, 2))
    return FlockState(positions=positions, velocities=velocities, time=0)


def neighbors(state: FlockState, i: int, k: int) -> tuple[int, ...]:
    """Indices of the ``k`` birds nearest to bird ``i`` (including ``i``).

    Distance is Euclidean on positions; ties are broken by ascending index.
    The result is returned sorted by index.
    """
    if not 0 <= i < state.size:
        raise IndexError(f"bird index {i} out of range")
    if not 1 <= k <= state.size:
        raise ValueError(f"k must lie in [1, {state.size}], got {k}")
    deltas = state.positions - state.positions[i]
    dist = np.sqrt(np.sum(deltas * deltas, axis=-1))
    order = np.argsort(dist, kind="stable")  # stable sort = index tie-break
    return tuple(sorted(int(b) for b in order[:k]))


def restrict(state: FlockState, indices) -> FlockState:
    """Sub-flock state holding only ``indices``, in the given order."""
    idx = list(indices)
    if len(idx) == 0:
        raise ValueError("cannot restrict to an empty set of birds")
    return FlockState(
        positions=state.positions[idx],
        velocities=state.velocities[idx],
        time=state.time,
    )
