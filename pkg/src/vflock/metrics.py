"""Flock fitness: clear view, velocity matching, upwash benefit, and total cost.

The total cost of a state is the sum of squared distances of three metrics
from their optima (clear view 0, velocity matching 0, upwash benefit 1):

    J(s) = CV(s)^2 + VM(s)^2 + (UB(s) - 1)^2

Geometry conventions. All pairwise terms live in the observer's frame: the
along-heading component of ``x_j - x_i`` is ``fwd`` (positive ahead, so
``front`` means ``fwd > 0``) and the lateral component ``lat`` is signed,
positive toward the observer's right. View-blocking angles are measured from
the observer's right-lateral axis, so the forward cone of angle ``theta``
spans ``[(pi - theta)/2, (pi + theta)/2]`` and a front bird's wingtips land
in ``(0, pi)`` via the two-argument arctangent. Keeping the lateral sign
(rather than folding onto one side) makes unions of several blockers match
true ray-cast geometry.

Birds with zero velocity have no heading: they neither block views nor
exchange upwash, and a pair of zero velocities contributes nothing to
velocity matching.

Everything is pure; the heavy paths are vectorized over a batch of states so
optimizers can evaluate whole particle populations at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple, Optional

import numpy as np
from scipy.special import erf

from . import _kernels
from .dynamics import BirdState, FlockState

_QUARTER_PI = math.pi / 4


@dataclass(frozen=True)
class WingConfig:
    """Wing span ``w`` (length units) and forward view-cone angle ``theta``."""

    w: float = 1.0
    theta: float = _QUARTER_PI

    def __post_init__(self) -> None:
        if not (self.w > 0):
            raise ValueError("wing span must be positive")
        if not (0 < self.theta < math.pi):
            raise ValueError("view-cone angle must lie in (0, pi)")

    @property
    def cone_lo(self) -> float:
        return (math.pi - self.theta) / 2

    @property
    def cone_hi(self) -> float:
        return (math.pi + self.theta) / 2


def upwash_peak(w: float) -> tuple[float, float]:
    """Location of maximum trailing upwash, ((12 + pi) w / 16, 1)."""
    return ((12 + math.pi) * w / 16, 1.0)


def downwash_cut(w: float) -> float:
    """Lateral distance (4 - pi) w / 8 separating upwash from downwash."""
    return (4 - math.pi) * w / 8


@dataclass(frozen=True)
class UpwashParams:
    """Gaussian means and covariances of the upwash/downwash model.

    ``mu1``/``sigma1`` shape the trailing-upwash lobe behind a wingtip,
    ``mu2``/``sigma2`` the downwash region directly behind the bird. Both
    covariances must be symmetric positive-definite.
    """

    mu1: np.ndarray
    mu2: np.ndarray
    sigma1: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self) -> None:
        for name, shape in (("mu1", (2,)), ("mu2", (2,)),
                            ("sigma1", (2, 2)), ("sigma2", (2, 2))):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise ValueError(f"{name} must have shape {shape}")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        for name in ("sigma1", "sigma2"):
            sig = getattr(self, name)
            if not np.allclose(sig, sig.T):
                raise ValueError(f"{name} must be symmetric")
            try:
                np.linalg.cholesky(sig)
            except np.linalg.LinAlgError:
                raise ValueError(f"{name} must be positive-definite") from None

    @classmethod
    def for_wing(cls, w: float = 1.0) -> "UpwashParams":
        """Defaults: peak at the standard upwash offset, identity covariances."""
        return cls(mu1=np.array(upwash_peak(w)), mu2=np.zeros(2),
                   sigma1=np.eye(2), sigma2=np.eye(2))


class AngularInterval(NamedTuple):
    """Closed angle interval [lo, hi] in radians, lo <= hi."""

    lo: float
    hi: float

    @property
    def length(self) -> float:
        return self.hi - self.lo


@dataclass(frozen=True)
class CostBreakdown:
    """Metric values plus the sum-of-squares total."""

    cv: float
    vm: float
    ub: float
    total: float


def relative_frame(i: BirdState, j: BirdState) -> tuple[float, float, bool]:
    """Decompose ``x_j - x_i`` in bird ``i``'s heading frame.

    Returns ``(h, v, front)``: lateral magnitude ``h >= 0`` perpendicular to
    ``i``'s velocity, along-heading component ``v`` (positive ahead), and
    ``front = (v > 0)``. Raises if ``i`` has zero velocity (no heading).
    """
    speed = float(np.linalg.norm(i.velocity))
    if speed == 0.0:
        raise ValueError("observer has zero velocity; heading undefined")
    u = np.asarray(i.velocity, float) / speed
    rel = np.asarray(j.position, float) - np.asarray(i.position, float)
    fwd = float(rel @ u)
    lat = float(rel[0] * u[1] - rel[1] * u[0])  # projection on right-lateral axis
    return abs(lat), fwd, fwd > 0.0


def _signed_frame(i: BirdState, j: BirdState) -> tuple[float, float]:
    speed = float(np.linalg.norm(i.velocity))
    if speed == 0.0:
        raise ValueError("observer has zero velocity; heading undefined")
    u = np.asarray(i.velocity, float) / speed
    rel = np.asarray(j.position, float) - np.asarray(i.position, float)
    return float(rel[0] * u[1] - rel[1] * u[0]), float(rel @ u)


def blocked_interval(
    i: BirdState, j: BirdState, cfg: WingConfig
) -> Optional[AngularInterval]:
    """Angles of bird ``i``'s view cone blocked by bird ``j``, if any.

    ``j`` is modeled as a segment of half-width ``w`` perpendicular to the
    observer's heading. The blocked set is the view cone intersected with
    the wingtip-to-wingtip angular span; ``None`` when the guard fails or
    the intersection is empty.
    """
    lat, fwd = _signed_frame(i, j)
    if not fwd > 0.0:  # only front birds can block the forward cone
        return None
    h = abs(lat)
    if not (h < cfg.w or (h - cfg.w) < math.tan(cfg.theta) * fwd):
        return None
    lo = max(cfg.cone_lo, math.atan2(fwd, lat + cfg.w))
    hi = min(cfg.cone_hi, math.atan2(fwd, lat - cfg.w))
    if lo >= hi:
        return None
    return AngularInterval(lo, hi)


def interval_union_length(intervals) -> float:
    """Total measure of a union of intervals, by sort-and-sweep."""
    ivs = sorted(intervals, key=lambda iv: iv[0])
    total = 0.0
    cur_end = -math.inf
    for lo, hi in ivs:
        if hi <= cur_end:
            continue
        total += hi - max(lo, cur_end)
        cur_end = hi
    return total


# ---------------------------------------------------------------------------
# Batched cores. X and V have shape (n, B, 2); results have shape (n,).
# These run inside the optimizer's fitness loop, so they stick to fused
# elementwise arithmetic and avoid large intermediates.


@lru_cache(maxsize=16)
def _upper_pairs(n_birds: int):
    iu, ju = np.triu_indices(n_birds, k=1)
    return iu, ju


def _pair_frames(X: np.ndarray, V: np.ndarray):
    """Observer-frame decomposition for every ordered pair.

    Returns ``(fwd, lat, vnorm, moving)`` where ``fwd[n, i, j]`` and
    ``lat[n, i, j]`` are bird j's coordinates in bird i's heading frame.
    Rows of non-moving observers hold garbage and must be masked by callers.
    """
    vx, vy = V[..., 0], V[..., 1]
    vnorm = np.sqrt(vx * vx + vy * vy)
    moving = vnorm > 0.0
    inv = 1.0 / np.where(moving, vnorm, 1.0)
    ux = (vx * inv)[:, :, None]
    uy = (vy * inv)[:, :, None]
    dx = X[:, None, :, 0] - X[:, :, None, 0]  # x_j - x_i
    dy = X[:, None, :, 1] - X[:, :, None, 1]
    fwd = dx * ux + dy * uy
    lat = dx * uy - dy * ux  # projection on the observer's right-lateral axis
    return fwd, lat, vnorm, moving


def _clear_view_batch(X: np.ndarray, V: np.ndarray, cfg: WingConfig,
                      frames=None) -> np.ndarray:
    fwd, lat, vnorm, moving = frames if frames is not None else _pair_frames(X, V)
    n, B = vnorm.shape
    w, theta = cfg.w, cfg.theta
    cone_lo, cone_hi = cfg.cone_lo, cfg.cone_hi

    absl = np.abs(lat)
    ok = (fwd > 0.0) & moving[:, :, None] & moving[:, None, :]
    ok &= (absl < w) | (absl - w < math.tan(theta) * fwd)
    lo = np.arctan2(fwd, lat + w)
    hi = np.arctan2(fwd, lat - w)
    np.maximum(lo, cone_lo, out=lo)
    np.minimum(hi, cone_hi, out=hi)
    ok &= lo < hi
    # Park rejected pairs as zero-length intervals at the cone's end so the
    # sweep below can run without ragged structures.
    los = np.where(ok, lo, cone_hi)
    his = np.where(ok, hi, cone_hi)
    order = np.argsort(los, axis=-1, kind="stable")
    los = np.take_along_axis(los, order, axis=-1)
    his = np.take_along_axis(his, order, axis=-1)

    covered = np.zeros((n, B))
    cur_end = np.full((n, B), -np.inf)
    for s in range(B):
        l, h = los[..., s], his[..., s]
        np.maximum(l, cur_end, out=l)
        covered += np.maximum(h - l, 0.0)
        np.maximum(cur_end, h, out=cur_end)
    return covered.sum(axis=1) / theta


def _velocity_matching_batch(V: np.ndarray, vnorm=None) -> np.ndarray:
    vx, vy = V[..., 0], V[..., 1]
    if vnorm is None:
        vnorm = np.sqrt(vx * vx + vy * vy)
    iu, ju = _upper_pairs(V.shape[1])
    dvx = vx[:, iu] - vx[:, ju]
    dvy = vy[:, iu] - vy[:, ju]
    dn2 = dvx * dvx + dvy * dvy
    denom = vnorm[:, iu] + vnorm[:, ju]
    pos = denom > 0.0
    ratio2 = np.where(pos, dn2 / np.where(pos, denom * denom, 1.0), 0.0)
    return np.sum(ratio2, axis=-1)


def _upwash_measures_batch(X: np.ndarray, V: np.ndarray, cfg: WingConfig,
                           up: UpwashParams, inv1=None, inv2=None,
                           frames=None) -> np.ndarray:
    """Per-bird upwash measure um in [0, 1], shape (n, B)."""
    fwd, lat, vnorm, moving = frames if frames is not None else _pair_frames(X, V)
    if inv1 is None:
        inv1 = np.linalg.inv(up.sigma1)
    if inv2 is None:
        inv2 = np.linalg.inv(up.sigma2)

    interacting = (fwd > 0.0) & moving[:, :, None] & moving[:, None, :]
    h = np.abs(lat)
    cut = downwash_cut(cfg.w)
    upper = interacting & (h >= cut)
    lower = interacting & (h < cut)
    total = np.zeros(h.shape)

    def gauss(mu, inv):
        dh = h - mu[0]
        dv = fwd - mu[1]
        q = inv[0, 0] * dh * dh + 2.0 * inv[0, 1] * dh * dv + inv[1, 1] * dv * dv
        return np.exp(-0.5 * q)

    if upper.any() or lower.any():
        smooth = erf(2.0 * math.sqrt(2.0) * (h - cut))
        if upper.any():
            vx, vy = V[..., 0], V[..., 1]
            dots = vx[:, :, None] * vx[:, None, :] + vy[:, :, None] * vy[:, None, :]
            denom = vnorm[:, :, None] * vnorm[:, None, :]
            align = dots / np.where(denom > 0.0, denom, 1.0)
            total += np.where(upper, align * smooth * gauss(up.mu1, inv1), 0.0)
        if lower.any():
            total += np.where(lower, smooth * gauss(up.mu2, inv2), 0.0)
    return np.clip(total.sum(axis=2), 0.0, 1.0)


def _components_batch(X, V, cfg, up, inv1=None, inv2=None):
    frames = _pair_frames(X, V)
    cv = _clear_view_batch(X, V, cfg, frames=frames)
    vm = _velocity_matching_batch(V, vnorm=frames[2])
    um = _upwash_measures_batch(X, V, cfg, up, inv1, inv2, frames=frames)
    ub = np.sum(1.0 - um, axis=1)
    return cv, vm, ub


# ---------------------------------------------------------------------------
# Public per-state operations.


def clear_view(state: FlockState, cfg: WingConfig) -> float:
    """Sum over birds of the blocked fraction of each forward view cone."""
    return float(
        _clear_view_batch(state.positions[None], state.velocities[None], cfg)[0]
    )


def velocity_matching(state: FlockState) -> float:
    """Sum over pairs of squared normalized velocity differences."""
    return float(_velocity_matching_batch(state.velocities[None])[0])


def upwash_measures(state: FlockState, cfg: WingConfig, up: UpwashParams) -> np.ndarray:
    """Per-bird upwash measure um_i, clamped into [0, 1]."""
    return _upwash_measures_batch(
        state.positions[None], state.velocities[None], cfg, up
    )[0]


def upwash_benefit(state: FlockState, cfg: WingConfig, up: UpwashParams) -> float:
    """Flock upwash-benefit metric, sum over birds of (1 - um_i)."""
    return float(np.sum(1.0 - upwash_measures(state, cfg, up)))


def total_cost(state: FlockState, cfg: WingConfig, up: UpwashParams) -> CostBreakdown:
    """Evaluate all metrics and the sum-of-squares total for one state."""
    cv, vm, ub = _components_batch(
        state.positions[None], state.velocities[None], cfg, up
    )
    cv, vm, ub = float(cv[0]), float(vm[0]), float(ub[0])
    return CostBreakdown(cv=cv, vm=vm, ub=ub,
                         total=cv * cv + vm * vm + (ub - 1.0) ** 2)


class CostModel:
    """Reusable evaluator binding wing geometry and upwash parameters.

    Precomputes covariance inverses once so repeated batch evaluations stay
    cheap. ``cost_batch`` is the vectorized entry point used by optimizers;
    calling the model on a single state returns its scalar total cost via
    the same code path, so scalar and batched results agree bit for bit.

    When numba is available the total-cost path runs a fused JIT kernel
    (``accelerated=None`` means auto-detect). The kernel mirrors the numpy
    reference exactly up to last-ulp rounding of transcendentals;
    ``breakdown`` always reports components from the reference path.
    """

    def __init__(self, wing: WingConfig | None = None,
                 upwash: UpwashParams | None = None,
                 accelerated: bool | None = None):
        self.wing = wing if wing is not None else WingConfig()
        self.upwash = (upwash if upwash is not None
                       else UpwashParams.for_wing(self.wing.w))
        self._inv1 = np.linalg.inv(self.upwash.sigma1)
        self._inv2 = np.linalg.inv(self.upwash.sigma2)
        if accelerated is None:
            accelerated = _kernels.HAVE_NUMBA
        elif accelerated and not _kernels.HAVE_NUMBA:
            raise ValueError("numba is not available for the accelerated path")
        self.accelerated = accelerated
        if accelerated:
            w = self.wing
            up = self.upwash
            self._kernel_args = (
                w.w, w.theta, math.tan(w.theta), w.cone_lo, w.cone_hi,
                downwash_cut(w.w),
                up.mu1[0], up.mu1[1],
                self._inv1[0, 0], self._inv1[0, 1], self._inv1[1, 1],
                up.mu2[0], up.mu2[1],
                self._inv2[0, 0], self._inv2[0, 1], self._inv2[1, 1],
            )

    def components_batch(self, X: np.ndarray, V: np.ndarray):
        return _components_batch(X, V, self.wing, self.upwash,
                                 self._inv1, self._inv2)

    def cost_batch(self, X: np.ndarray, V: np.ndarray) -> np.ndarray:
        if self.accelerated:
            return _kernels.total_cost_batch(
                np.ascontiguousarray(X, dtype=float),
                np.ascontiguousarray(V, dtype=float),
                *self._kernel_args,
            )
        cv, vm, ub = self.components_batch(X, V)
        return cv * cv + vm * vm + (ub - 1.0) ** 2

    def breakdown(self, state: FlockState) -> CostBreakdown:
        cv, vm, ub = self.components_batch(
            state.positions[None], state.velocities[None]
        )
        cv, vm, ub = float(cv[0]), float(vm[0]), float(ub[0])
        return CostBreakdown(cv=cv, vm=vm, ub=ub,
                             total=cv * cv + vm * vm + (ub - 1.0) ** 2)

    def __call__(self, state: FlockState) -> float:
        return float(
            self.cost_batch(state.positions[None], state.velocities[None])[0]
        )
