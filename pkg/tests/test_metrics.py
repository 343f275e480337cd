import math

import numpy as np
import pytest

from vflock.dynamics import BirdState, FlockState, vec2  # noqa: F401
from vflock.metrics import (
    AngularInterval,
    CostModel,
    UpwashParams,
    WingConfig,
    blocked_interval,
    clear_view,
    downwash_cut,
    interval_union_length,
    relative_frame,
    total_cost,
    upwash_benefit,
    upwash_measures,
    upwash_peak,
    velocity_matching,
)
from oracles import (
    clear_view_raycast,
    random_moving_flock,
    rotate_state,
    translate_state,
    union_length_grid,
    v_formation,
)


def bird(px, py, vx, vy):
    return BirdState(position=vec2(px, py), velocity=vec2(vx, vy))


def flock(positions, velocities):
    return FlockState(positions=np.array(positions, float),
                      velocities=np.array(velocities, float))


class TestRelativeFrame:
    def test_directly_ahead(self):
        h, v, front = relative_frame(bird(0, 0, 0, 1), bird(0, 3, 0, 1))
        assert h == pytest.approx(0.0)
        assert v == pytest.approx(3.0)
        assert front

    def test_purely_lateral(self):
        h, v, front = relative_frame(bird(0, 0, 0, 1), bird(2, 0, 0, 1))
        assert h == pytest.approx(2.0)
        assert v == pytest.approx(0.0)
        assert not front

    def test_behind(self):
        _, _, front = relative_frame(bird(0, 0, 1, 0), bird(-1, 0, 1, 0))
        assert not front

    def test_zero_velocity_observer_raises(self):
        with pytest.raises(ValueError):
            relative_frame(bird(0, 0, 0, 0), bird(1, 1, 1, 0))


class TestBlockedInterval:
    cfg = WingConfig(w=0.5, theta=math.pi / 4)

    def test_directly_ahead_blocks_full_cone(self):
        iv = blocked_interval(bird(0, 0, 0, 1), bird(0, 1, 0, 1), self.cfg)
        assert iv is not None
        assert iv.lo == pytest.approx(3 * math.pi / 8)
        assert iv.hi == pytest.approx(5 * math.pi / 8)
        assert iv.length / self.cfg.theta == pytest.approx(1.0)

    def test_bird_behind_never_blocks(self):
        assert blocked_interval(bird(0, 0, 0, 1), bird(0, -1, 0, 1), self.cfg) is None

    def test_far_lateral_guard_fails(self):
        # h >> w and (h - w)/v >= tan(theta)
        assert blocked_interval(bird(0, 0, 0, 1), bird(5, 1, 0, 1), self.cfg) is None

    def test_empty_clip_returns_none(self):
        # guard passes ((h - w)/v < tan theta) but the wingtip span misses the cone
        cfg = WingConfig(w=1.0, theta=math.pi / 4)
        assert blocked_interval(bird(0, 0, 0, 1), bird(1.9, 1, 0, 1), cfg) is None

    def test_left_side_blocker_mirrors_right(self):
        cfg = WingConfig(w=1.0, theta=math.pi / 4)
        right = blocked_interval(bird(0, 0, 0, 1), bird(0.8, 1.5, 0, 1), cfg)
        left = blocked_interval(bird(0, 0, 0, 1), bird(-0.8, 1.5, 0, 1), cfg)
        assert right is not None and left is not None
        assert right.length == pytest.approx(left.length, abs=1e-12)
        # mirrored about the heading (pi/2)
        assert left.lo == pytest.approx(math.pi - right.hi, abs=1e-12)


class TestIntervalUnion:
    def test_disjoint_and_overlapping(self):
        ivs = [AngularInterval(0.0, 1.0), AngularInterval(0.5, 1.5),
               AngularInterval(3.0, 3.25)]
        assert interval_union_length(ivs) == pytest.approx(1.75)

    def test_empty(self):
        assert interval_union_length([]) == 0.0

    def test_against_grid_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(25):
            n = int(rng.integers(1, 10))
            los = rng.uniform(0.0, math.pi, size=n)
            his = los + rng.uniform(0.0, 0.8, size=n)
            ivs = [AngularInterval(float(a), float(b)) for a, b in zip(los, his)]
            swept = interval_union_length(ivs)
            grid = union_length_grid(ivs, 0.0, math.pi + 1.0, bins=200_000)
            resolution = (math.pi + 1.0) / 200_000
            assert abs(swept - grid) <= resolution * (2 * n + 2)


class TestClearView:
    def test_single_bird(self):
        s = flock([[0, 0]], [[0, 1]])
        assert clear_view(s, WingConfig()) == 0.0

    def test_fully_blocked_pair(self):
        cfg = WingConfig(w=0.5, theta=math.pi / 4)
        s = flock([[0, 0], [0, 1]], [[0, 1], [0, 1]])
        assert clear_view(s, cfg) == pytest.approx(1.0)

    def test_v_formation_unobstructed(self):
        s = v_formation(5)
        assert clear_view(s, WingConfig()) == 0.0

    def test_zero_velocity_observer_contributes_zero(self):
        cfg = WingConfig(w=0.5, theta=math.pi / 4)
        s = flock([[0, 0], [0, 1]], [[0, 0], [0, 1]])
        assert clear_view(s, cfg) == 0.0

    def test_zero_velocity_blocker_ignored(self):
        cfg = WingConfig(w=0.5, theta=math.pi / 4)
        s = flock([[0, 0], [0, 1]], [[0, 1], [0, 0]])
        assert clear_view(s, cfg) == 0.0

    def test_matches_blocked_interval_on_pairs(self):
        cfg = WingConfig()
        rng = np.random.default_rng(9)
        for _ in range(50):
            s = random_moving_flock(rng, 2)
            iv01 = blocked_interval(s.bird(0), s.bird(1), cfg)
            iv10 = blocked_interval(s.bird(1), s.bird(0), cfg)
            expected = sum(iv.length / cfg.theta for iv in (iv01, iv10) if iv)
            assert clear_view(s, cfg) == pytest.approx(expected, abs=1e-12)

    def test_against_raycast_oracle(self):
        cfg = WingConfig()
        rng = np.random.default_rng(2027)
        for _ in range(10):
            s = random_moving_flock(rng, int(rng.integers(3, 6)))
            assert clear_view(s, cfg) == pytest.approx(
                clear_view_raycast(s, cfg, rays=100_000), abs=2e-3
            )


class TestVelocityMatching:
    def test_identical_velocities(self):
        s = flock([[0, 0], [1, 0], [2, 0]], [[0.5, 0.5]] * 3)
        assert velocity_matching(s) == 0.0

    def test_orthogonal_unit_pair(self):
        s = flock([[0, 0], [1, 0]], [[1, 0], [0, 1]])
        assert velocity_matching(s) == pytest.approx(0.5, abs=1e-12)

    def test_rotation_invariance(self):
        rng = np.random.default_rng(31)
        for _ in range(20):
            s = random_moving_flock(rng, 4)
            r = rotate_state(s, rng.uniform(0, 2 * np.pi))
            assert velocity_matching(r) == pytest.approx(velocity_matching(s),
                                                         abs=1e-10)

    def test_zero_iff_all_equal(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            s = random_moving_flock(rng, 3)
            vm = velocity_matching(s)
            all_equal = np.allclose(s.velocities, s.velocities[0])
            assert (vm < 1e-12) == all_equal

    def test_zero_pair_contributes_zero(self):
        s = flock([[0, 0], [1, 0]], [[0, 0], [0, 0]])
        assert velocity_matching(s) == 0.0


class TestUpwash:
    cfg = WingConfig(w=1.0)
    up = UpwashParams.for_wing(1.0)

    def test_single_bird(self):
        s = flock([[0, 0]], [[0, 1]])
        assert upwash_measures(s, self.cfg, self.up)[0] == 0.0
        assert upwash_benefit(s, self.cfg, self.up) == 1.0

    def test_follower_at_peak_matches_scalar_formula(self):
        peak_h, peak_v = upwash_peak(1.0)
        # leader ahead at the exact Gaussian mean in the observer's frame
        s = flock([[0, 0], [peak_h, peak_v]], [[0, 1], [0, 1]])
        um = upwash_measures(s, self.cfg, self.up)
        expected = math.erf(2 * math.sqrt(2) * (peak_h - downwash_cut(1.0)))
        assert um[0] == pytest.approx(expected, abs=1e-12)  # G = 1 at the mean
        assert um[1] == 0.0

    def test_tandem_pair_near_optimal_benefit(self):
        peak_h, peak_v = upwash_peak(1.0)
        s = flock([[0, 0], [peak_h, peak_v]], [[0, 1], [0, 1]])
        assert upwash_benefit(s, self.cfg, self.up) == pytest.approx(1.0, abs=2e-3)

    def test_downwash_is_floored_at_zero(self):
        # follower directly behind: negative contribution, clamped to um = 0
        s = flock([[0, 0], [0, 1]], [[0, 1], [0, 1]])
        um = upwash_measures(s, self.cfg, self.up)
        assert um[0] == 0.0
        assert upwash_benefit(s, self.cfg, self.up) == 2.0

    def test_um_always_in_unit_interval(self):
        rng = np.random.default_rng(17)
        for _ in range(50):
            s = random_moving_flock(rng, int(rng.integers(2, 7)))
            um = upwash_measures(s, self.cfg, self.up)
            assert np.all(um >= 0.0) and np.all(um <= 1.0)

    def test_zero_velocity_pair_no_interaction(self):
        s = flock([[0, 0], [1, 1]], [[0, 0], [0, 1]])
        um = upwash_measures(s, self.cfg, self.up)
        assert um[0] == 0.0 and um[1] == 0.0


class TestTotalCost:
    cfg = WingConfig()
    up = UpwashParams.for_wing(1.0)

    def test_single_bird_exactly_zero(self):
        s = flock([[3, 4]], [[1, 1]])
        bd = total_cost(s, self.cfg, self.up)
        assert bd.cv == 0.0 and bd.vm == 0.0 and bd.ub == 1.0
        assert bd.total == 0.0

    def test_breakdown_consistency(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            s = random_moving_flock(rng, 4)
            bd = total_cost(s, self.cfg, self.up)
            assert bd.total == pytest.approx(
                bd.cv**2 + bd.vm**2 + (bd.ub - 1.0) ** 2, abs=1e-14
            )
            assert bd.total >= 0.0

    def test_v_formation_classifies_under_phi(self):
        bd = total_cost(v_formation(5), self.cfg, self.up)
        assert bd.cv == 0.0
        assert bd.vm == 0.0
        assert bd.total <= 0.1

    def test_translation_invariance(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            s = random_moving_flock(rng, 4)
            t = translate_state(s, rng.uniform(-50, 50, size=2))
            assert total_cost(t, self.cfg, self.up).total == pytest.approx(
                total_cost(s, self.cfg, self.up).total, abs=1e-10
            )

    def test_rotation_invariance(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            s = random_moving_flock(rng, 4)
            r = rotate_state(s, rng.uniform(0, 2 * np.pi))
            assert total_cost(r, self.cfg, self.up).total == pytest.approx(
                total_cost(s, self.cfg, self.up).total, abs=1e-9
            )


class TestCostModel:
    def test_reference_path_matches_public_ops(self):
        rng = np.random.default_rng(14)
        model = CostModel(accelerated=False)
        for _ in range(10):
            s = random_moving_flock(rng, 5)
            bd = total_cost(s, model.wing, model.upwash)
            assert model(s) == bd.total
            got = model.breakdown(s)
            assert (got.cv, got.vm, got.ub, got.total) == (bd.cv, bd.vm, bd.ub, bd.total)

    def test_batch_equals_scalar_loop(self):
        rng = np.random.default_rng(15)
        model = CostModel()
        states = [random_moving_flock(rng, 4) for _ in range(16)]
        X = np.stack([s.positions for s in states])
        V = np.stack([s.velocities for s in states])
        batched = model.cost_batch(X, V)
        for idx, s in enumerate(states):
            assert batched[idx] == model(s)

    def test_accelerated_path_agrees_with_reference(self):
        fast = CostModel()
        if not fast.accelerated:
            pytest.skip("numba not available")
        slow = CostModel(accelerated=False)
        rng = np.random.default_rng(16)
        for n_birds in (1, 2, 5, 7):
            for _ in range(10):
                s = random_moving_flock(rng, n_birds)
                assert fast(s) == pytest.approx(slow(s), rel=1e-12, abs=1e-13)
        # conventions for zero-velocity birds carry over to the kernel
        s = FlockState(positions=np.array([[0.0, 0], [0, 1], [1, 0.5]]),
                       velocities=np.array([[0.0, 0], [0, 1], [0.3, 0.1]]))
        assert fast(s) == pytest.approx(slow(s), rel=1e-12, abs=1e-13)

    def test_invalid_covariance_rejected(self):
        with pytest.raises(ValueError):
            UpwashParams(mu1=np.zeros(2), mu2=np.zeros(2),
                         sigma1=np.array([[1.0, 2.0], [2.0, 1.0]]),
                         sigma2=np.eye(2))
