import numpy as np
import pytest

from vflock.dynamics import (
    ActionLimits,
    FlockState,
    InitBox,
    clamp_action,
    clamp_actions,
    neighbors,
    restrict,
    sample_initial,
    step,
    vec2,
)


def make_state(positions, velocities, time=0):
    return FlockState(positions=np.array(positions, float),
                      velocities=np.array(velocities, float), time=time)


class TestStep:
    def test_single_bird_arithmetic(self):
        s = make_state([[0.0, 0.0]], [[1.0, 2.0]])
        s2 = step(s, np.array([[0.1, -0.2]]))
        np.testing.assert_array_equal(s2.positions, [[1.0, 2.0]])
        np.testing.assert_array_equal(s2.velocities, [[1.1, 1.8]])
        assert s2.time == 1

    def test_zero_actions_keep_velocity(self):
        s = make_state([[0, 0], [1, 1]], [[1, 0], [0, -1]])
        s2 = step(s, np.zeros((2, 2)))
        np.testing.assert_array_equal(s2.velocities, s.velocities)
        np.testing.assert_array_equal(s2.positions, s.positions + s.velocities)

    def test_constant_velocity_two_steps(self):
        s = make_state([[0, 0]], [[1, 0]])
        s = step(s, np.zeros((1, 2)))
        s = step(s, np.zeros((1, 2)))
        np.testing.assert_array_equal(s.positions, [[2.0, 0.0]])
        assert s.time == 2

    def test_dimension_mismatch(self):
        s = make_state([[0, 0]], [[1, 0]])
        with pytest.raises(ValueError):
            step(s, np.zeros((2, 2)))

    def test_non_finite_rejected(self):
        s = make_state([[0, 0]], [[1, 0]])
        with pytest.raises(ValueError):
            step(s, np.array([[np.nan, 0.0]]))

    def test_deterministic_bit_for_bit(self):
        rng = np.random.default_rng(7)
        s = make_state(rng.uniform(size=(4, 2)), rng.uniform(size=(4, 2)))
        a = rng.uniform(-0.1, 0.1, size=(4, 2))
        s1, s2 = step(s, a), step(s, a)
        assert np.array_equal(s1.positions, s2.positions)
        assert np.array_equal(s1.velocities, s2.velocities)


class TestClampAction:
    limits = ActionLimits(v_max=2.0, rho=0.5)

    def test_within_bound_unchanged(self):
        a = clamp_action(vec2(1, 0), vec2(0.2, 0), self.limits)
        np.testing.assert_allclose(a, [0.2, 0.0])

    def test_radial_rescale(self):
        a = clamp_action(vec2(1, 0), vec2(2, 0), self.limits)
        np.testing.assert_allclose(a, [0.5, 0.0])

    def test_zero_velocity_forces_zero(self):
        a = clamp_action(vec2(0, 0), vec2(5, -3), self.limits)
        np.testing.assert_array_equal(a, [0.0, 0.0])

    def test_speed_cap_enforced(self):
        limits = ActionLimits(v_max=1.0, rho=0.9)
        v = vec2(0.95, 0.0)
        a = clamp_action(v, vec2(0.8, 0.0), limits)
        assert np.linalg.norm(v + a) <= limits.v_max * (1 + 1e-12)
        assert np.linalg.norm(a) <= limits.rho * np.linalg.norm(v) * (1 + 1e-12)

    def test_random_proposals_always_feasible(self):
        rng = np.random.default_rng(123)
        limits = ActionLimits(v_max=2.0, rho=0.9)
        for _ in range(500):
            v = rng.uniform(-2, 2, size=2)
            v *= min(1.0, limits.v_max / max(np.linalg.norm(v), 1e-9))
            a = clamp_action(v, rng.uniform(-5, 5, size=2), limits)
            assert np.linalg.norm(a) <= limits.rho * np.linalg.norm(v) + 1e-12
            assert np.linalg.norm(v + a) <= limits.v_max + 1e-12

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(5)
        limits = ActionLimits()
        v = rng.uniform(-1.5, 1.5, size=(50, 2))
        a = rng.uniform(-4, 4, size=(50, 2))
        batch = clamp_actions(v, a, limits)
        for i in range(50):
            np.testing.assert_array_equal(batch[i], clamp_action(v[i], a[i], limits))

    def test_velocity_cap_after_step(self):
        rng = np.random.default_rng(99)
        limits = ActionLimits(v_max=2.0, rho=0.9)
        s = make_state(rng.uniform(0, 3, (5, 2)), rng.uniform(0.25, 0.75, (5, 2)))
        for _ in range(50):
            proposals = rng.uniform(-3, 3, size=(5, 2))
            a = clamp_actions(s.velocities, proposals, limits)
            s = step(s, a)
            speeds = np.linalg.norm(s.velocities, axis=1)
            assert np.all(speeds <= limits.v_max * (1 + 1e-12))


class TestSampleInitial:
    def test_degenerate_box(self):
        box = InitBox(pos_lo=vec2(1, 2), pos_hi=vec2(1, 2),
                      vel_lo=vec2(0.5, 0.5), vel_hi=vec2(0.5, 0.5))
        s = sample_initial(np.random.default_rng(0), 4, box)
        np.testing.assert_array_equal(s.positions, np.tile([1.0, 2.0], (4, 1)))
        np.testing.assert_array_equal(s.velocities, np.full((4, 2), 0.5))

    def test_same_seed_same_state(self):
        box = InitBox()
        s1 = sample_initial(np.random.default_rng(42), 5, box)
        s2 = sample_initial(np.random.default_rng(42), 5, box)
        assert np.array_equal(s1.positions, s2.positions)
        assert np.array_equal(s1.velocities, s2.velocities)

    def test_paper_box_bounds(self):
        s = sample_initial(np.random.default_rng(3), 5, InitBox())
        assert np.all(s.positions >= 0.0) and np.all(s.positions <= 3.0)
        assert np.all(s.velocities >= 0.25) and np.all(s.velocities <= 0.75)

    def test_invalid_box(self):
        with pytest.raises(ValueError):
            InitBox(pos_lo=vec2(1, 0), pos_hi=vec2(0, 1))


class TestNeighbors:
    def test_basic_example(self):
        s = make_state([[0, 0], [1, 0], [5, 0]], np.ones((3, 2)))
        assert neighbors(s, 0, 2) == (0, 1)

    def test_k_equals_flock(self):
        s = make_state([[0, 0], [1, 0], [5, 0]], np.ones((3, 2)))
        assert neighbors(s, 1, 3) == (0, 1, 2)

    def test_k_one_is_self(self):
        s = make_state([[0, 0], [1, 0], [5, 0]], np.ones((3, 2)))
        for i in range(3):
            assert neighbors(s, i, 1) == (i,)

    def test_tie_break_by_index(self):
        s = make_state([[0, 0], [1, 0], [-1, 0], [0, 1]], np.ones((4, 2)))
        # birds 1, 2, 3 are all at distance 1 from bird 0
        assert neighbors(s, 0, 2) == (0, 1)
        assert neighbors(s, 0, 3) == (0, 1, 2)

    def test_out_of_range_k(self):
        s = make_state([[0, 0]], [[1, 0]])
        with pytest.raises(ValueError):
            neighbors(s, 0, 0)
        with pytest.raises(ValueError):
            neighbors(s, 0, 2)

    def test_cardinality_and_self_membership(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            n = int(rng.integers(1, 9))
            s = make_state(rng.uniform(-5, 5, (n, 2)), rng.uniform(-1, 1, (n, 2)))
            i = int(rng.integers(0, n))
            k = int(rng.integers(1, n + 1))
            res = neighbors(s, i, k)
            assert len(res) == k and len(set(res)) == k
            assert i in res

    def test_translation_invariance(self):
        rng = np.random.default_rng(21)
        for _ in range(30):
            n = int(rng.integers(2, 8))
            pos = rng.uniform(-5, 5, (n, 2))
            vel = rng.uniform(-1, 1, (n, 2))
            shift = rng.uniform(-100, 100, size=2)
            s1 = make_state(pos, vel)
            s2 = make_state(pos + shift, vel)
            i = int(rng.integers(0, n))
            k = int(rng.integers(1, n + 1))
            assert neighbors(s1, i, k) == neighbors(s2, i, k)


class TestStateTypes:
    def test_immutability(self):
        s = make_state([[0, 0]], [[1, 0]])
        with pytest.raises(ValueError):
            s.positions[0, 0] = 5.0

    def test_from_birds_round_trip(self):
        s = make_state([[0, 1], [2, 3]], [[1, 0], [0, 1]], time=4)
        s2 = FlockState.from_birds(s.birds, time=4)
        assert np.array_equal(s.positions, s2.positions)
        assert np.array_equal(s.velocities, s2.velocities)
        assert s2.time == 4

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            make_state([[np.nan, 0]], [[1, 0]])

    def test_restrict_orders_by_given_indices(self):
        s = make_state([[0, 0], [1, 1], [2, 2]], [[1, 0], [0, 1], [1, 1]])
        sub = restrict(s, (2, 0))
        np.testing.assert_array_equal(sub.positions, [[2, 2], [0, 0]])

    def test_limits_validation(self):
        with pytest.raises(ValueError):
            ActionLimits(v_max=-1.0)
        with pytest.raises(ValueError):
            ActionLimits(rho=1.0)
