import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lidar_bao.ba_core import (
    BAConfig,
    LandmarkView,
    MomentAccumulator,
    Observation,
    SlidingWindow,
    WindowProblem,
    apply_increment,
    continuity_jacobian,
    continuity_residual,
    covariance_from_moments,
    edge_residual,
    grouped_moments,
    huber,
    landmark_covariance,
    marginalize_scan,
    optimize_window,
    pair_jacobian,
    pair_residual,
    plane_residual,
    residual_jacobian,
    retract,
    scan_moments,
    velocity_residual,
    world_points,
)
from lidar_bao.feature_extract import Category
from lidar_bao.geom import RigidTransform, exp_so3
from lidar_bao.motion_model import MotionState, predict_next_state
from lidar_bao.synthetic import ConstantVelocityTrajectory

from conftest import random_state

CUBE = np.array([[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)])


def rel_fro(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def raw_from_world(state: MotionState, world: np.ndarray, tau: np.ndarray) -> np.ndarray:
    """Invert world_points: sensor-frame points that map onto ``world``."""
    q = (world - state.position) @ state.rotation
    q = q - tau[:, None] * state.linear_velocity
    return np.einsum("nij,nj->ni", np.array([exp_so3(-t * state.angular_velocity) for t in tau]), q)


def random_cloud(rng, n, kind="any"):
    p = rng.normal(size=(n, 3)) * rng.uniform(0.1, 3.0, size=3) + rng.normal(size=3) * 5
    if kind == "plane":
        p[:, 2] = 0.3 * p[:, 0] - 0.2 * p[:, 1] + 1.0
    elif kind == "line":
        s = rng.normal(size=n)
        p = np.outer(s, [1.0, 2.0, -0.5]) + [1, 2, 3]
    return p


class SyntheticWindow:
    """Scans from a constant-velocity trajectory observing two planes and an edge."""

    def __init__(self, n_scans=4, period=0.1, seed=0, per_scan=30):
        rng = np.random.default_rng(seed)
        self.traj = ConstantVelocityTrajectory(RigidTransform(exp_so3([0, 0, 0.2]), [0, 0, 1.5]),
                                               np.array([2.0, 0.3, 0.0]), np.array([0.0, 0.05, 0.3]))
        self.states = [self.traj.state(k * period) for k in range(n_scans)]
        floor = lambda n: np.column_stack([rng.uniform(-3, 6, n), rng.uniform(-3, 3, n), np.zeros(n)])
        wall = lambda n: np.column_stack([rng.uniform(-3, 6, n), np.full(n, 4.0), rng.uniform(0, 3, n)])
        pole = lambda n: np.column_stack([np.full(n, 3.0), np.full(n, -2.0), rng.uniform(0, 3, n)])
        self.landmarks = []
        for lid, (cat, gen) in enumerate([(Category.PLANE, floor), (Category.PLANE, wall), (Category.EDGE, pole)]):
            pts = {}
            for k, s in enumerate(self.states):
                tau = np.sort(rng.uniform(0, period, per_scan))
                pts[k] = (raw_from_world(s, gen(per_scan), tau), s.start_time + tau)
            self.landmarks.append(LandmarkView(lid, cat, MomentAccumulator(), pts))

    def window(self, states=None, capacity=4):
        w = SlidingWindow(capacity)
        for k, s in enumerate(states or self.states):
            w.push(k, s)
        return w


class TestMoments:
    def test_empty(self):
        m = scan_moments(np.zeros((0, 3)))
        assert m.count == 0 and not m.second_moment.any() and not m.first_moment.any()

    def test_single_point(self):
        m = scan_moments([[1.0, 0, 0]])
        np.testing.assert_array_equal(m.second_moment, np.diag([1.0, 0, 0]))
        np.testing.assert_array_equal(m.first_moment, [1, 0, 0])
        assert m.count == 1

    def test_two_pass_covariance(self, rng):
        p = rng.normal(size=(1000, 3)) * [1, 2, 3] + [10, -5, 2]
        c = covariance_from_moments(scan_moments(p))
        assert rel_fro(c.cov, np.cov(p.T, bias=True)) < 1e-10

    def test_marginal_empty_reduces_to_direct(self, rng):
        p = rng.normal(size=(50, 3))
        c = landmark_covariance(MomentAccumulator(), [p[:20], p[20:]])
        np.testing.assert_allclose(c.cov, np.cov(p.T, bias=True), atol=1e-14)
        assert landmark_covariance(MomentAccumulator(), [p[:3]], min_count=5) is None

    def test_identical_points(self):
        c = landmark_covariance(MomentAccumulator(), [np.tile([1.0, 2.0, 3.0], (10, 1))])
        np.testing.assert_allclose(c.eigenvalues, 0, atol=1e-14)

    def test_random_split(self, rng):
        p = rng.normal(size=(200, 3)) * 3 + 7
        k = 77
        c = landmark_covariance(scan_moments(p[:k]), [p[k:150], p[150:]])
        assert rel_fro(c.cov, np.cov(p.T, bias=True)) < 1e-10

    def test_grouped_moments_match(self, rng):
        s = random_state(rng)
        groups = [(rng.normal(size=(n, 3)), np.sort(rng.uniform(0, 0.1, n))) for n in (5, 0, 9)]
        for (raw, t), m in zip(groups, grouped_moments(s, groups)):
            ref = scan_moments(world_points(s, raw, t - s.start_time))
            np.testing.assert_allclose(m.second_moment, ref.second_moment, atol=1e-10)
            assert m.count == ref.count


class TestResiduals:
    def test_coplanar_is_zero(self, rng):
        assert plane_residual(covariance_from_moments(scan_moments(random_cloud(rng, 40, "plane")))) < 1e-7

    def test_cube_corners(self):
        c = covariance_from_moments(scan_moments(CUBE))
        np.testing.assert_allclose(c.cov, np.eye(3) / 4, atol=1e-15)
        assert plane_residual(c) == pytest.approx(0.5, abs=1e-15)
        assert edge_residual(c) == pytest.approx(math.sqrt(0.5), abs=1e-15)

    def test_collinear_is_zero(self, rng):
        assert edge_residual(covariance_from_moments(scan_moments(random_cloud(rng, 40, "line")))) < 1e-7

    def test_zero_iff_degenerate(self, rng):
        for kind in ("plane", "line", "any"):
            c = covariance_from_moments(scan_moments(random_cloud(rng, 40, kind)))
            assert (plane_residual(c) < 1e-7) == (kind != "any")
            assert (edge_residual(c) < 1e-7) == (kind == "line")

    @settings(max_examples=60)
    @given(st.integers(0, 2**32 - 1))
    def test_rigid_invariance(self, seed):
        r = np.random.default_rng(seed)
        p = random_cloud(r, 30)
        T = RigidTransform(exp_so3(r.normal(size=3)), r.normal(size=3) * 10)
        a = covariance_from_moments(scan_moments(p))
        b = covariance_from_moments(scan_moments(T.apply(p)))
        assert abs(plane_residual(a) - plane_residual(b)) < 1e-9
        assert abs(edge_residual(a) - edge_residual(b)) < 1e-9

    def test_huber_values(self):
        assert huber(0.5) == 0.5
        assert huber(1.0) == 1.0
        assert huber(4.0) == 3.0
        with pytest.raises(ValueError):
            huber(-1.0)

    @given(st.floats(0, 1e6), st.floats(0, 1e6))
    def test_huber_monotone(self, a, b):
        lo, hi = min(a, b), max(a, b)
        assert huber(lo) <= huber(hi)

    def test_huber_continuous_at_knee(self):
        assert abs(huber(1.0 + 1e-12) - huber(1.0 - 1e-12)) < 1e-11


class TestContinuity:
    def test_prediction_gives_zero(self, rng):
        for _ in range(20):
            a = random_state(rng, t=1.0)
            b = predict_next_state(a, 1.0 + rng.uniform(0, 0.3))
            assert np.abs(continuity_residual(a, b)).max() < 1e-10
            assert np.abs(velocity_residual(a, b)).max() < 1e-10

    def test_resting_pair(self):
        a = MotionState(RigidTransform(exp_so3([0.1, 0.2, 0.3]), [1, 2, 3]), np.zeros(3), np.zeros(3), 2.0)
        assert not continuity_residual(a, a).any()

    def test_translation_block(self, rng):
        cfg = BAConfig()
        a = random_state(rng)
        b = predict_next_state(a, 0.1)
        b = MotionState(RigidTransform(b.rotation, b.position + [0.1, 0, 0]), b.linear_velocity,
                        b.angular_velocity, b.start_time)
        r = continuity_residual(a, b, cfg)
        np.testing.assert_allclose(r[0:3], [-0.1 * cfg.weight_position, 0, 0], atol=1e-10)
        np.testing.assert_allclose(r[3:], 0, atol=1e-10)

    def test_translation_row_jacobian_is_exact(self, rng):
        cfg = BAConfig()
        _, Jb = continuity_jacobian(random_state(rng), random_state(rng, t=0.1), cfg)
        assert np.array_equal(Jb[0:3, 3:6], -cfg.weight_position * np.eye(3))

    def test_pair_stacks_both_factors(self, rng):
        a, b = random_state(rng), random_state(rng, t=0.1)
        np.testing.assert_array_equal(pair_residual(a, b), np.r_[continuity_residual(a, b), velocity_residual(a, b)])
        Ja, Jb = pair_jacobian(a, b)
        assert Ja.shape == Jb.shape == (12, 12)

    def test_pair_jacobian_matches_differences(self, rng):
        h = 1e-6
        for _ in range(10):
            a, b = random_state(rng), random_state(rng, t=0.1)
            Ja, Jb = pair_jacobian(a, b)
            for J, which in ((Ja, 0), (Jb, 1)):
                num = np.zeros((12, 12))
                for d in range(12):
                    e = np.zeros(12)
                    e[d] = h
                    plus = [a, b]
                    minus = [a, b]
                    plus[which] = retract(plus[which], e)
                    minus[which] = retract(minus[which], -e)
                    num[:, d] = (pair_residual(*plus) - pair_residual(*minus)) / (2 * h)
                assert np.abs(J - num).max() <= 1e-5 * max(1.0, np.abs(num).max())


class TestLandmarkJacobian:
    def test_absent_scan_gives_zero(self, rng):
        obs = [Observation(random_state(rng, t=0.0), rng.normal(size=(10, 3)), np.linspace(0, 0.1, 10)),
               Observation(random_state(rng, t=0.1), np.zeros((0, 3)), np.zeros(0))]
        grads = residual_jacobian(Category.PLANE, MomentAccumulator(), obs)
        assert not grads[1].any() and grads[0].any()

    def test_matches_numeric(self, rng):
        for cat in (Category.PLANE, Category.EDGE):
            for _ in range(5):
                obs = [Observation(random_state(rng, t=0.1 * k), rng.normal(size=(15, 3)) * 3,
                                   0.1 * k + np.sort(rng.uniform(0, 0.1, 15))) for k in range(3)]
                marg = scan_moments(rng.normal(size=(20, 3)))
                a = residual_jacobian(cat, marg, obs)
                n = residual_jacobian(cat, marg, obs, force_numeric=True)
                for x, y in zip(a, n):
                    assert np.abs(x - y).max() <= 1e-4 * max(np.abs(y).max(), 1e-8)


class TestWindow:
    def test_push_pop(self):
        w = SlidingWindow(2)
        w.push(0, MotionState.bootstrap(0.0))
        w.push(1, MotionState.bootstrap(0.1))
        assert w.full and w.last_fixed() is None
        with pytest.raises(RuntimeError):
            w.push(2, MotionState.bootstrap(0.2))
        sid, st_ = w.pop_oldest()
        assert sid == 0 and w.fixed_poses == {0: st_} and w.last_fixed() is st_
        assert w.state_of(0) is st_ and w.state_of(1).start_time == 0.1

    def test_marginalize_scan(self):
        accs = {7: MomentAccumulator(np.eye(3), np.ones(3), 3)}
        before = accs[7]
        marginalize_scan(accs, MotionState.bootstrap(0.0), {7: (np.zeros((0, 3)), np.zeros(0))})
        assert accs[7] is before
        marginalize_scan(accs, MotionState.bootstrap(0.0), {7: (np.array([[1.0, 2, 3]]), np.zeros(1))})
        np.testing.assert_array_equal(accs[7].second_moment, np.eye(3) + np.outer([1, 2, 3], [1, 2, 3]))
        np.testing.assert_array_equal(accs[7].first_moment, [2, 3, 4])
        assert accs[7].count == 4
        # the previous accumulator object is not modified
        assert before.count == 3

    def test_gradient_matches_cost(self):
        sw = SyntheticWindow(seed=3)
        r = np.random.default_rng(1)
        states = [retract(s, r.normal(size=12) * 0.02) for s in sw.states]
        for cfg in (BAConfig(), BAConfig(sqrt_n_weighting=False)):
            prob = WindowProblem(sw.landmarks, sw.window(states), cfg)
            _, g, cost = prob.linearize(states)
            assert cost == pytest.approx(prob.cost(states), rel=1e-12)
            h = 1e-6
            num = np.zeros_like(g)
            for d in range(len(g)):
                e = np.zeros(len(g))
                e[d] = h
                num[d] = (prob.cost(apply_increment(states, e)) - prob.cost(apply_increment(states, -e))) / (2 * h)
            assert np.abs(2 * g - num).max() <= 1e-5 * np.abs(num).max()

    def test_fixed_point(self):
        sw = SyntheticWindow(seed=4)
        res = optimize_window(sw.landmarks, sw.window(), BAConfig())
        assert res.iterations <= 2
        for a, b in zip(res.states, sw.states):
            assert np.abs(a.position - b.position).max() < 1e-8
            assert np.abs(a.rotation - b.rotation).max() < 1e-8

    def test_recovers_perturbed_pose(self):
        # one plane alone leaves in-plane motion free; as in steady-state
        # odometry, a fixed scan before the window anchors the velocities
        sw = SyntheticWindow(n_scans=5, seed=5)
        floor = sw.landmarks[0]
        truth = sw.states[3]
        states = list(sw.states)
        states[3] = MotionState(RigidTransform(truth.rotation, truth.position + [0, 0, 0.2]),
                                truth.linear_velocity, truth.angular_velocity, truth.start_time)
        win = SlidingWindow(4)
        win.fixed_poses[0] = states[0]
        for k in range(1, 5):
            win.push(k, states[k])
        marg = scan_moments(world_points(states[0], floor.points_by_scan[0][0],
                                         floor.points_by_scan[0][1] - states[0].start_time))
        view = LandmarkView(0, Category.PLANE, marg, {k: floor.points_by_scan[k] for k in range(1, 5)})
        res = optimize_window([view], win, BAConfig())
        assert np.linalg.norm(res.states[2].position - truth.position) < 1e-3
        obs = [Observation(s, *floor.points_by_scan[k]) for k, s in enumerate(res.states, start=1)]
        c = landmark_covariance(marg, [world_points(o.state, o.raw, o.tau) for o in obs])
        assert plane_residual(c) < 1e-4
        assert all(b <= a for a, b in zip(res.cost_trace, res.cost_trace[1:]))

    def test_cost_trace_non_increasing(self):
        sw = SyntheticWindow(seed=6)
        r = np.random.default_rng(2)
        states = [sw.states[0]] + [retract(s, r.normal(size=12) * 0.05) for s in sw.states[1:]]
        res = optimize_window(sw.landmarks, sw.window(states), BAConfig())
        assert len(res.cost_trace) >= 2
        assert all(b <= a for a, b in zip(res.cost_trace, res.cost_trace[1:]))
        assert res.cost_trace[-1] < 1e-3 * res.cost_trace[0]

    def test_single_state_window_is_untouched(self):
        sw = SyntheticWindow()
        res = optimize_window(sw.landmarks, sw.window(sw.states[:1]), BAConfig())
        assert res.iterations == 0 and res.states[0] is sw.states[0]

    def test_first_pose_is_gauge_until_something_is_fixed(self):
        sw = SyntheticWindow(seed=7)
        r = np.random.default_rng(3)
        states = [retract(s, r.normal(size=12) * 0.05) for s in sw.states]
        res = optimize_window(sw.landmarks, sw.window(states), BAConfig())
        assert np.array_equal(res.states[0].rotation, states[0].rotation)
        assert np.array_equal(res.states[0].position, states[0].position)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 3))
    def test_window_objective_equals_full_objective(self, seed, n_marg):
        """With the exited scans' poses fixed, marginal sums reproduce the
        full-history objective up to the constant pairs among fixed states."""
        sw = SyntheticWindow(n_scans=5, seed=seed % 1000, per_scan=12)
        r = np.random.default_rng(seed)
        states = [retract(s, r.normal(size=12) * 0.01) for s in sw.states]
        cfg = BAConfig()
        full = WindowProblem(sw.landmarks, sw.window(states, capacity=5), cfg)

        win = SlidingWindow(5)
        for k, s in enumerate(states):
            win.push(k, s)
        margs = {}
        for _ in range(n_marg):
            sid, st_ = win.pop_oldest()
            marginalize_scan(margs, st_, {lm.id: lm.points_by_scan[sid] for lm in sw.landmarks})
        views = [LandmarkView(lm.id, lm.category, margs[lm.id], lm.points_by_scan) for lm in sw.landmarks]
        part = WindowProblem(views, win, cfg)
        const = sum(float(np.sum(pair_residual(states[i], states[i + 1], cfg) ** 2)) for i in range(n_marg - 1))
        assert part.cost(states[n_marg:]) + const == pytest.approx(full.cost(states), rel=1e-9)
