import math

import numpy as np
import pytest

from pimpc.dynamics import (
    AnalyticModel,
    Control,
    HybridModel,
    PerturbedModel,
    QuadParams,
    QuadState,
    accel_analytic,
    propagate,
    step_analytic,
    wrap_angle,
)
from pimpc.lwpr import LwprModel


def rotation_zyx(roll, pitch, yaw):
    """Independent rotation-matrix oracle: R = Rz(yaw) Ry(pitch) Rx(roll)."""
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    return rz @ ry @ rx


def hover_state(position=(0.0, 0.0, 1.0)):
    return QuadState.hover(position)


def train_on_analytic_grid(params, n_roll=9, n_pitch=9, n_thrust=7, epochs=3):
    """Fit the three acceleration models to the analytic formulas."""
    models = [
        LwprModel(input_dim=4, d_init=[30.0, 30.0, 30.0, 1500.0], ridge=1e-4)
        for _ in range(3)
    ]
    analytic = AnalyticModel(params)
    X, Y = [], []
    for roll in np.linspace(-0.35, 0.35, n_roll):
        for pitch in np.linspace(-0.35, 0.35, n_pitch):
            for thrust in np.linspace(0.10, 0.28, n_thrust):
                st = QuadState(np.zeros(3), np.zeros(3), [roll, pitch, 0.0], np.zeros(3))
                a = analytic.accel(st, params.control(np.zeros(3), thrust))
                X.append([roll, pitch, 0.0, thrust])
                Y.append(a)
    rng = np.random.default_rng(0)
    for _ in range(epochs):
        for i in rng.permutation(len(X)):
            for axis in range(3):
                models[axis].update(X[i], Y[i][axis])
    return HybridModel(tuple(models), params)


class TestAccelAnalytic:
    def test_hover_balance(self):
        p = QuadParams()
        a = accel_analytic(hover_state(), p.control(np.zeros(3), p.hover_thrust), p)
        np.testing.assert_allclose(a, 0.0, atol=1e-12)

    def test_free_fall(self):
        p = QuadParams()
        a = accel_analytic(hover_state(), p.control(np.zeros(3), 0.0), p)
        np.testing.assert_allclose(a, [0.0, 0.0, -9.81])

    def test_pitch_tilt_matches_rotation_oracle(self):
        p = QuadParams()
        st = QuadState(np.zeros(3), np.zeros(3), [0.0, 0.1, 0.0], np.zeros(3))
        c = p.control(np.zeros(3), p.hover_thrust)
        a = accel_analytic(st, c, p)
        assert a[0] == pytest.approx(p.gravity * math.sin(0.1), rel=1e-12)
        oracle = (c.thrust / p.mass) * (rotation_zyx(0.0, 0.1, 0.0) @ [0, 0, 1])
        oracle[2] -= p.gravity
        np.testing.assert_allclose(a, oracle, atol=1e-12)

    def test_general_attitude_matches_rotation_oracle(self):
        rng = np.random.default_rng(0)
        p = QuadParams()
        for _ in range(25):
            ang = rng.uniform(-1.0, 1.0, size=3)
            thrust = rng.uniform(0.0, p.f_max)
            st = QuadState(np.zeros(3), np.zeros(3), ang, np.zeros(3))
            a = accel_analytic(st, p.control(np.zeros(3), thrust), p)
            oracle = (thrust / p.mass) * (rotation_zyx(*ang) @ [0, 0, 1])
            oracle[2] -= p.gravity
            np.testing.assert_allclose(a, oracle, atol=1e-12)


class TestStepAnalytic:
    def test_hover_is_fixed_point(self):
        p = QuadParams()
        st = hover_state()
        nxt = step_analytic(st, p.control(np.zeros(3), p.hover_thrust), p)
        np.testing.assert_array_equal(nxt.as_array(), st.as_array())

    def test_free_fall_single_step(self):
        p = QuadParams()
        st = hover_state()
        nxt = step_analytic(st, p.control(np.zeros(3), 0.0), p)
        assert nxt.velocity[2] == pytest.approx(-0.1962, abs=1e-12)
        np.testing.assert_array_equal(nxt.position, st.position)  # pre-update velocity

    def test_rate_law(self):
        p = QuadParams()
        st = hover_state()
        nxt = step_analytic(st, p.control([1.0, 0.0, 0.0], p.hover_thrust), p)
        # r' = r + 25*(1 - 0)*dt = 0.5
        assert nxt.rates[0] == pytest.approx(0.5, abs=1e-15)

    def test_rate_error_contracts_by_half_per_step(self):
        p = QuadParams()
        st = QuadState(np.zeros(3), np.zeros(3), np.zeros(3), [2.0, -1.0, 0.5])
        c = p.control([0.4, 0.4, 0.4], p.hover_thrust)
        for _ in range(8):
            nxt = step_analytic(st, c, p)
            err_before = np.abs(st.rates - c.desired_rates)
            err_after = np.abs(nxt.rates - c.desired_rates)
            np.testing.assert_allclose(err_after, 0.5 * err_before, atol=1e-14)
            st = nxt

    def test_free_fall_matches_euler_recurrence_exactly(self):
        p = QuadParams()
        st = hover_state((0.0, 0.0, 5.0))
        c = p.control(np.zeros(3), 0.0)
        z, vz = 5.0, 0.0
        for _ in range(40):
            st = step_analytic(st, c, p)
            z = z + vz * p.dt
            vz = vz + (-p.gravity) * p.dt
            assert st.position[2] == z
            assert st.velocity[2] == vz

    def test_determinism(self):
        p = QuadParams()
        st = QuadState([0.1, -0.2, 1.0], [0.5, 0.0, -0.1], [0.1, 0.2, -0.3], [1.0, 0.0, 0.0])
        c = p.control([0.3, -0.5, 0.1], 0.2)
        a = step_analytic(st, c, p).as_array()
        b = step_analytic(st, c, p).as_array()
        np.testing.assert_array_equal(a, b)

    def test_angle_wrapping(self):
        p = QuadParams()
        st = QuadState(np.zeros(3), np.zeros(3), [math.pi - 0.01, 0, 0], [10.0, 0, 0])
        nxt = step_analytic(st, p.control(np.zeros(3), p.hover_thrust), p)
        assert -math.pi < nxt.angles[0] <= math.pi
        assert nxt.angles[0] == pytest.approx(-math.pi + 0.19, abs=1e-12)


class TestControlClamping:
    def test_thrust_clamped_to_range(self):
        p = QuadParams()
        assert p.control(np.zeros(3), -1.0).thrust == 0.0
        assert p.control(np.zeros(3), 99.0).thrust == p.f_max

    def test_rates_clamped(self):
        p = QuadParams(r_max=10.0)
        c = p.control([12.0, -15.0, 3.0], 0.1)
        np.testing.assert_array_equal(c.desired_rates, [10.0, -10.0, 3.0])


class TestHybrid:
    def test_zero_variance_sample_equals_mean(self):
        # single field per axis with zero local variance: the predicted
        # variance is identically zero, so sampling is degenerate
        p = QuadParams()
        models = []
        for axis in range(3):
            m = LwprModel(input_dim=4, d_init=np.ones(4))
            m.update([0.0, 0.0, 0.0, 0.19], float(axis) - 1.0)
            m.fields[0].local_variance = 0.0
            m._stacked = None
            models.append(m)
        hybrid = HybridModel(tuple(models), p)
        st = QuadState(np.zeros(3), np.zeros(3), [0.1, -0.1, 0.0], np.zeros(3))
        c = p.control(np.zeros(3), 0.2)
        assert np.all(hybrid.predict_accel(st.angles, c.thrust)[1] == 0.0)
        a = hybrid.step(st, c, mode="mean").as_array()
        b = hybrid.step(st, c, mode="sample", noise=np.array([1.3, -2.0, 0.7])).as_array()
        np.testing.assert_array_equal(a, b)

    def test_zero_noise_sample_equals_mean(self):
        p = QuadParams()
        hybrid = train_on_analytic_grid(p, 5, 5, 4)
        st = QuadState(np.zeros(3), np.zeros(3), [0.05, 0.2, 0.0], np.zeros(3))
        c = p.control(np.zeros(3), 0.15)
        a = hybrid.step(st, c, mode="mean").as_array()
        b = hybrid.step(st, c, mode="sample", noise=np.zeros(3)).as_array()
        np.testing.assert_array_equal(a, b)

    def test_trained_on_analytic_matches_step_analytic(self):
        p = QuadParams()
        hybrid = train_on_analytic_grid(p)
        rng = np.random.default_rng(4)
        for _ in range(30):
            ang = rng.uniform(-0.3, 0.3, size=2)
            st = QuadState(rng.normal(size=3), rng.normal(size=3) * 0.2,
                           [ang[0], ang[1], 0.0], np.zeros(3))
            c = p.control(rng.uniform(-1, 1, size=3), rng.uniform(0.12, 0.25))
            got = hybrid.step(st, c).as_array()
            want = step_analytic(st, c, p).as_array()
            # kinematics identical; only the acceleration is approximated
            np.testing.assert_array_equal(got[0:3], want[0:3])
            np.testing.assert_array_equal(got[6:12], want[6:12])
            np.testing.assert_allclose(got[3:6], want[3:6], atol=0.3 * p.dt)

    def test_untrained_model_raises(self):
        p = QuadParams()
        hybrid = HybridModel(tuple(LwprModel(input_dim=4) for _ in range(3)), p)
        st = hover_state()
        with pytest.raises(ValueError, match="untrained"):
            hybrid.step(st, p.control(np.zeros(3), 0.2))


class TestPropagate:
    def test_zero_horizon_returns_initial_only(self):
        p = QuadParams()
        st = hover_state()
        traj = propagate(AnalyticModel(p), st, np.zeros((10, 4)), 0)
        assert traj.states.shape == (1, 12)
        np.testing.assert_array_equal(traj.states[0], st.as_array())

    def test_hover_plan_is_stationary(self):
        p = QuadParams()
        st = hover_state()
        plan = np.tile([0.0, 0.0, 0.0, p.hover_thrust], (50, 1))
        traj = propagate(AnalyticModel(p), st, plan, 50)
        assert traj.states.shape == (51, 12)
        assert not traj.diverged
        np.testing.assert_allclose(
            traj.states, np.tile(st.as_array(), (51, 1)), atol=1e-9
        )

    def test_horizon_longer_than_plan_raises(self):
        p = QuadParams()
        with pytest.raises(ValueError, match="horizon"):
            propagate(AnalyticModel(p), hover_state(), np.zeros((10, 4)), 11)

    def test_divergence_is_flagged_but_returned(self):
        p = QuadParams()
        st = hover_state()
        plan = np.tile([0.0, 0.0, 0.0, 0.0], (400, 1))  # free fall 8 s
        traj = propagate(AnalyticModel(p), st, plan, 400)
        assert traj.diverged
        assert traj.states.shape == (401, 12)

    def test_perturbed_model_drag_slows_fall(self):
        p = QuadParams()
        st = QuadState([0, 0, 5.0], [0, 0, -3.0], np.zeros(3), np.zeros(3))
        plan = np.tile([0.0, 0.0, 0.0, 0.0], (25, 1))
        free = propagate(AnalyticModel(p), st, plan, 25)
        dragged = propagate(PerturbedModel(p, drag_coeff=0.5), st, plan, 25)
        assert dragged.states[-1, 5] > free.states[-1, 5]  # less negative vz


def test_wrap_angle_range_and_boundary():
    assert wrap_angle(math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert wrap_angle(0.0) == 0.0
    vals = wrap_angle(np.linspace(-20, 20, 1001))
    assert np.all(vals > -math.pi) and np.all(vals <= math.pi)
    # wrapping preserves the angle itself modulo 2*pi
    for a in np.linspace(-20, 20, 101):
        assert math.isclose(
            math.sin(wrap_angle(a)), math.sin(a), abs_tol=1e-12
        )
