"""Quadrotor translational dynamics: analytic, perturbed, and learned.

State is 12-dimensional (position, velocity, Euler angles, tracked angle
rates).  Controls are desired attitude rates plus total thrust; an inner
rate loop tracks the desired rates with a first-order law.  Integration
is explicit Euler with the position updated from the pre-update velocity,
so trajectories are bit-exactly repeatable.

The learned variant replaces the three translational accelerations with
per-axis regression models queried at (roll, pitch, yaw, thrust); all
other kinematics are shared with the analytic model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .lwpr import FrozenLwpr, LwprModel

TWO_PI = 2.0 * math.pi


def wrap_angle(a):
    """Wrap angles (scalar or array) into (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a), TWO_PI)


@dataclass
class QuadParams:
    """Physical constants, actuator limits, and the integration step."""

    mass: float = 0.019            # kg
    gravity: float = 9.81          # m/s^2
    rate_gain: float = 25.0        # 1/s, inner rate-loop gain
    f_max: float = None            # N, defaults to twice hover thrust
    r_max: float = 10.0            # rad/s
    dt: float = 0.02               # s

    def __post_init__(self):
        if self.f_max is None:
            self.f_max = 2.0 * self.mass * self.gravity
        if self.mass <= 0 or self.dt <= 0 or self.rate_gain <= 0:
            raise ValueError("mass, dt and rate_gain must be positive")

    @property
    def hover_thrust(self) -> float:
        return self.mass * self.gravity

    def control_bounds(self) -> tuple[NDArray, NDArray]:
        """(lo, hi) arrays over the 4 control channels (3 rates, thrust)."""
        lo = np.array([-self.r_max, -self.r_max, -self.r_max, 0.0])
        hi = np.array([self.r_max, self.r_max, self.r_max, self.f_max])
        return lo, hi

    def control(self, desired_rates, thrust: float) -> "Control":
        """Build a Control with actuator clamps applied."""
        rates = np.clip(np.asarray(desired_rates, float), -self.r_max, self.r_max)
        return Control(rates, float(np.clip(thrust, 0.0, self.f_max)))


@dataclass(frozen=True)
class Control:
    """Attitude-rate plus total-thrust command (already clamped).

    Construct through QuadParams.control so actuator limits are applied.
    """

    desired_rates: NDArray[np.float64]
    thrust: float

    def as_array(self) -> NDArray[np.float64]:
        return np.array([*self.desired_rates, self.thrust])


@dataclass
class QuadState:
    """Vehicle state: position, velocity, Euler angles, tracked rates."""

    position: NDArray[np.float64]
    velocity: NDArray[np.float64]
    angles: NDArray[np.float64]
    rates: NDArray[np.float64]

    def __post_init__(self):
        self.position = np.asarray(self.position, float).copy()
        self.velocity = np.asarray(self.velocity, float).copy()
        self.angles = np.asarray(self.angles, float).copy()
        self.rates = np.asarray(self.rates, float).copy()
        vec = self.as_array()
        if vec.shape != (12,) or not np.all(np.isfinite(vec)):
            raise ValueError("state must be 12 finite components")

    @classmethod
    def hover(cls, position) -> "QuadState":
        z = np.zeros(3)
        return cls(np.asarray(position, float), z, z, z)

    @classmethod
    def from_array(cls, vec) -> "QuadState":
        vec = np.asarray(vec, float)
        return cls(vec[0:3], vec[3:6], vec[6:9], vec[9:12])

    def as_array(self) -> NDArray[np.float64]:
        return np.concatenate(
            [self.position, self.velocity, self.angles, self.rates]
        )


def thrust_direction(angles) -> NDArray[np.float64]:
    """World-frame body z-axis for Z-Y-X Euler angles (roll, pitch, yaw)."""
    roll, pitch, yaw = angles
    sr, cr = math.sin(roll), math.cos(roll)
    sp, cp = math.sin(pitch), math.cos(pitch)
    sy, cy = math.sin(yaw), math.cos(yaw)
    return np.array(
        [cr * sp * cy + sr * sy, cr * sp * sy - sr * cy, cr * cp]
    )


def accel_analytic(
    state: QuadState, control: Control, params: QuadParams
) -> NDArray[np.float64]:
    """Translational acceleration from thrust along the body z-axis."""
    a = (control.thrust / params.mass) * thrust_direction(state.angles)
    a[2] -= params.gravity
    return a


def _kinematic_step(
    state: QuadState, control: Control, params: QuadParams, accel
) -> QuadState:
    """Shared Euler step; position integrates the pre-update velocity."""
    dt = params.dt
    position = state.position + state.velocity * dt
    velocity = state.velocity + accel * dt
    angles = wrap_angle(state.angles + state.rates * dt)
    rates = state.rates + params.rate_gain * (control.desired_rates - state.rates) * dt
    return QuadState(position, velocity, angles, rates)


def step_analytic(state: QuadState, control: Control, params: QuadParams) -> QuadState:
    return _kinematic_step(state, control, params, accel_analytic(state, control, params))


# ----------------------------------------------------------------------
# model objects

class AnalyticModel:
    """Rigid-body control model (no drag, nominal thrust)."""

    probabilistic = False

    def __init__(self, params: QuadParams | None = None):
        self.params = params or QuadParams()

    def accel(self, state: QuadState, control: Control) -> NDArray:
        return accel_analytic(state, control, self.params)

    def step(self, state: QuadState, control: Control, mode="mean", noise=None) -> QuadState:
        return _kinematic_step(state, control, self.params, self.accel(state, control))

    def make_batch_eval(self, rows: int):
        """Batched accelerations for the rollout engine.

        Returns eval_into(inputs, out_mean, out_std) where inputs is
        float32 (B, 4) rows of (roll, pitch, yaw, thrust).
        """
        inv_m = np.float32(1.0 / self.params.mass)
        g = np.float32(self.params.gravity)

        def eval_into(inputs, out_mean, out_std=None):
            roll, pitch, yaw = inputs[:, 0], inputs[:, 1], inputs[:, 2]
            sr, cr = np.sin(roll), np.cos(roll)
            sp, cp = np.sin(pitch), np.cos(pitch)
            sy, cy = np.sin(yaw), np.cos(yaw)
            fm = inputs[:, 3] * inv_m
            out_mean[:, 0] = fm * (cr * sp * cy + sr * sy)
            out_mean[:, 1] = fm * (cr * sp * sy - sr * cy)
            out_mean[:, 2] = fm * (cr * cp) - g
            if out_std is not None:
                out_std[:] = 0.0

        return eval_into


class PerturbedModel(AnalyticModel):
    """Ground-truth simulator: analytic model plus linear drag on velocity
    and a thrust-scale bias.  Used to generate flights and to stand in for
    the real vehicle in closed-loop trials; never used for planning.
    """

    def __init__(self, params=None, drag_coeff: float = 0.0, thrust_scale: float = 1.0):
        super().__init__(params)
        self.drag_coeff = float(drag_coeff)
        self.thrust_scale = float(thrust_scale)

    def accel(self, state: QuadState, control: Control) -> NDArray:
        a = (self.thrust_scale * control.thrust / self.params.mass) * thrust_direction(
            state.angles
        )
        a[2] -= self.params.gravity
        return a - self.drag_coeff * state.velocity

    def make_batch_eval(self, rows: int):
        raise TypeError(
            "velocity-dependent ground-truth model cannot serve rollouts"
        )


class HybridModel:
    """Kinematics of the analytic model with learned accelerations.

    Three independent per-axis regression models map (roll, pitch, yaw,
    thrust) to translational acceleration mean and variance.
    """

    probabilistic = True

    def __init__(self, models: tuple[LwprModel, LwprModel, LwprModel], params=None):
        if len(models) != 3:
            raise ValueError("need one model per acceleration axis")
        for m in models:
            if m.input_dim != 4:
                raise ValueError("acceleration models take 4 inputs")
        self.models = tuple(models)
        self.params = params or QuadParams()

    def _require_trained(self):
        for axis, m in zip("xyz", self.models):
            if m.num_fields == 0:
                raise ValueError(f"acceleration model for {axis} axis is untrained")

    def predict_accel(self, angles, thrust: float) -> tuple[NDArray, NDArray]:
        """(means, variances) per axis at one (angles, thrust) input."""
        self._require_trained()
        x = np.array([angles[0], angles[1], angles[2], thrust])
        out = [m.predict(x) for m in self.models]
        return (
            np.array([p.mean for p in out]),
            np.array([p.variance for p in out]),
        )

    def accel(self, state: QuadState, control: Control, mode="mean", noise=None) -> NDArray:
        mean, var = self.predict_accel(state.angles, control.thrust)
        if mode == "mean":
            return mean
        if mode == "sample":
            if noise is None:
                raise ValueError("sample mode requires 3 standard normal draws")
            return mean + np.sqrt(var) * np.asarray(noise, float)
        raise ValueError(f"unknown mode {mode!r}")

    def step(self, state: QuadState, control: Control, mode="mean", noise=None) -> QuadState:
        return _kinematic_step(
            state, control, self.params, self.accel(state, control, mode, noise)
        )

    def make_batch_eval(self, rows: int):
        self._require_trained()
        frozen = [FrozenLwpr(m, rows) for m in self.models]

        def eval_into(inputs, out_mean, out_std=None):
            for axis in range(3):
                if out_std is None:
                    frozen[axis].predict_into(inputs, out_mean[:, axis])
                else:
                    frozen[axis].predict_into(
                        inputs, out_mean[:, axis], out_std[:, axis]
                    )
            if out_std is not None:
                np.sqrt(out_std, out=out_std)

        return eval_into


# ----------------------------------------------------------------------
# propagation

DEFAULT_SANITY_BOX = np.array([50.0, 50.0, 60.0])  # |x|, |y|, |z| bounds


@dataclass
class Trajectory:
    """Propagated states (initial state included) plus a divergence flag."""

    states: NDArray[np.float64]  # (steps + 1, 12)
    diverged: bool = False

    @property
    def positions(self) -> NDArray[np.float64]:
        return self.states[:, 0:3]

    @property
    def velocities(self) -> NDArray[np.float64]:
        return self.states[:, 3:6]

    def final_state(self) -> QuadState:
        return QuadState.from_array(self.states[-1])


def propagate(
    model,
    state: QuadState,
    plan,
    horizon_steps: int,
    mode: str = "mean",
    noise_seq=None,
    sanity_box=DEFAULT_SANITY_BOX,
) -> Trajectory:
    """Iterate single steps of `model` along the plan's controls.

    plan may be a ControlPlan or an (N, 4) array of control rows.  In
    sample mode, noise_seq must provide (horizon_steps, 3) standard-normal
    draws.  States escaping the sanity box mark the trajectory diverged
    (it is still returned in full).
    """
    controls = plan.controls_array() if hasattr(plan, "controls_array") else np.asarray(plan, float)
    if horizon_steps > len(controls):
        raise ValueError("horizon_steps exceeds plan length")
    if mode == "sample" and (noise_seq is None or len(noise_seq) < horizon_steps):
        raise ValueError("sample mode requires noise for every step")
    params = model.params
    out = np.empty((horizon_steps + 1, 12))
    out[0] = state.as_array()
    cur = state
    diverged = False
    for i in range(horizon_steps):
        control = params.control(controls[i, :3], controls[i, 3])
        if mode == "sample" and getattr(model, "probabilistic", False):
            cur = model.step(cur, control, mode="sample", noise=noise_seq[i])
        else:
            cur = model.step(cur, control)
        out[i + 1] = cur.as_array()
        if np.any(np.abs(cur.position) > sanity_box) or np.any(
            np.abs(cur.velocity) > 100.0
        ):
            diverged = True
    return Trajectory(states=out, diverged=diverged)
