"""Waypoint navigation world: cost function, progress, crashes, trials.

A task is three waypoints visited in a cycle for a fixed number of laps,
with obstacles in the arena.  The instantaneous state cost is

    q(x) = (x-Wx)^2 + (y-Wy)^2 + 10 (z-Wz)^2
         + (roll^2 + pitch^2 + yaw^2)/5
         + (vx^2 + vy^2 + vz^2)/10
         + 100 sum_i exp(-10 (dx_i^2 + dy_i^2))
         + 10 C

where W is the active waypoint, d_i the xy offsets to obstacle i, and C
a crash indicator.  The waypoint switches as soon as the vehicle comes
within the switch radius; the controller never gets advance knowledge of
a switch, and predicted rollouts use the currently active waypoint only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import NDArray

from .dynamics import QuadState

OUTCOME_NONE = "none"
OUTCOME_COMPLETED = "completed"
OUTCOME_CRASHED = "crashed"
OUTCOME_OUT_OF_BOUNDS = "out_of_bounds"
OUTCOME_TIMEOUT = "timeout"


@dataclass
class Task:
    """Navigation task geometry and termination thresholds."""

    waypoints: NDArray[np.float64]          # (3, 3)
    obstacles: NDArray[np.float64]          # (n, 2) xy positions
    waypoint_radius: float = 0.25
    laps: int = 4
    arena_min: NDArray[np.float64] = field(
        default_factory=lambda: np.array([-2.0, -2.0, 0.0])
    )
    arena_max: NDArray[np.float64] = field(
        default_factory=lambda: np.array([2.0, 2.0, 2.5])
    )
    z_floor: float = 0.05
    spawn: NDArray[np.float64] | None = None

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, float).reshape(-1, 3)
        self.obstacles = np.asarray(self.obstacles, float).reshape(-1, 2)
        self.arena_min = np.asarray(self.arena_min, float)
        self.arena_max = np.asarray(self.arena_max, float)
        if self.waypoint_radius <= 0:
            raise ValueError("waypoint_radius must be positive")
        for w in self.waypoints:
            if np.any(w < self.arena_min) or np.any(w > self.arena_max):
                raise ValueError("arena bounds must contain all waypoints")
        if self.spawn is None:
            self.spawn = self.waypoints[0].copy()
        else:
            self.spawn = np.asarray(self.spawn, float)

    @property
    def total_switches(self) -> int:
        return len(self.waypoints) * self.laps

    @classmethod
    def default(cls) -> "Task":
        """Triangle of waypoints with one obstacle blocking each leg."""
        return cls(
            waypoints=np.array(
                [[-1.1, -0.9, 1.0], [1.1, -0.9, 1.0], [0.0, 1.1, 1.0]]
            ),
            obstacles=np.array([[0.0, -0.9], [0.55, 0.1], [-0.55, 0.1]]),
        )


@dataclass
class ProgressState:
    """Mutable-by-replacement trial progress."""

    waypoint_index: int = 0
    completed_switches: int = 0
    crashed: bool = False

    def complete(self, task: Task) -> bool:
        return self.completed_switches >= task.total_switches


def instantaneous_cost(state: QuadState, task: Task, progress: ProgressState) -> float:
    """The navigation stage cost at one state (always >= 0)."""
    w = task.waypoints[progress.waypoint_index]
    dx = state.position - w
    q = dx[0] * dx[0] + dx[1] * dx[1] + 10.0 * dx[2] * dx[2]
    q += (state.angles @ state.angles) / 5.0
    q += (state.velocity @ state.velocity) / 10.0
    for ox, oy in task.obstacles:
        ddx = state.position[0] - ox
        ddy = state.position[1] - oy
        q += 100.0 * math.exp(-10.0 * (ddx * ddx + ddy * ddy))
    if progress.crashed:
        q += 10.0
    return float(q)


def advance_progress(state: QuadState, task: Task, progress: ProgressState) -> ProgressState:
    """Switch to the next waypoint when strictly inside the switch radius."""
    w = task.waypoints[progress.waypoint_index]
    if np.linalg.norm(state.position - w) < task.waypoint_radius:
        return replace(
            progress,
            waypoint_index=(progress.waypoint_index + 1) % len(task.waypoints),
            completed_switches=progress.completed_switches + 1,
        )
    return progress


def crash_predicate(state: QuadState, task: Task) -> str:
    """'crashed' on floor contact, 'out_of_bounds' outside the arena."""
    if state.position[2] <= task.z_floor:
        return OUTCOME_CRASHED
    if np.any(state.position < task.arena_min) or np.any(
        state.position > task.arena_max
    ):
        return OUTCOME_OUT_OF_BOUNDS
    return OUTCOME_NONE


class RolloutCost:
    """Batched float32 stage cost bound to one active waypoint.

    Predicted rollouts have no switch lookahead, so the waypoint is frozen
    for the whole horizon.  The crash indicator persists: once a rollout
    state meets the crash predicate, C stays 1 for its remaining steps.
    """

    def __init__(self, task: Task, waypoint_index: int):
        self.waypoint = task.waypoints[waypoint_index].astype(np.float32)
        self.obstacles = task.obstacles.astype(np.float32)
        self.z_floor = np.float32(task.z_floor)
        self.lo = task.arena_min.astype(np.float32)
        self.hi = task.arena_max.astype(np.float32)
        self._scratch: dict[tuple, tuple] = {}

    def _temps(self, shape):
        if shape not in self._scratch:
            self._scratch[shape] = (
                np.empty(shape, np.float32),
                np.empty(shape, np.float32),
            )
        return self._scratch[shape]

    def crash_now(self, pos, out) -> None:
        """Crash predicate over batch positions, written into out (bool)."""
        np.less_equal(pos[..., 2], self.z_floor, out=out)
        out |= pos[..., 0] < self.lo[0]
        out |= pos[..., 0] > self.hi[0]
        out |= pos[..., 1] < self.lo[1]
        out |= pos[..., 1] > self.hi[1]
        out |= pos[..., 2] > self.hi[2]

    def stage_costs(self, pos, vel, ang, crashed, out) -> None:
        """q(x) over batch states, written into out (float32).

        pos/vel are (..., 3); ang broadcasts against them (rollout-shared
        attitude); crashed is the persistent crash indicator mask.
        """
        t, t2 = self._temps(out.shape)
        np.subtract(pos[..., 0], self.waypoint[0], out=out)
        out *= out
        np.subtract(pos[..., 1], self.waypoint[1], out=t)
        t *= t
        out += t
        np.subtract(pos[..., 2], self.waypoint[2], out=t)
        t *= t
        t *= np.float32(10.0)
        out += t
        np.multiply(vel[..., 0], vel[..., 0], out=t)
        t += vel[..., 1] * vel[..., 1]
        t += vel[..., 2] * vel[..., 2]
        t *= np.float32(0.1)
        out += t
        out += (ang * ang).sum(axis=-1) * np.float32(0.2)
        for ox, oy in self.obstacles:
            np.subtract(pos[..., 0], ox, out=t)
            t *= t
            np.subtract(pos[..., 1], oy, out=t2)
            t2 *= t2
            t += t2
            t *= np.float32(-10.0)
            np.exp(t, out=t)
            t *= np.float32(100.0)
            out += t
        out += np.float32(10.0) * crashed


# ----------------------------------------------------------------------
# pass metric

def closest_pass_metric(
    positions, obstacles, hysteresis: float = 0.1
) -> tuple[list[float], float]:
    """Per-pass minimum obstacle distances and the mean of the 8 smallest.

    A pass is a local minimum of the min-over-obstacles xy distance; a new
    pass is only counted after the distance has risen at least `hysteresis`
    above the previous valley and fallen at least `hysteresis` below the
    intervening peak.  With fewer than 8 passes the mean covers all of
    them; with no obstacles there are no passes and the metric is NaN.
    """
    positions = np.asarray(positions, float)
    obstacles = np.asarray(obstacles, float).reshape(-1, 2)
    if obstacles.shape[0] == 0 or len(positions) == 0:
        return [], float("nan")
    d = np.min(
        np.hypot(
            positions[:, 0:1] - obstacles[None, :, 0],
            positions[:, 1:2] - obstacles[None, :, 1],
        ),
        axis=1,
    )
    passes: list[float] = []
    armed = True
    run_min = d[0]
    run_max = -np.inf
    for v in d[1:]:
        if armed:
            if v < run_min:
                run_min = v
            elif v >= run_min + hysteresis:
                passes.append(float(run_min))
                armed = False
                run_max = v
        else:
            if v > run_max:
                run_max = v
            elif v <= run_max - hysteresis:
                armed = True
                run_min = v
    if armed:
        passes.append(float(run_min))
    smallest = sorted(passes)[:8]
    return passes, float(np.mean(smallest))


# ----------------------------------------------------------------------
# closed-loop trials

@dataclass
class TrialResult:
    """Metrics and trajectory of one closed-loop navigation trial."""

    outcome: str
    seed: int
    steps: int
    completion_time: float                  # NaN unless completed
    total_cost: float                       # accumulated q * dt
    avg_cost_per_sec_horizon: float         # mean planned horizon cost / T
    closest_passes: list[float]
    avg_8_closest: float
    mean_prediction_variance: NDArray | None  # per axis, learned models only
    log_rows: NDArray[np.float64]           # TRIAL_COLUMNS rows
    log_path: str | None = None


def run_trial(
    task: Task,
    config,
    control_model,
    gt_model,
    seed: int,
    step_cap: int = 6000,
    log_path=None,
) -> TrialResult:
    """Fly one trial: plan with control_model, advance with gt_model.

    Each cycle checks waypoint progress and the crash predicate on the
    true state, re-optimizes the plan toward the active waypoint, executes
    the first control on the ground-truth simulator, and logs the step.
    Fully deterministic given the seed.
    """
    from dataclasses import replace as dc_replace

    from .controller import ControlPlan, PiConfig, RolloutEngine, receding_horizon_step
    from .flightlog import TRIAL_COLUMNS, write_log

    cfg = dc_replace(config, rng_seed=seed)
    params = control_model.params
    dt = params.dt
    learned = bool(getattr(control_model, "probabilistic", False))

    state = QuadState.hover(task.spawn)
    plan = ControlPlan.hover(params, cfg.horizon_steps)
    progress = ProgressState()
    engine = RolloutEngine(control_model, cfg)
    # single-rollout engine reused for the mean-mode planned-horizon cost
    probe_engine = RolloutEngine(
        control_model,
        PiConfig(
            num_rollouts=1, sub_rollouts=1, horizon_steps=cfg.horizon_steps,
            iterations_per_step=1, rng_seed=seed,
        ),
    )
    plan_cost_noise = np.zeros((1, cfg.horizon_steps, 4))

    rows = []
    var_sum = np.zeros(3)
    total_cost = 0.0
    plan_cost_sum = 0.0
    outcome = OUTCOME_TIMEOUT
    steps = 0
    completion_time = float("nan")

    for step in range(step_cap):
        progress = advance_progress(state, task, progress)
        if progress.complete(task):
            outcome = OUTCOME_COMPLETED
            completion_time = step * dt
            break
        verdict = crash_predicate(state, task)
        if verdict != OUTCOME_NONE:
            outcome = verdict
            break
        cost_model = RolloutCost(task, progress.waypoint_index)
        control, plan = receding_horizon_step(
            state, plan, cfg, control_model, cost_model, step, engine
        )
        # horizon cost of the plan just selected (mean-mode, single rollout)
        optimized = np.vstack([control.as_array()[None, :], plan.controls[:-1]])
        plan_batch = probe_engine.evaluate(
            state, plan.replaced(optimized), plan_cost_noise, cost_model
        )
        plan_cost = float(plan_batch.costs_to_go[0, 0])
        plan_cost_sum += plan_cost

        if learned:
            _, variances = control_model.predict_accel(state.angles, control.thrust)
            var_sum += variances
        else:
            variances = np.full(3, np.nan)

        q = instantaneous_cost(state, task, progress)
        total_cost += q * dt
        next_state = gt_model.step(state, control)
        rows.append(
            np.concatenate([
                [step * dt], state.as_array(), control.as_array(),
                (next_state.velocity - state.velocity) / dt,
                [progress.waypoint_index, q, plan_cost], variances,
            ])
        )
        state = next_state
        steps = step + 1

    log_rows = np.array(rows) if rows else np.empty((0, len(TRIAL_COLUMNS)))
    positions = log_rows[:, 1:4] if len(log_rows) else np.empty((0, 3))
    passes, avg8 = closest_pass_metric(positions, task.obstacles)
    horizon_s = cfg.horizon_steps * dt
    result = TrialResult(
        outcome=outcome,
        seed=seed,
        steps=steps,
        completion_time=completion_time,
        total_cost=total_cost,
        avg_cost_per_sec_horizon=(
            plan_cost_sum / steps / horizon_s if steps else float("nan")
        ),
        closest_passes=passes,
        avg_8_closest=avg8,
        mean_prediction_variance=(var_sum / steps if learned and steps else None),
        log_rows=log_rows,
        log_path=str(log_path) if log_path else None,
    )
    if log_path is not None:
        write_log(log_path, TRIAL_COLUMNS, log_rows)
    return result
