"""Iterative receding-horizon path integral optimization.

Each control cycle perturbs the current plan with Gaussian exploration
noise, propagates every perturbed plan through the dynamics model (M
stochastic sub-rollouts per plan when the model is probabilistic),
accumulates per-timestep cost-to-go, and moves the plan toward the
exponentially cost-weighted average of the perturbations.  Only the first
control is executed; the remainder warm-starts the next cycle.

Rollout evaluation is chunked: rollouts are processed in fixed-size
blocks so results are bitwise identical for any worker count, and the
blocks can be spread over a thread pool (the heavy numpy kernels release
the GIL).  Chunk internals run in float32 with preallocated workspaces;
all plan and weight arithmetic is float64.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import NDArray

from . import rng
from .dynamics import Control, QuadParams, QuadState, wrap_angle


@dataclass
class ControlPlan:
    """N control rows (3 desired rates + thrust) with warm-start semantics."""

    controls: NDArray[np.float64]        # (N, 4), always within bounds
    dt: float
    origin_time: float
    lo: NDArray[np.float64]              # per-channel lower bounds
    hi: NDArray[np.float64]

    def __post_init__(self):
        self.controls = np.asarray(self.controls, float)
        if self.controls.ndim != 2 or self.controls.shape[1] != 4:
            raise ValueError("controls must be (N, 4)")
        if len(self.controls) < 1:
            raise ValueError("plan must have at least one control")
        self.controls = np.clip(self.controls, self.lo[None, :], self.hi[None, :])

    @classmethod
    def hover(cls, params: QuadParams, horizon_steps: int, origin_time=0.0) -> "ControlPlan":
        lo, hi = params.control_bounds()
        controls = np.tile([0.0, 0.0, 0.0, params.hover_thrust], (horizon_steps, 1))
        return cls(controls, params.dt, origin_time, lo, hi)

    def __len__(self) -> int:
        return len(self.controls)

    def controls_array(self) -> NDArray[np.float64]:
        return self.controls

    def control_at(self, i: int) -> Control:
        row = self.controls[i]
        return Control(row[:3].copy(), float(row[3]))

    def shifted(self) -> "ControlPlan":
        """Drop the first control; duplicate the last to fill the tail."""
        controls = np.vstack([self.controls[1:], self.controls[-1:]])
        return ControlPlan(controls, self.dt, self.origin_time + self.dt, self.lo, self.hi)

    def replaced(self, controls) -> "ControlPlan":
        return ControlPlan(np.asarray(controls, float), self.dt, self.origin_time, self.lo, self.hi)


@dataclass
class PiConfig:
    """Path-integral optimizer settings."""

    num_rollouts: int = 1000
    sub_rollouts: int = 1
    horizon_steps: int = 50
    iterations_per_step: int = 2
    temperature: float = 1.0
    exploration_std: NDArray[np.float64] = field(
        default_factory=lambda: np.array([2.0, 2.0, 0.8, 0.05])
    )
    rng_seed: int = 0
    workers: int = 1
    chunk_size: int = 1000
    cost_ceiling: float = 1e8

    def __post_init__(self):
        self.exploration_std = np.asarray(self.exploration_std, float).reshape(4)
        if self.num_rollouts < 1 or self.sub_rollouts < 1 or self.horizon_steps < 1:
            raise ValueError("num_rollouts, sub_rollouts, horizon_steps must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if np.any(self.exploration_std <= 0):
            raise ValueError("exploration_std must be positive")
        if self.iterations_per_step < 0:
            raise ValueError("iterations_per_step must be >= 0")
        if self.workers < 1 or self.chunk_size < 1:
            raise ValueError("workers and chunk_size must be >= 1")


@dataclass
class RolloutBatch:
    """Evaluated rollouts for one optimization iteration."""

    noise: NDArray[np.float64]        # (K, N, 4) control perturbations
    costs_to_go: NDArray[np.float64]  # (K, N) tail cost per timestep
    crash_flags: NDArray[np.bool_]    # (K,) any sub-rollout met the crash predicate


def sample_noise(config: PiConfig, cycle_index: int, iteration: int = 0) -> NDArray:
    """Control exploration noise (K, N, 4), scaled per channel.

    The array is a pure function of (rng_seed, cycle_index, iteration) and
    the entry position, via a counter-based generator, so it is identical
    no matter how evaluation is parallelized.
    """
    block = rng.normal_block(
        config.rng_seed,
        (rng.STREAM_CONTROL, cycle_index, iteration),
        (config.num_rollouts, config.horizon_steps, 4),
    )
    block *= config.exploration_std[None, None, :]
    return block


def sample_dynamics_noise(config: PiConfig, cycle_index: int, iteration: int = 0) -> NDArray:
    """Standard-normal draws (K, M, N, 3) for probabilistic sub-rollouts.

    float32: these scale the model's predictive standard deviation inside
    the float32 rollout engine.
    """
    return rng.normal_block(
        config.rng_seed,
        (rng.STREAM_DYNAMICS, cycle_index, iteration),
        (config.num_rollouts, config.sub_rollouts, config.horizon_steps, 3),
        dtype=np.float32,
    )


class _ChunkWorkspace:
    """Preallocated buffers for one worker processing one chunk at a time."""

    def __init__(self, model, chunk: int, n_steps: int, m_sub: int):
        rows = chunk * n_steps
        self.eval_into = model.make_batch_eval(rows)
        self.u = np.empty((chunk, n_steps, 4))
        self.xin = np.empty((rows, 4), np.float32)
        self.angs = np.empty((chunk, n_steps + 1, 3))
        self.mean = np.empty((rows, 3), np.float32)
        self.std = np.empty((rows, 3), np.float32)
        shape = (chunk, m_sub, n_steps, 3)
        self.acc = np.empty(shape, np.float32)
        self.vel = np.empty(shape, np.float32)
        self.pos = np.empty(shape, np.float32)
        self.q = np.empty(shape[:3], np.float32)
        self.crashed = np.empty(shape[:3], bool)


class RolloutEngine:
    """Chunked, deterministic evaluator of perturbed control plans.

    Holds per-worker workspaces so repeated control cycles do not churn
    large allocations.  Chunk boundaries depend only on chunk_size, never
    on the worker count, which keeps results bitwise reproducible for any
    parallelism level.

    Models must expose make_batch_eval(rows) returning a callable
    eval_into(inputs, out_mean, out_std) over float32 (roll, pitch, yaw,
    thrust) rows; accelerations may not depend on velocity.  A model may
    also provide noise_transform(draws) mapping standard-normal draws to
    its sampling distribution (identity when absent).
    """

    def __init__(self, model, config: PiConfig):
        self.model = model
        self.config = config
        self.params: QuadParams = model.params
        self.chunk = min(config.chunk_size, config.num_rollouts)
        self.use_spread = bool(getattr(model, "probabilistic", False)) and (
            config.sub_rollouts > 1
        )
        self.noise_transform = getattr(model, "noise_transform", None)
        self._workspaces: list[_ChunkWorkspace | None] = [None] * config.workers

    def _workspace(self, slot: int) -> _ChunkWorkspace:
        if self._workspaces[slot] is None:
            self._workspaces[slot] = _ChunkWorkspace(
                self.model,
                self.chunk,
                self.config.horizon_steps,
                self.config.sub_rollouts if self.use_spread else 1,
            )
        return self._workspaces[slot]

    def evaluate(
        self,
        state: QuadState,
        plan: ControlPlan,
        noise: NDArray,
        cost_model,
        dyn_noise: NDArray | None = None,
    ) -> RolloutBatch:
        """Propagate every perturbed plan and accumulate cost-to-go."""
        cfg = self.config
        k_total, n_steps = noise.shape[0], noise.shape[1]
        if n_steps != len(plan):
            raise ValueError("noise horizon does not match plan length")
        if self.use_spread and dyn_noise is None:
            raise ValueError("probabilistic model with sub_rollouts > 1 needs dyn_noise")
        costs = np.empty((k_total, n_steps))
        crash_flags = np.empty(k_total, bool)
        spans = [
            (s, min(s + self.chunk, k_total)) for s in range(0, k_total, self.chunk)
        ]
        if cfg.workers == 1 or len(spans) == 1:
            ws = self._workspace(0)
            for s, e in spans:
                self._run_chunk(
                    ws, state, plan, noise[s:e],
                    None if dyn_noise is None else dyn_noise[s:e],
                    cost_model, costs[s:e], crash_flags[s:e],
                )
        else:
            def drain(slot: int, assigned):
                ws = self._workspace(slot)
                for s, e in assigned:
                    self._run_chunk(
                        ws, state, plan, noise[s:e],
                        None if dyn_noise is None else dyn_noise[s:e],
                        cost_model, costs[s:e], crash_flags[s:e],
                    )

            n_workers = min(cfg.workers, len(spans))
            with ThreadPoolExecutor(max_workers=n_workers) as pool:
                futures = [
                    pool.submit(drain, slot, spans[slot::n_workers])
                    for slot in range(n_workers)
                ]
                for f in futures:
                    f.result()
        bad = ~np.isfinite(costs)
        if bad.any():
            costs[bad] = cfg.cost_ceiling
            crash_flags |= bad.any(axis=1)
        return RolloutBatch(noise=noise, costs_to_go=costs, crash_flags=crash_flags)

    def _run_chunk(
        self, ws, state, plan, noise_c, dyn_c, cost_model, costs_out, crash_out
    ) -> None:
        p = self.params
        ch = noise_c.shape[0]
        n_steps = noise_c.shape[1]
        dt32 = np.float32(p.dt)

        u = ws.u[:ch]
        np.add(plan.controls[None, :, :], noise_c, out=u)
        np.clip(u, plan.lo[None, None, :], plan.hi[None, None, :], out=u)

        # attitude trajectories are deterministic given the controls;
        # angs[:, t] is the attitude entering step t, angs[:, t+1] the result
        angs = ws.angs[:ch]
        ang = np.tile(state.angles, (ch, 1))
        rate = np.tile(state.rates, (ch, 1))
        gain_dt = p.rate_gain * p.dt
        for t in range(n_steps):
            angs[:, t, :] = ang
            ang = wrap_angle(ang + rate * p.dt)
            rate = rate + gain_dt * (u[:, t, :3] - rate)
        angs[:, n_steps, :] = ang
        rows = ch * n_steps
        xin = ws.xin[:rows]
        xin.reshape(ch, n_steps, 4)[:, :, :3] = angs[:, :n_steps]
        xin.reshape(ch, n_steps, 4)[:, :, 3] = u[:, :, 3]

        mean = ws.mean[:rows]
        std = ws.std[:rows] if self.use_spread else None
        ws.eval_into(xin, mean, std)

        # accelerations depend only on attitude and thrust, so velocity and
        # position are plain cumulative sums along time (Euler, position
        # from the pre-update velocity):
        #   vel after step t:  v0 + dt * cumsum(acc)_t
        #   pos after step t:  p0 + dt*(t+1)*v0 + dt^2 * (ccsum - csum)_t
        acc, vel, pos = ws.acc[:ch], ws.vel[:ch], ws.pos[:ch]
        mean4 = mean.reshape(ch, 1, n_steps, 3)
        if std is not None:
            draws = dyn_c if self.noise_transform is None else self.noise_transform(dyn_c)
            np.multiply(std.reshape(ch, 1, n_steps, 3), draws, out=acc)
            acc += mean4
        else:
            acc[:] = mean4
        np.cumsum(acc, axis=2, out=vel)
        np.cumsum(vel, axis=2, out=pos)
        pos -= vel
        pos *= dt32 * dt32
        vel *= dt32
        vel += state.velocity.astype(np.float32)[None, None, None, :]
        steps32 = np.arange(1, n_steps + 1, dtype=np.float32)[None, None, :, None]
        pos += (dt32 * steps32) * state.velocity.astype(np.float32)[None, None, None, :]
        pos += state.position.astype(np.float32)[None, None, None, :]

        crashed = ws.crashed[:ch]
        cost_model.crash_now(pos, crashed)
        np.logical_or.accumulate(crashed, axis=2, out=crashed)
        ang32 = angs[:, 1:].astype(np.float32)[:, None, :, :]  # post-step attitude
        q = ws.q[:ch]
        cost_model.stage_costs(pos, vel, ang32, crashed, q)
        crash_out[:] = crashed[:, :, -1].any(axis=1)

        # average over sub-rollouts (pairwise, exact for power-of-two M),
        # then suffix-sum the stage costs into per-timestep cost-to-go
        qm = q
        while qm.shape[1] > 1:
            if qm.shape[1] % 2 == 0:
                qm = 0.5 * (qm[:, 0::2] + qm[:, 1::2])
            else:
                qm = qm.mean(axis=1, keepdims=True)
        stage = qm[:, 0, :].astype(np.float64)          # (ch, N)
        stage *= p.dt
        costs_out[:] = np.cumsum(stage[:, ::-1], axis=1)[:, ::-1]


def evaluate_rollouts(
    state: QuadState,
    plan: ControlPlan,
    noise: NDArray,
    model,
    cost_model,
    sub_rollouts: int = 1,
    dyn_noise: NDArray | None = None,
    workers: int = 1,
    chunk_size: int = 250,
    cost_ceiling: float = 1e8,
) -> RolloutBatch:
    """One-shot rollout evaluation (see RolloutEngine for the contract).

    For probabilistic models with sub_rollouts > 1, each perturbed plan is
    propagated sub_rollouts times with fresh dynamics draws and its
    per-timestep cost-to-go is the average over those propagations; with
    sub_rollouts == 1 the mean prediction is used.
    """
    cfg = PiConfig(
        num_rollouts=noise.shape[0],
        sub_rollouts=sub_rollouts,
        horizon_steps=noise.shape[1],
        iterations_per_step=1,
        workers=workers,
        chunk_size=chunk_size,
        cost_ceiling=cost_ceiling,
    )
    return RolloutEngine(model, cfg).evaluate(state, plan, noise, cost_model, dyn_noise)


def path_integral_update(plan: ControlPlan, batch: RolloutBatch, temperature: float) -> ControlPlan:
    """Move the plan toward the cost-weighted average of its perturbations.

    Weights are per-timestep softmax over rollouts of the tail cost, with
    the column minimum subtracted before exponentiation (mandatory for
    numerical stability; the minimum maps to weight 1).
    """
    costs = np.asarray(batch.costs_to_go, float)
    noise = np.asarray(batch.noise, float)
    if costs.shape != noise.shape[:2] or len(plan) != costs.shape[1]:
        raise ValueError("batch does not match plan dimensions")
    shifted = costs - costs.min(axis=0)[None, :]
    weights = np.exp(shifted * (-1.0 / temperature))
    weights /= weights.sum(axis=0)[None, :]
    delta = np.einsum("kn,knc->nc", weights, noise)
    return plan.replaced(plan.controls + delta)


def optimize(
    state: QuadState,
    plan: ControlPlan,
    config: PiConfig,
    model,
    cost_model,
    cycle_index: int = 0,
    engine: RolloutEngine | None = None,
) -> ControlPlan:
    """Run iterations_per_step rounds of sample / evaluate / update."""
    if engine is None:
        engine = RolloutEngine(model, config)
    for iteration in range(config.iterations_per_step):
        noise = sample_noise(config, cycle_index, iteration)
        dyn = (
            sample_dynamics_noise(config, cycle_index, iteration)
            if engine.use_spread
            else None
        )
        batch = engine.evaluate(state, plan, noise, cost_model, dyn)
        plan = path_integral_update(plan, batch, config.temperature)
    return plan


def receding_horizon_step(
    state: QuadState,
    plan: ControlPlan,
    config: PiConfig,
    model,
    cost_model,
    cycle_index: int = 0,
    engine: RolloutEngine | None = None,
) -> tuple[Control, ControlPlan]:
    """Optimize, return the first control to execute and the carried plan.

    The carried plan is the optimized plan shifted left by one with the
    final slot duplicated from the previous final control.
    """
    optimized = optimize(state, plan, config, model, cost_model, cycle_index, engine)
    return optimized.control_at(0), optimized.shifted()
