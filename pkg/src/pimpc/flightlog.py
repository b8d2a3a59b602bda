"""Delimited flight-log files: training data and trial trajectories.

One row per executed timestep.  Logged accelerations are the finite
difference of velocity over dt, so with Euler ground truth they equal the
acceleration function evaluated at that row's state and command.  Floats
are written with repr, which round-trips float64 exactly and keeps logs
byte-stable across identical runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

BASE_COLUMNS = [
    "t", "x", "y", "z", "vx", "vy", "vz", "roll", "pitch", "yaw",
    "p", "q", "r", "cmd_p", "cmd_q", "cmd_r", "thrust", "ax", "ay", "az",
]
TRIAL_COLUMNS = BASE_COLUMNS + [
    "active_waypoint", "q_cost", "plan_horizon_cost",
    "lwpr_var_ax", "lwpr_var_ay", "lwpr_var_az",
]
DELIM = ","


class LogFormatError(ValueError):
    pass


def write_log(path, columns: list[str], rows: NDArray) -> None:
    """Write a table of float64 rows under the given header."""
    rows = np.asarray(rows, float)
    if rows.ndim != 2 or rows.shape[1] != len(columns):
        raise ValueError("rows must be (n, len(columns))")
    with open(path, "w") as fh:
        fh.write(DELIM.join(columns) + "\n")
        for row in rows:
            fh.write(DELIM.join(repr(float(v)) for v in row) + "\n")


def read_log(path) -> dict[str, NDArray[np.float64]]:
    """Read a delimited log into {column: array}; malformed rows raise."""
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().strip()
        if not header:
            raise LogFormatError(f"{path}: empty file")
        columns = header.split(DELIM)
        data = [[] for _ in columns]
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split(DELIM)
            if len(parts) != len(columns):
                raise LogFormatError(
                    f"{path}:{lineno}: expected {len(columns)} fields, got {len(parts)}"
                )
            for store, text in zip(data, parts):
                try:
                    store.append(float(text))
                except ValueError as e:
                    raise LogFormatError(f"{path}:{lineno}: {e}") from e
    return {c: np.array(v) for c, v in zip(columns, data)}


@dataclass
class SampleBatch:
    """Training samples extracted from one or more flight logs."""

    inputs: NDArray[np.float64]    # (n, 4): roll, pitch, yaw, thrust
    targets: NDArray[np.float64]   # (n, 3): ax, ay, az
    rejected: list[tuple[str, int]]  # (path, line number) of dropped rows


TRAIN_INPUT_COLS = ["roll", "pitch", "yaw", "thrust"]
TRAIN_TARGET_COLS = ["ax", "ay", "az"]


def ingest_logs(paths) -> SampleBatch:
    """Extract (attitude+thrust -> acceleration) samples from flight logs.

    Rows with non-finite values in any used column are rejected and
    reported with their line numbers.  A missing column is a format
    error naming that column.
    """
    inputs, targets, rejected = [], [], []
    for path in paths:
        table = read_log(path)
        for col in TRAIN_INPUT_COLS + TRAIN_TARGET_COLS:
            if col not in table:
                raise LogFormatError(f"{path}: missing column '{col}'")
        x = np.column_stack([table[c] for c in TRAIN_INPUT_COLS])
        y = np.column_stack([table[c] for c in TRAIN_TARGET_COLS])
        good = np.all(np.isfinite(x), axis=1) & np.all(np.isfinite(y), axis=1)
        inputs.append(x[good])
        targets.append(y[good])
        rejected.extend(
            (str(path), int(i) + 2) for i in np.flatnonzero(~good)
        )
    if not inputs:
        raise ValueError("no input logs given")
    return SampleBatch(
        inputs=np.concatenate(inputs),
        targets=np.concatenate(targets),
        rejected=rejected,
    )


def flight_rows(
    times, states, commands, next_velocities, dt: float
) -> NDArray[np.float64]:
    """Assemble BASE_COLUMNS rows from executed steps.

    states: (n, 12) state before each step, commands: (n, 4) executed
    command, next_velocities: (n, 3) velocity after each step (for the
    finite-difference acceleration).
    """
    states = np.asarray(states, float)
    commands = np.asarray(commands, float)
    accel = (np.asarray(next_velocities, float) - states[:, 3:6]) / dt
    return np.column_stack([np.asarray(times, float), states, commands, accel])
