"""Exact flow maps for the controlled linear system x' = Ax + Bu on a uniform grid.

Controls are piecewise constant on grid intervals, which makes the
variation-of-constants step exact per interval: the interval propagators are
computed once from an augmented matrix exponential and reused everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg

from .errors import InvalidArgumentError

__all__ = [
    "LinearDynamics",
    "TimeGrid",
    "Path",
    "StepOperator",
    "matrix_exponential",
    "integrate_path",
    "reference_ensemble",
    "velocity_l2_sq",
    "node_velocities",
]


def matrix_exponential(matrix: np.ndarray, t: float = 1.0) -> np.ndarray:
    """Return exp(t * matrix) by scaling-and-squaring (Pade approximant).

    Raises InvalidArgumentError on non-finite input.
    """
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InvalidArgumentError(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)) or not np.isfinite(t):
        raise InvalidArgumentError("matrix exponential requires finite entries")
    return scipy.linalg.expm(t * m)


@dataclass(frozen=True)
class LinearDynamics:
    """State equation x' = drift @ x + gain @ u with horizon T."""

    drift: np.ndarray  # (d, d)
    gain: np.ndarray  # (d, k)
    horizon: float

    def __post_init__(self):
        drift = np.atleast_2d(np.asarray(self.drift, dtype=float))
        gain = np.asarray(self.gain, dtype=float)
        if gain.ndim == 1:
            gain = gain.reshape(-1, 1)
        if drift.shape[0] != drift.shape[1]:
            raise InvalidArgumentError(f"drift matrix must be square, got {drift.shape}")
        if gain.shape[0] != drift.shape[0]:
            raise InvalidArgumentError(
                f"gain rows ({gain.shape[0]}) must match state dimension ({drift.shape[0]})"
            )
        if not (np.all(np.isfinite(drift)) and np.all(np.isfinite(gain))):
            raise InvalidArgumentError("dynamics matrices must be finite")
        if not (np.isfinite(self.horizon) and self.horizon > 0):
            raise InvalidArgumentError(f"horizon must be positive, got {self.horizon}")
        drift.setflags(write=False)
        gain.setflags(write=False)
        object.__setattr__(self, "drift", drift)
        object.__setattr__(self, "gain", gain)

    @property
    def dim_state(self) -> int:
        return self.drift.shape[0]

    @property
    def dim_control(self) -> int:
        return self.gain.shape[1]

    def drift_norm(self) -> float:
        """Operator 2-norm of the drift matrix."""
        return float(np.linalg.norm(self.drift, 2))

    def gain_norm(self) -> float:
        return float(np.linalg.norm(self.gain, 2))


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, T] with `intervals` steps."""

    horizon: float
    intervals: int

    def __post_init__(self):
        if self.intervals < 2:
            raise InvalidArgumentError(f"need at least 2 intervals, got {self.intervals}")
        if not (np.isfinite(self.horizon) and self.horizon > 0):
            raise InvalidArgumentError(f"horizon must be positive, got {self.horizon}")

    @property
    def dt(self) -> float:
        return self.horizon / self.intervals

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.intervals + 1)

    def time(self, i: int) -> float:
        return i * self.dt


@lru_cache(maxsize=64)
def _step_matrices(drift_bytes, gain_bytes, d, k, dt):
    drift = np.frombuffer(drift_bytes, dtype=float).reshape(d, d)
    gain = np.frombuffer(gain_bytes, dtype=float).reshape(d, k)
    # exp(dt*[[A, B], [0, 0]]) = [[e^{dt A}, (int_0^dt e^{sA} ds) B], [0, I]]
    block = np.zeros((d + k, d + k))
    block[:d, :d] = drift
    block[:d, d:] = gain
    full = matrix_exponential(block, dt)
    state_map = full[:d, :d].copy()
    control_map = full[:d, d:].copy()
    state_map.setflags(write=False)
    control_map.setflags(write=False)
    return state_map, control_map


@dataclass(frozen=True)
class StepOperator:
    """Precomputed one-interval propagators: x_next = state_map @ x + control_map @ u."""

    state_map: np.ndarray  # e^{dt A}
    control_map: np.ndarray  # (int_0^dt e^{sA} ds) B
    dt: float

    @classmethod
    def build(cls, dyn: LinearDynamics, grid: TimeGrid) -> "StepOperator":
        state_map, control_map = _step_matrices(
            dyn.drift.tobytes(), dyn.gain.tobytes(), dyn.dim_state, dyn.dim_control, grid.dt
        )
        return cls(state_map=state_map, control_map=control_map, dt=grid.dt)


@dataclass(frozen=True)
class Path:
    """Discrete admissible trajectory: states at nodes, piecewise-constant controls.

    `start_index` is the grid node the path starts from; ensemble paths start at 0.
    """

    states: np.ndarray  # (M+1, d)
    controls: np.ndarray  # (M, k)
    grid: TimeGrid
    start_index: int = 0

    def __post_init__(self):
        states = np.atleast_2d(np.asarray(self.states, dtype=float))
        controls = np.asarray(self.controls, dtype=float)
        if controls.ndim == 1:
            controls = controls.reshape(-1, 1)
        if states.shape[0] != controls.shape[0] + 1:
            raise InvalidArgumentError(
                f"{states.shape[0]} states need {states.shape[0] - 1} controls, got {controls.shape[0]}"
            )
        if self.start_index + controls.shape[0] != self.grid.intervals:
            raise InvalidArgumentError("path does not reach the final grid node")
        states.setflags(write=False)
        controls.setflags(write=False)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "controls", controls)

    @property
    def start(self) -> np.ndarray:
        return self.states[0]

    @property
    def end(self) -> np.ndarray:
        return self.states[-1]

    def state_distance(self, other: "Path") -> float:
        """Max-norm distance between the node states of two paths on the same range."""
        if self.states.shape != other.states.shape:
            return float("inf")
        return float(np.max(np.abs(self.states - other.states)))


def integrate_path(
    dyn: LinearDynamics,
    grid: TimeGrid,
    start_index: int,
    x0: np.ndarray,
    controls: np.ndarray,
) -> Path:
    """Propagate x0 from node `start_index` to the final node with exact interval steps."""
    if not 0 <= start_index < grid.intervals:
        raise InvalidArgumentError(f"start index {start_index} outside 0..{grid.intervals - 1}")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    controls = np.asarray(controls, dtype=float)
    if controls.ndim == 1:
        controls = controls.reshape(-1, dyn.dim_control)
    remaining = grid.intervals - start_index
    if controls.shape != (remaining, dyn.dim_control):
        raise InvalidArgumentError(
            f"expected controls of shape {(remaining, dyn.dim_control)}, got {controls.shape}"
        )
    step = StepOperator.build(dyn, grid)
    states = np.empty((remaining + 1, dyn.dim_state))
    states[0] = x0
    for i in range(remaining):
        states[i + 1] = step.state_map @ states[i] + step.control_map @ controls[i]
    return Path(states=states, controls=controls, grid=grid, start_index=start_index)


def node_velocities(dyn: LinearDynamics, path: Path) -> tuple[np.ndarray, np.ndarray]:
    """Velocities Ax + Bu at interval endpoints, one pair per interval.

    Returns (left, right) arrays of shape (M, d): the velocity at the start and
    end of each interval under that interval's control.
    """
    ax = path.states @ dyn.drift.T
    bu = path.controls @ dyn.gain.T
    return ax[:-1] + bu, ax[1:] + bu


def velocity_l2_sq(dyn: LinearDynamics, path: Path) -> float:
    """Trapezoidal quadrature of the squared L2 velocity norm along the path."""
    left, right = node_velocities(dyn, path)
    per_interval = 0.5 * (np.sum(left**2, axis=1) + np.sum(right**2, axis=1))
    return float(path.grid.dt * np.sum(per_interval))


def reference_ensemble(dyn: LinearDynamics, grid: TimeGrid, m0):
    """Zero-control ensemble: one homogeneous path e^{tA}x per particle of m0.

    Its time-0 marginal is m0 exactly and its velocity moment is bounded by
    (|A| e^{T|A|})^alpha * [m0]_alpha.
    """
    from .measures import TrajectoryEnsemble  # deferred: measures imports this module

    zero = np.zeros((grid.intervals, dyn.dim_control))
    paths = tuple(
        integrate_path(dyn, grid, 0, point, zero) for point in m0.points
    )
    return TrajectoryEnsemble(paths=paths, weights=m0.weights, grid=grid)
