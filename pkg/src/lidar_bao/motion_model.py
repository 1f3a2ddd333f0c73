"""Constant-velocity de-skew and next-scan state prediction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import RigidTransform, compose, exp_so3, rotate_batch, rotate_scaled


@dataclass(frozen=True)
class MotionState:
    """Pose of a scan in the world plus its body-frame velocities.

    ``linear_velocity`` and ``angular_velocity`` are expressed in the frame of
    the scan itself; ``start_time`` is the timestamp of the scan's first point.
    """

    transform: RigidTransform
    linear_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angular_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    start_time: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.linear_velocity, dtype=float).reshape(3)
        w = np.asarray(self.angular_velocity, dtype=float).reshape(3)
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(w)) and np.isfinite(self.start_time)):
            raise ValueError("MotionState fields must be finite")
        object.__setattr__(self, "linear_velocity", v)
        object.__setattr__(self, "angular_velocity", w)
        object.__setattr__(self, "start_time", float(self.start_time))

    @classmethod
    def bootstrap(cls, start_time: float) -> "MotionState":
        """Identity pose at rest: the state assumed for the very first scan."""
        return cls(RigidTransform.identity(), np.zeros(3), np.zeros(3), start_time)

    @property
    def rotation(self) -> np.ndarray:
        return self.transform.rotation

    @property
    def position(self) -> np.ndarray:
        return self.transform.translation


def compensate_point(p, t_i: float, state: MotionState) -> np.ndarray:
    """Move a raw point captured at ``t_i`` into the frame at scan start."""
    tau = t_i - state.start_time
    if tau < 0:
        raise ValueError(f"point time {t_i} precedes scan start {state.start_time}")
    return exp_so3(tau * state.angular_velocity) @ np.asarray(p, dtype=float) + tau * state.linear_velocity


def compensate_points(points: np.ndarray, times: np.ndarray, velocity, angular_velocity, start_time: float) -> np.ndarray:
    """Vectorised :func:`compensate_point` for (N, 3) points and (N,) times."""
    tau = np.asarray(times, dtype=float) - start_time
    if tau.size and tau.min() < -1e-12:
        raise ValueError("point timestamps precede scan start")
    w = np.asarray(angular_velocity, dtype=float)
    v = np.asarray(velocity, dtype=float)
    points = np.asarray(points, dtype=float)
    if not np.any(w):
        return points + tau[:, None] * v
    return rotate_scaled(w, tau, points) + tau[:, None] * v


def to_world(state: MotionState, p_compensated) -> np.ndarray:
    return state.transform.apply(p_compensated)


def predict_next_state(state: MotionState, t_next: float) -> MotionState:
    dt = t_next - state.start_time
    if dt < 0:
        raise ValueError(f"prediction time {t_next} is before {state.start_time}")
    w, v = state.angular_velocity, state.linear_velocity
    step = RigidTransform(exp_so3(dt * w), dt * v)
    back = exp_so3(-dt * w)
    return MotionState(compose(state.transform, step), back @ v, back @ w, t_next)
