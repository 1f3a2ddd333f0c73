"""Synthetic scenes, trajectories and a rotary-LiDAR ray caster.

The simulator is the ground-truth oracle for the end-to-end tests: every
return is an exact ray/surface intersection expressed in the sensor frame at
the point's own firing time, so ego-motion distortion is present in the data
exactly as a spinning sensor would produce it.

Edges are idealised wires: a beam passing within half a column spacing of a
segment returns the closest point *on the segment*, which keeps noiseless
edge returns exactly collinear.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .geom import RigidTransform, exp_so3, exp_so3_batch, rotate_batch
from .motion_model import MotionState
from .scan_io import Scan


def plane_axes(normal: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic in-plane axes (u, w) for a unit normal.

    u is horizontal whenever the plane is not horizontal itself; for a
    horizontal plane u = -y and w = x (up to the sign of the normal).
    """
    n = np.asarray(normal, dtype=float)
    ref = np.array([0.0, 0.0, 1.0]) if abs(n[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(ref, n)
    u /= np.linalg.norm(u)
    w = np.cross(n, u)
    return u, w


@dataclass(frozen=True)
class PlaneRecord:
    point: np.ndarray
    normal: np.ndarray
    half_extents: tuple[float, float]

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        object.__setattr__(self, "normal", n / np.linalg.norm(n))
        object.__setattr__(self, "point", np.asarray(self.point, dtype=float))
        object.__setattr__(self, "half_extents", (float(self.half_extents[0]), float(self.half_extents[1])))

    def corners(self) -> np.ndarray:
        u, w = plane_axes(self.normal)
        a, b = self.half_extents
        return np.array([self.point + su * a * u + sw * b * w for su in (-1, 1) for sw in (-1, 1)])


@dataclass(frozen=True)
class EdgeRecord:
    point: np.ndarray
    direction: np.ndarray
    half_length: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        object.__setattr__(self, "direction", d / np.linalg.norm(d))
        object.__setattr__(self, "point", np.asarray(self.point, dtype=float))

    def endpoints(self) -> np.ndarray:
        return np.array([self.point - self.half_length * self.direction, self.point + self.half_length * self.direction])


@dataclass
class SyntheticWorld:
    planes: list[PlaneRecord] = field(default_factory=list)
    edges: list[EdgeRecord] = field(default_factory=list)
    seed: int = 0


@dataclass
class WorldConfig:
    n_planes: int = 10
    n_edges: int = 5
    bounds_min: tuple[float, float, float] = (-30.0, -30.0, 0.0)
    bounds_max: tuple[float, float, float] = (30.0, 30.0, 8.0)
    plane_half_extent: tuple[float, float] = (1.0, 6.0)
    edge_half_length: tuple[float, float] = (0.5, 3.0)


def generate_world(config: WorldConfig, seed: int) -> SyntheticWorld:
    """Random rectangles and segments fully inside the configured box."""
    if config.n_planes < 0 or config.n_edges < 0:
        raise ValueError("counts must be non-negative")
    rng = np.random.default_rng(seed)
    lo, hi = np.array(config.bounds_min, float), np.array(config.bounds_max, float)
    planes = []
    for _ in range(config.n_planes):
        center = rng.uniform(lo, hi)
        normal = rng.normal(size=3)
        normal /= np.linalg.norm(normal)
        u, w = plane_axes(normal)
        a, b = rng.uniform(*config.plane_half_extent, size=2)
        # shrink extents until every corner is inside the box
        room = np.minimum(center - lo, hi - center)
        reach = a * np.abs(u) + b * np.abs(w)
        scale = min(1.0, float(np.min(room / np.maximum(reach, 1e-12))))
        planes.append(PlaneRecord(center, normal, (a * scale, b * scale)))
    edges = []
    for _ in range(config.n_edges):
        center = rng.uniform(lo, hi)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        h = rng.uniform(*config.edge_half_length)
        room = np.minimum(center - lo, hi - center)
        h = min(h, float(np.min(room / np.maximum(np.abs(d), 1e-12))))
        edges.append(EdgeRecord(center, d, h))
    return SyntheticWorld(planes, edges, seed)


@dataclass(frozen=True)
class BeamModel:
    """Rotary sensor: ``columns`` firings per sweep, ``rings`` beams each."""

    columns: int = 1800
    rings: int = 64
    fov_min_deg: float = -22.5
    fov_max_deg: float = 22.5
    min_range: float = 0.5
    max_range: float = 100.0

    def elevations(self) -> np.ndarray:
        return np.deg2rad(np.linspace(self.fov_min_deg, self.fov_max_deg, self.rings))

    def azimuths(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.columns) / self.columns

    def directions(self) -> np.ndarray:
        """Unit beam directions, shape (columns, rings, 3), sensor frame."""
        az = self.azimuths()[:, None]
        el = self.elevations()[None, :]
        return np.stack(
            [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el) * np.ones_like(az)], axis=-1
        )


class Trajectory(Protocol):
    def poses(self, times: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Rotations (N, 3, 3) and positions (N, 3) of the sensor in the world."""


@dataclass
class ConstantVelocityTrajectory:
    """T(t) = T0 [exp((t-t0) w), (t-t0) v]: the motion model realised exactly."""

    start: RigidTransform = field(default_factory=RigidTransform.identity)
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angular_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t0: float = 0.0

    def poses(self, times):
        tau = np.asarray(times, dtype=float) - self.t0
        w = np.asarray(self.angular_velocity, float)
        R = self.start.rotation @ exp_so3_batch(tau[:, None] * w)
        p = self.start.translation + (tau[:, None] * np.asarray(self.velocity, float)) @ self.start.rotation.T
        return R, p

    def pose(self, t: float) -> RigidTransform:
        R, p = self.poses(np.array([t]))
        return RigidTransform(R[0], p[0])

    def state(self, t: float) -> MotionState:
        tau = t - self.t0
        back = exp_so3(-tau * np.asarray(self.angular_velocity, float))
        return MotionState(self.pose(t), back @ self.velocity, back @ self.angular_velocity, t)


class PlanarTrajectory:
    """Ground-vehicle motion from a speed and yaw-rate profile.

    Heading and position are integrated on a fine grid and linearly
    interpolated; the sensor stays at a constant height.
    """

    def __init__(self, speed: Callable, yaw_rate: Callable, duration: float, height: float = 1.8,
                 origin=(0.0, 0.0), heading0: float = 0.0, dt: float = 2e-4):
        self.duration = duration
        n = int(math.ceil(duration / dt)) + 2
        t = np.arange(n) * dt
        rate = np.asarray(yaw_rate(t), float) * np.ones(n)
        spd = np.asarray(speed(t), float) * np.ones(n)
        heading = heading0 + np.concatenate([[0.0], np.cumsum(0.5 * (rate[1:] + rate[:-1]) * dt)])
        vx, vy = spd * np.cos(heading), spd * np.sin(heading)
        x = origin[0] + np.concatenate([[0.0], np.cumsum(0.5 * (vx[1:] + vx[:-1]) * dt)])
        y = origin[1] + np.concatenate([[0.0], np.cumsum(0.5 * (vy[1:] + vy[:-1]) * dt)])
        self._t, self._heading, self._x, self._y = t, heading, x, y
        self.height = height

    def poses(self, times):
        times = np.asarray(times, float)
        th = np.interp(times, self._t, self._heading)
        x = np.interp(times, self._t, self._x)
        y = np.interp(times, self._t, self._y)
        c, s = np.cos(th), np.sin(th)
        R = np.zeros((len(times), 3, 3))
        R[:, 0, 0], R[:, 0, 1], R[:, 1, 0], R[:, 1, 1], R[:, 2, 2] = c, -s, s, c, 1.0
        return R, np.column_stack([x, y, np.full_like(x, self.height)])

    def pose(self, t: float) -> RigidTransform:
        R, p = self.poses(np.array([t]))
        return RigidTransform(R[0], p[0])


def _cast(world: SyntheticWorld, origins: np.ndarray, dirs: np.ndarray, beam: BeamModel, capture: float):
    """Nearest hit per ray. Returns (range, hit point) with inf where nothing is hit."""
    n = len(dirs)
    best = np.full(n, np.inf)
    hit = np.zeros((n, 3))
    for plane in world.planes:
        u, w = plane_axes(plane.normal)
        denom = dirs @ plane.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((plane.point - origins) @ plane.normal) / denom
        ok = (np.abs(denom) > 1e-12) & (t > beam.min_range) & (t < np.minimum(best, beam.max_range))
        if not np.any(ok):
            continue
        idx = np.flatnonzero(ok)
        x = origins[idx] + t[idx, None] * dirs[idx]
        rel = x - plane.point
        a, b = plane.half_extents
        inside = (np.abs(rel @ u) <= a) & (np.abs(rel @ w) <= b)
        idx, x = idx[inside], x[inside]
        best[idx] = t[idx]
        hit[idx] = x
    for edge in world.edges:
        e = edge.direction
        w0 = origins - edge.point
        b = dirs @ e
        d = np.einsum("ij,ij->i", dirs, w0)
        f = w0 @ e
        denom = 1.0 - b * b
        par = denom < 1e-12
        denom = np.where(par, 1.0, denom)
        t = (b * f - d) / denom
        s = (f - b * d) / denom
        on_line = edge.point + s[:, None] * e
        gap = np.linalg.norm(origins + t[:, None] * dirs - on_line, axis=1)
        rng_ = np.linalg.norm(on_line - origins, axis=1)
        ok = (~par) & (np.abs(s) <= edge.half_length) & (t > beam.min_range) & (gap <= capture * t) & (rng_ < best)
        ok &= rng_ < beam.max_range
        best[ok] = rng_[ok]
        hit[ok] = on_line[ok]
    return best, hit


def simulate_scan(
    world: SyntheticWorld,
    trajectory: Trajectory,
    t_start: float,
    sweep_duration: float,
    beam: BeamModel = BeamModel(),
    noise_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
    index: int = 0,
) -> Scan:
    """Ray-cast one sweep along ``trajectory``.

    Column c fires at ``t_start + c * sweep_duration / columns``; returned
    points are in the sensor frame at their firing time.
    """
    col_times = t_start + np.arange(beam.columns) * (sweep_duration / beam.columns)
    R, p = trajectory.poses(col_times)
    local = beam.directions()  # (C, H, 3)
    world_dirs = np.einsum("cij,chj->chi", R, local).reshape(-1, 3)
    origins = np.repeat(p, beam.rings, axis=0)
    capture = 0.5 * 2.0 * np.pi / beam.columns
    rng_, hit = _cast(world, origins, world_dirs, beam, capture)
    ok = np.isfinite(rng_)
    if not np.any(ok):
        raise ValueError("simulated scan has no intersections")
    vec = hit[ok] - origins[ok]
    if noise_sigma > 0:
        if rng is None:
            rng = np.random.default_rng(0)
        r = np.linalg.norm(vec, axis=1)
        noise = rng.normal(0.0, noise_sigma, size=len(r))
        vec = vec * ((r + noise) / r)[:, None]
    Rk = np.repeat(R, beam.rings, axis=0)[ok]
    local_pts = np.einsum("nji,nj->ni", Rk, vec)
    times = np.repeat(col_times, beam.rings)[ok]
    return Scan(index=index, start_time=float(times[0]), points=local_pts, timestamps=times, sweep_duration=sweep_duration)


def simulate_sequence(world, trajectory, n_scans: int, period: float = 0.1, beam: BeamModel = BeamModel(),
                      noise_sigma: float = 0.0, seed: int = 0, t0: float = 0.0):
    """Consecutive sweeps plus ground-truth poses at each scan start."""
    rng = np.random.default_rng(seed)
    scans, gt = [], []
    for k in range(n_scans):
        scan = simulate_scan(world, trajectory, t0 + k * period, period, beam, noise_sigma, rng, index=k)
        scans.append(scan)
        gt.append((scan.start_time, trajectory.pose(scan.start_time)))
    return scans, gt


# --- hand-built scenes -------------------------------------------------------


def _box(center, half, planes: list) -> None:
    """Append the four vertical faces and the top of an axis-aligned box."""
    cx, cy, cz = center
    hx, hy, hz = half
    planes.append(PlaneRecord((cx + hx, cy, cz), (1, 0, 0), (hy, hz)))
    planes.append(PlaneRecord((cx - hx, cy, cz), (-1, 0, 0), (hy, hz)))
    planes.append(PlaneRecord((cx, cy + hy, cz), (0, 1, 0), (hx, hz)))
    planes.append(PlaneRecord((cx, cy - hy, cz), (0, -1, 0), (hx, hz)))
    planes.append(PlaneRecord((cx, cy, cz + hz), (0, 0, 1), (hy, hx)))


def corridor_world(length: float = 80.0, width: float = 8.0, height: float = 5.0, seed: int = 0) -> SyntheticWorld:
    """A straight walled corridor along +x with pillars, recesses and poles."""
    rng = np.random.default_rng(seed)
    planes: list[PlaneRecord] = []
    x0, x1 = -10.0, length + 10.0
    mid = 0.5 * (x0 + x1)
    half_len = 0.5 * (x1 - x0)
    planes.append(PlaneRecord((mid, 0, 0), (0, 0, 1), (width, half_len)))
    planes.append(PlaneRecord((mid, 0, height), (0, 0, -1), (width, half_len)))
    planes.append(PlaneRecord((x0, 0, height / 2), (1, 0, 0), (width, height / 2)))
    planes.append(PlaneRecord((x1, 0, height / 2), (-1, 0, 0), (width, height / 2)))
    # walls in segments; alternate segments are recessed so transverse faces appear
    seg = 6.0
    x = x0
    i = 0
    while x < x1 - 1e-9:
        xe = min(x + seg, x1)
        for side in (-1, 1):
            depth = 0.0 if (i + (side > 0)) % 2 == 0 else 1.0
            y = side * (width / 2 + depth)
            planes.append(PlaneRecord(((x + xe) / 2, y, height / 2), (0, -side, 0), ((xe - x) / 2, height / 2)))
        if xe < x1:
            for side in (-1, 1):
                planes.append(PlaneRecord((xe, side * (width / 2 + 0.5), height / 2), (1, 0, 0), (0.5, height / 2)))
        x = xe
        i += 1
    # pillars standing against the walls
    for px in np.arange(x0 + 4.0, x1 - 2.0, 9.0):
        side = 1 if rng.random() < 0.5 else -1
        _box((px, side * (width / 2 - 0.6), 1.2), (0.4, 0.4, 1.2), planes)
    edges = []
    for px in np.arange(x0 + 7.0, x1, 11.0):
        side = 1 if rng.random() < 0.5 else -1
        edges.append(EdgeRecord((px, side * (width / 2 - 1.2), 2.0), (0, 0, 1), 2.0))
    return SyntheticWorld(planes, edges, seed)


def square_loop_trajectory(side_time: float = 5.0, turn_time: float = 2.0, speed: float = 4.0,
                           laps: float = 1.0, height: float = 1.8) -> PlanarTrajectory:
    """Closed rounded square: straight runs joined by smooth 90-degree left turns."""
    straight = side_time - turn_time

    def yaw_rate(t):
        tau = np.mod(t, side_time) - straight
        rate = (np.pi / 2) / turn_time * (1.0 - np.cos(2.0 * np.pi * tau / turn_time))
        return np.where(tau >= 0, rate, 0.0)

    return PlanarTrajectory(lambda t: speed, yaw_rate, 4 * side_time * laps + 1.0, height)


def square_loop_world(trajectory: PlanarTrajectory, road_half_width: float = 5.0, height: float = 5.0,
                      seed: int = 0) -> SyntheticWorld:
    """Walls lining the outside and inside of the loop traced by ``trajectory``."""
    rng = np.random.default_rng(seed)
    t = np.linspace(0, trajectory.duration, 2000)
    _, p = trajectory.poses(t)
    lo, hi = p[:, :2].min(axis=0), p[:, :2].max(axis=0)
    center = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    planes: list[PlaneRecord] = []
    outer = half + road_half_width
    inner = half - road_half_width
    planes.append(PlaneRecord((center[0], center[1], 0), (0, 0, 1), (outer[1] + 2, outer[0] + 2)))
    for sign in (-1, 1):
        planes.append(PlaneRecord((center[0] + sign * outer[0], center[1], height / 2), (-sign, 0, 0), (outer[1], height / 2)))
        planes.append(PlaneRecord((center[0], center[1] + sign * outer[1], height / 2), (0, -sign, 0), (outer[0], height / 2)))
        planes.append(PlaneRecord((center[0] + sign * inner[0], center[1], height / 2), (sign, 0, 0), (inner[1], height / 2)))
        planes.append(PlaneRecord((center[0], center[1] + sign * inner[1], height / 2), (0, sign, 0), (inner[0], height / 2)))
    # pillars along both walls of every side
    edges = []
    for axis in (0, 1):
        other = 1 - axis
        for s in np.arange(-half[axis] + 3.0, half[axis] - 2.0, 7.0):
            for sign in (-1, 1):
                for wall in (outer[other] - 0.5, inner[other] + 0.5):
                    pos = np.zeros(3)
                    pos[axis] = center[axis] + s + rng.uniform(-1.0, 1.0)
                    pos[other] = center[other] + sign * wall
                    pos[2] = 1.0
                    _box(pos, (0.35, 0.35, 1.0), planes)
            pos = np.zeros(3)
            pos[axis] = center[axis] + s + 3.5
            pos[other] = center[other] + rng.choice([-1, 1]) * (outer[other] - 1.0)
            pos[2] = 2.0
            edges.append(EdgeRecord(pos, (0, 0, 1), 2.0))
    return SyntheticWorld(planes, edges, seed)
