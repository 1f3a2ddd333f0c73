"""Shared fixtures: cached synthetic sequences and the acceptance summary."""

from __future__ import annotations

from collections import defaultdict

import numpy as np
import pytest

from lidar_bao.feature_extract import FeatureConfig
from lidar_bao.geom import RigidTransform, exp_so3
from lidar_bao.motion_model import MotionState
from lidar_bao.pipeline import OdometryConfig
from lidar_bao.synthetic import (
    BeamModel,
    ConstantVelocityTrajectory,
    SyntheticWorld,
    corridor_world,
    plane_axes,
    simulate_sequence,
    square_loop_trajectory,
    square_loop_world,
)

# a quarter-resolution sensor keeps the end-to-end runs short; a 4x1
# thinning lattice on it samples the same cells as the default 8x2 on 64x1800
SMALL_BEAM = BeamModel(columns=900, rings=32)
SMALL_STRIDE = (4, 1)


def small_config(**kw) -> OdometryConfig:
    cfg = OdometryConfig(
        feature=FeatureConfig(alpha=SMALL_BEAM.columns * 10.0, columns=SMALL_BEAM.columns, rings=SMALL_BEAM.rings),
        thin_col_stride=SMALL_STRIDE[0],
        thin_row_stride=SMALL_STRIDE[1],
    )
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


def corridor_trajectory(speed: float = 5.0) -> ConstantVelocityTrajectory:
    return ConstantVelocityTrajectory(RigidTransform(np.eye(3), [0.0, 0.0, 1.8]), np.array([speed, 0.0, 0.0]),
                                      np.zeros(3))


def random_state(rng: np.random.Generator, t: float = 0.0, scale: float = 1.0) -> MotionState:
    return MotionState(
        RigidTransform(exp_so3(rng.normal(size=3) * 0.5), rng.normal(size=3) * 3.0),
        rng.normal(size=3) * scale,
        rng.normal(size=3) * 0.3 * scale,
        t,
    )


def surface_distance(world: SyntheticWorld, pts: np.ndarray) -> np.ndarray:
    """Distance from each point to the nearest bounded plane or segment."""
    best = np.full(len(pts), np.inf)
    for pl in world.planes:
        u, w = plane_axes(pl.normal)
        rel = pts - pl.point
        a, b = pl.half_extents
        cu = np.clip(rel @ u, -a, a)
        cw = np.clip(rel @ w, -b, b)
        closest = pl.point + cu[:, None] * u + cw[:, None] * w
        best = np.minimum(best, np.linalg.norm(pts - closest, axis=1))
    for e in world.edges:
        s = np.clip((pts - e.point) @ e.direction, -e.half_length, e.half_length)
        best = np.minimum(best, np.linalg.norm(pts - (e.point + s[:, None] * e.direction), axis=1))
    return best


_SEQUENCES: dict = {}


def cached_sequence(name: str, n: int, noise: float = 0.0, beam: BeamModel = SMALL_BEAM):
    """Simulated (scans, ground truth), computed once per session."""
    key = (name, n, noise, beam)
    if key not in _SEQUENCES:
        if name == "corridor":
            world, traj = corridor_world(), corridor_trajectory()
        elif name == "static":
            world, traj = corridor_world(), corridor_trajectory(speed=0.0)
        elif name == "loop":
            traj = square_loop_trajectory()
            world = square_loop_world(traj)
        else:
            raise KeyError(name)
        _SEQUENCES[key] = simulate_sequence(world, traj, n, beam=beam, noise_sigma=noise, seed=1)
    return _SEQUENCES[key]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# --- acceptance bookkeeping -------------------------------------------------

_OUTCOMES: dict[int, list[bool]] = defaultdict(list)
_TITLES: dict[int, str] = {}
_DETAILS: dict[int, list[str]] = defaultdict(list)


@pytest.fixture
def acceptance_note(request):
    """Attach a measured figure to the criterion of the calling test."""
    marker = request.node.get_closest_marker("acceptance")

    def note(text: str) -> None:
        _DETAILS[marker.args[0]].append(text)

    return note


def pytest_collection_modifyitems(config, items):
    for item in items:
        m = item.get_closest_marker("acceptance")
        if m is not None:
            _TITLES[m.args[0]] = m.args[1]


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("acceptance")
    if m is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _OUTCOMES[m.args[0]].append(rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _TITLES:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for k in sorted(_TITLES):
        runs = _OUTCOMES.get(k, [])
        status = "NOT RUN" if not runs else ("PASS" if all(runs) else "FAIL")
        tr.write_line(f"criterion {k} ({_TITLES[k]}): {status}")
        for d in _DETAILS.get(k, []):
            tr.write_line(f"    {d}")
