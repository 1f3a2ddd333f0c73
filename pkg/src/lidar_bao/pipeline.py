"""Per-scan odometry driver, trajectory evaluation and dataset runs."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .ba_core import BAConfig, LandmarkView, SlidingWindow, marginalize_scan, optimize_window
from .feature_extract import FeatureConfig, extract_features
from .geom import RigidTransform
from .landmark_map import (
    LandmarkConfig,
    LandmarkMap,
    associate,
    check_center_drift,
    prune_small_planes,
    refresh_geometry,
    reject_outliers,
    update_observation_counts,
)
from .motion_model import MotionState, predict_next_state
from .scan_io import Scan, list_scan_files, read_scan_file, read_trajectory, write_trajectory

log = logging.getLogger(__name__)


@dataclass
class OdometryConfig:
    feature: FeatureConfig = field(default_factory=FeatureConfig)
    landmark: LandmarkConfig = field(default_factory=LandmarkConfig)
    ba: BAConfig = field(default_factory=BAConfig)
    # lattice thinning of feature clusters before association
    thin_col_stride: int = 8
    thin_row_stride: int = 2
    report_timing: bool = False
    dataset: str | None = None
    out: str | None = None
    report: str | None = None
    gt: str | None = None
    trace: str | None = None
    seed: int = 0

    def validate(self) -> None:
        if self.ba.window_size < 2:
            raise ValueError("window_size must be >= 2")
        f = self.feature
        for name in ("plane_threshold", "edge_threshold", "depth_gap", "alpha"):
            if getattr(f, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.landmark.radius_min <= 0 or self.landmark.radius_max < self.landmark.radius_min:
            raise ValueError("radius_clamp must satisfy 0 < min <= max")
        if self.thin_col_stride < 1 or self.thin_row_stride < 1:
            raise ValueError("thinning strides must be >= 1")


_SECTIONS = ("feature", "landmark", "ba")
_ALIASES = {
    "weights.position": ("ba", "weight_position"),
    "weights.rotation": ("ba", "weight_rotation"),
    "weights.angular": ("ba", "weight_angular"),
    "weights.velocity": ("ba", "weight_velocity"),
}


def _key_table() -> dict[str, tuple[str | None, str, type]]:
    table: dict[str, tuple[str | None, str, type]] = {}
    for sec, cls in zip(_SECTIONS, (FeatureConfig, LandmarkConfig, BAConfig)):
        for f in dataclasses.fields(cls):
            table[f.name] = (sec, f.name, type(f.default))
    for f in dataclasses.fields(OdometryConfig):
        if f.name not in _SECTIONS:
            kind = type(f.default) if f.default is not None else str
            table[f.name] = (None, f.name, kind)
    for k, (sec, name) in _ALIASES.items():
        table[k] = (sec, name, float)
    table.pop("window_size")
    table["window_size"] = ("ba", "window_size", int)
    return table


def _convert(value: str, kind: type):
    if kind is bool:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return kind(value)


def parse_config(text: str, base: OdometryConfig | None = None) -> OdometryConfig:
    """Read ``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    cfg = base or OdometryConfig()
    table = _key_table()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "radius_clamp":
            lo, hi = (float(v) for v in value.replace(",", " ").split())
            cfg.landmark.radius_min, cfg.landmark.radius_max = lo, hi
            continue
        if key not in table:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        sec, name, kind = table[key]
        try:
            val = _convert(value, kind)
        except ValueError as exc:
            raise ValueError(f"config line {lineno}: bad value for {key}: {exc}") from None
        setattr(cfg if sec is None else getattr(cfg, sec), name, val)
    cfg.validate()
    return cfg


def load_config(path) -> OdometryConfig:
    return parse_config(Path(path).read_text())


@dataclass
class ScanRecord:
    index: int
    time: float
    time_ms: float
    cost_final: float
    landmarks_active: int
    created: int
    deleted: int
    lm_iters: int
    converged: bool = True
    stage_ms: dict[str, float] = field(default_factory=dict)


@dataclass
class RunReport:
    records: list[ScanRecord] = field(default_factory=list)
    trajectory: list[tuple[float, RigidTransform]] = field(default_factory=list)
    ate: float | None = None

    @property
    def mean_time_ms(self) -> float:
        return float(np.mean([r.time_ms for r in self.records])) if self.records else 0.0

    @property
    def mean_stage_ms(self) -> dict[str, float]:
        names = [k for r in self.records[:1] for k in r.stage_ms]
        return {k: float(np.mean([r.stage_ms.get(k, 0.0) for r in self.records])) for k in names}

    def table(self, with_timing: bool = False) -> str:
        rows = ["# index time_ms cost_final landmarks_active created deleted lm_iters"]
        for r in self.records:
            t = f"{r.time_ms:.3f}" if with_timing else "-"
            rows.append(f"{r.index} {t} {r.cost_final:.9e} {r.landmarks_active} {r.created} {r.deleted} {r.lm_iters}")
        if self.ate is not None:
            rows.append(f"# ate_rmse {self.ate:.6f}")
        return "\n".join(rows) + "\n"


class OdometryEngine:
    """Holds the map, the sliding window and the running estimate."""

    def __init__(self, config: OdometryConfig | None = None):
        self.cfg = config or OdometryConfig()
        self.cfg.validate()
        self.map = LandmarkMap()
        self.window = SlidingWindow(self.cfg.ba.window_size)
        self.report = RunReport()
        self.cost_trace: list[tuple[int, int, float]] = []
        self.stage = "idle"
        self._last_index: int | None = None
        self._last_time: float | None = None

    # scans whose state is still free, by id
    def _window_states(self) -> dict[int, MotionState]:
        return dict(zip(self.window.scan_ids, self.window.states))

    def _state_of(self, sid: int) -> MotionState | None:
        if sid in self.window.fixed_poses:
            return self.window.fixed_poses[sid]
        if sid in self.window.scan_ids:
            return self.window.states[self.window.scan_ids.index(sid)]
        return None

    def process_scan(self, scan: Scan) -> MotionState:
        self.stage = "idle"
        if self._last_time is not None and (scan.start_time <= self._last_time or scan.index <= self._last_index):
            raise ValueError(f"scan {scan.index} at t={scan.start_time} arrives out of order")
        t0 = time.perf_counter()
        cfg = self.cfg
        stage_ms: dict[str, float] = {}
        self._stage_clock = t0

        self._enter("predict", stage_ms)
        if self.window.states:
            predicted = predict_next_state(self.window.states[-1], scan.start_time)
        else:
            predicted = MotionState.bootstrap(scan.start_time)

        self._enter("extract", stage_ms)
        clusters = extract_features(scan, predicted, cfg.feature, stride=(cfg.thin_col_stride, cfg.thin_row_stride))
        clusters = [c for c in clusters if len(c)]

        self._enter("associate", stage_ms)
        lc = cfg.landmark
        n_seen = len(self.report.records)
        gate = lc.bootstrap_gate if 0 < n_seen <= lc.bootstrap_scans else lc.assoc_gate
        assoc = associate(self.map, clusters, predicted, scan.index, lc, gate=gate)
        self.window.push(scan.index, predicted)

        self._enter("optimize", stage_ms)
        cost, iters, converged = 0.0, 0, True
        if len(self.window) >= 2:
            views = [LandmarkView(lm.id, lm.category, self.map.marginal_of(lm.id), lm.points_by_scan)
                     for _, lm in sorted(self.map.landmarks.items())]
            res = optimize_window(views, self.window, cfg.ba)
            self.window.states = list(res.states)
            cost, iters, converged = (res.cost_trace[-1] if res.cost_trace else 0.0), res.iterations, res.converged
            self.cost_trace.extend((scan.index, i, c) for i, c in enumerate(res.cost_trace))

        self._enter("maintain", stage_ms)
        refresh_geometry(self.map, self._window_states(), self._state_of)
        reject_outliers(self.map, self._window_states(), lc.assoc_gate)
        # a landmark whose every new point was rejected was not really tracked
        assoc.tracked = [lid for lid in assoc.tracked if scan.index in self.map.landmarks[lid].points_by_scan]
        assoc.created = [lid for lid in assoc.created if scan.index in self.map.landmarks[lid].points_by_scan]
        deleted = update_observation_counts(self.map, assoc)
        for lid in sorted(self.map.landmarks):
            lm = self.map.landmarks[lid]
            if lm.creation_scan in self.window.scan_ids:
                if check_center_drift(self.map, lid, self._state_of(lm.creation_scan), lc.drift_factor) == "delete":
                    deleted.append(lid)
        deleted += prune_small_planes(self.map, scan.index, lc.min_plane_points, lc.min_plane_age)

        self._enter("marginalize", stage_ms)
        if self.window.full:
            sid, st = self.window.pop_oldest()
            pts = {lid: lm.points_by_scan[sid] for lid, lm in sorted(self.map.landmarks.items())
                   if sid in lm.points_by_scan}
            marginalize_scan(self.map.marginal, st, pts)
        refresh_geometry(self.map, self._window_states(), self._state_of)

        self._enter("idle", stage_ms)
        newest = self.window.states[-1]
        elapsed = (time.perf_counter() - t0) * 1e3
        self.report.records.append(ScanRecord(
            scan.index, scan.start_time, elapsed, cost, len(self.map), len(assoc.created), len(deleted), iters,
            converged, stage_ms,
        ))
        self._last_index, self._last_time = scan.index, scan.start_time
        return newest

    def _enter(self, stage: str, stage_ms: dict[str, float]) -> None:
        now = time.perf_counter()
        if self.stage != "idle":
            stage_ms[self.stage] = (now - self._stage_clock) * 1e3
        self.stage, self._stage_clock = stage, now

    def trajectory(self) -> list[tuple[float, RigidTransform]]:
        """Best current estimate for every processed scan, in time order."""
        states = dict(self.window.fixed_poses)
        states.update(self._window_states())
        return [(states[k].start_time, states[k].transform) for k in sorted(states)]


# --- evaluation ---------------------------------------------------------------


def associate_by_time(est: Sequence[tuple[float, RigidTransform]], gt: Sequence[tuple[float, RigidTransform]],
                      tolerance: float | None = None) -> list[tuple[int, int]]:
    t_gt = np.array([t for t, _ in gt])
    if len(t_gt) == 0:
        return []
    if tolerance is None:
        tolerance = 0.5 * float(np.median(np.diff(t_gt))) if len(t_gt) > 1 else 1e-6
    order = np.argsort(t_gt)
    ts = t_gt[order]
    pairs = []
    for i, (t, _) in enumerate(est):
        k = int(np.searchsorted(ts, t))
        best = None
        for j in (k - 1, k):
            if 0 <= j < len(ts) and (best is None or abs(ts[j] - t) < abs(ts[best] - t)):
                best = j
        if best is not None and abs(ts[best] - t) <= tolerance:
            pairs.append((i, int(order[best])))
    return pairs


def align_rigid(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """R, t minimising sum |R src + t - dst|^2 (scale fixed to one)."""
    ms, md = src.mean(axis=0), dst.mean(axis=0)
    H = (src - ms).T @ (dst - md)
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ D @ U.T
    return R, md - R @ ms


def ate_rmse(estimated, ground_truth, tolerance: float | None = None) -> float:
    pairs = associate_by_time(estimated, ground_truth, tolerance)
    if len(pairs) < 2:
        raise ValueError(f"need at least 2 time-associated poses, got {len(pairs)}")
    src = np.array([estimated[i][1].translation for i, _ in pairs])
    dst = np.array([ground_truth[j][1].translation for _, j in pairs])
    R, t = align_rigid(src, dst)
    err = src @ R.T + t - dst
    return float(np.sqrt(np.mean(np.sum(err ** 2, axis=1))))


# --- dataset runs -------------------------------------------------------------


def dataset_scan_files(dataset) -> list[Path]:
    root = Path(dataset)
    scans_dir = root / "scans"
    files = list_scan_files(scans_dir if scans_dir.is_dir() else root)
    return [p for p in files if p.suffix == ".txt" and p.name != "groundtruth.txt"]


def run_scans(scans: Sequence[Scan], config: OdometryConfig | None = None) -> tuple[OdometryEngine, RunReport]:
    engine = OdometryEngine(config)
    for scan in scans:
        engine.process_scan(scan)
    engine.report.trajectory = engine.trajectory()
    return engine, engine.report


def run_dataset(config: OdometryConfig) -> RunReport:
    if config.dataset is None:
        raise ValueError("config has no dataset path")
    files = dataset_scan_files(config.dataset)
    if not files:
        raise FileNotFoundError(f"no scans found in {config.dataset}")
    engine = OdometryEngine(config)
    for i, path in enumerate(files):
        engine.stage = "read"
        try:
            scan = read_scan_file(path, index=i)
            engine.process_scan(scan)
        except Exception as exc:
            raise RuntimeError(f"scan {i} ({path.name}) failed during {engine.stage}: {exc}") from exc
    report = engine.report
    report.trajectory = engine.trajectory()
    if config.gt:
        report.ate = ate_rmse(report.trajectory, read_trajectory(config.gt))
    if config.out:
        write_trajectory(report.trajectory, config.out)
    if config.report:
        Path(config.report).write_text(report.table(config.report_timing))
        timing = "".join(f"{r.index} {r.time_ms:.3f}\n" for r in report.records)
        Path(f"{config.report}.timing").write_text(timing)
    if config.trace:
        Path(config.trace).write_text("".join(f"{s} {i} {c:.9e}\n" for s, i, c in engine.cost_trace))
    return report
