"""Scan and trajectory text formats.

Scan file::

    # lmbao-scan v1 start=<t> duration=<d>
    x y z timestamp
    ...

Trajectory file: one ``timestamp tx ty tz qx qy qz qw`` row per pose.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geom import RigidTransform, quaternion_to_rotation, rotation_to_quaternion

SCAN_MAGIC = "lmbao-scan"
_HEADER_RE = re.compile(r"^#\s*lmbao-scan\s+v1\s+start=(\S+)\s+duration=(\S+)\s*$")


class ScanFormatError(ValueError):
    """Raised for malformed scan or trajectory files."""


@dataclass
class Scan:
    """One LiDAR sweep: raw sensor-frame points with per-point timestamps."""

    index: int
    start_time: float
    points: np.ndarray
    timestamps: np.ndarray
    sweep_duration: float

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        if len(self.points) == 0:
            raise ValueError("scan has no points")
        if len(self.points) != len(self.timestamps):
            raise ValueError("points and timestamps differ in length")
        if np.any(np.diff(self.timestamps) < 0):
            raise ValueError("scan timestamps must be non-decreasing")

    def __len__(self) -> int:
        return len(self.points)


def _fmt(x: float) -> str:
    s = f"{x:.6f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def write_scan_file(scan: Scan, path) -> None:
    path = Path(path)
    rows = np.column_stack([scan.points, scan.timestamps])
    with open(path, "w") as f:
        f.write(f"# {SCAN_MAGIC} v1 start={scan.start_time:.9f} duration={scan.sweep_duration:.9f}\n")
        # nanosecond timestamps keep the firing-time to column mapping exact
        np.savetxt(f, rows, fmt=("%.6f", "%.6f", "%.6f", "%.9f"))


def read_scan_file(path, index: int = 0) -> Scan:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"scan file not found: {path}")
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise ScanFormatError(f"{path}: empty file")
    m = _HEADER_RE.match(lines[0])
    if m is None:
        raise ScanFormatError(f"{path}: row 1: bad header {lines[0]!r}")
    try:
        start, duration = float(m.group(1)), float(m.group(2))
    except ValueError as exc:
        raise ScanFormatError(f"{path}: row 1: bad header values") from exc

    pts, ts = [], []
    for row, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 4:
            raise ScanFormatError(f"{path}: row {row}: expected 4 columns, got {len(fields)}")
        vals = []
        for col, (name, tok) in enumerate(zip(("x", "y", "z", "timestamp"), fields), start=1):
            try:
                vals.append(float(tok))
            except ValueError:
                raise ScanFormatError(f"{path}: row {row}, column {col} ({name}): not a number: {tok!r}") from None
        if not all(np.isfinite(vals)):
            raise ScanFormatError(f"{path}: row {row}: non-finite value")
        pts.append(vals[:3])
        ts.append(vals[3])
    if not pts:
        raise ScanFormatError(f"{path}: scan contains no points")
    ts = np.array(ts)
    if np.any(np.diff(ts) < 0):
        bad = int(np.argmax(np.diff(ts) < 0)) + 3
        raise ScanFormatError(f"{path}: row {bad}: timestamps decrease")
    if abs(ts[0] - start) > 1e-6:
        raise ScanFormatError(f"{path}: header start={start} differs from first point time {ts[0]}")
    return Scan(index=index, start_time=start, points=np.array(pts), timestamps=ts, sweep_duration=duration)


def list_scan_files(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {directory}")
    return sorted(p for p in directory.iterdir() if p.is_file() and not p.name.startswith("."))


def write_scan_directory(scans: Iterable[Scan], directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for scan in scans:
        p = directory / f"scan_{scan.index:06d}.txt"
        write_scan_file(scan, p)
        paths.append(p)
    return paths


def format_pose_line(time: float, pose: RigidTransform) -> str:
    q = rotation_to_quaternion(pose.rotation)
    vals = " ".join(_fmt(x) for x in (*pose.translation, *q))
    return f"{time:.6f} {vals}"


def write_trajectory(states: Sequence[tuple[float, RigidTransform]], path) -> None:
    times = [t for t, _ in states]
    if any(b < a for a, b in zip(times, times[1:])):
        raise ValueError("trajectory states must be time-ordered")
    text = "".join(format_pose_line(t, pose) + "\n" for t, pose in states)
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def read_trajectory(path) -> list[tuple[float, RigidTransform]]:
    out = []
    with open(path) as f:
        for row, line in enumerate(f, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) != 8:
                raise ScanFormatError(f"{path}: row {row}: expected 8 columns")
            try:
                t, x, y, z, qx, qy, qz, qw = map(float, fields)
            except ValueError:
                raise ScanFormatError(f"{path}: row {row}: not numeric") from None
            out.append((t, RigidTransform(quaternion_to_rotation([qx, qy, qz, qw]), [x, y, z])))
    return out
