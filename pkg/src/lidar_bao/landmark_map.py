"""Persistent plane and edge landmarks and their lifecycle.

A landmark is a sphere (center in its creation frame, radius) that collects
raw feature points from every scan that observes it. Its survival is driven
by an observation counter rather than by the optimisation window.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Literal

import numpy as np
from scipy.spatial import cKDTree

from .ba_core import MomentAccumulator, grouped_sums, world_points
from .feature_extract import Category, FeatureCluster
from .motion_model import MotionState


@dataclass
class LandmarkConfig:
    obs_count_init: int = 4
    drift_factor: float = 3.0
    min_plane_points: int = 86
    min_plane_age: int = 5
    radius_min: float = 0.3
    radius_max: float = 3.0
    # point-to-surface gate applied on top of the radius test; <= 0 disables it
    assoc_gate: float = 0.1
    # wider gate while the motion estimate is still settling (first scans)
    bootstrap_gate: float = 1.0
    bootstrap_scans: int = 3
    assoc_angle_deg: float = 20.0
    max_points_per_scan: int = 40
    # landmark seeding: clusters are cut into cubes and each cube must look
    # like a single plane / line; failing cubes are split down to chunk_min
    chunk_size: float = 2.0
    chunk_min: float = 0.5
    min_chunk_points: int = 8
    plane_max_thickness: float = 0.03
    plane_min_extent: float = 0.15
    plane_min_rows: int = 2
    trim_floor: float = 0.01
    min_inlier_fraction: float = 0.8
    edge_max_thickness: float = 0.05
    edge_min_length: float = 0.3


@dataclass
class Landmark:
    id: int
    category: Category
    center: np.ndarray  # creation-scan frame
    radius: float
    initial_global_center: np.ndarray
    observation_count: int
    creation_scan: int
    points_by_scan: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    total_points: int = 0
    # current world-frame estimate used to place the sphere and gate points
    global_center: np.ndarray | None = None
    world_mean: np.ndarray | None = None
    world_axis: np.ndarray | None = None  # plane normal or edge direction

    def add_points(self, scan_index: int, raw: np.ndarray, times: np.ndarray) -> None:
        if scan_index in self.points_by_scan:
            r0, t0 = self.points_by_scan[scan_index]
            raw, times = np.vstack([r0, raw]), np.concatenate([t0, times])
            self.total_points -= len(r0)
        self.points_by_scan[scan_index] = (raw, times)
        self.total_points += len(raw)


@dataclass
class LandmarkMap:
    landmarks: dict[int, Landmark] = field(default_factory=dict)
    marginal: dict[int, MomentAccumulator] = field(default_factory=dict)
    next_id: int = 0

    def __len__(self) -> int:
        return len(self.landmarks)

    def add(self, lm: Landmark) -> Landmark:
        lm.id = self.next_id
        self.next_id += 1
        self.landmarks[lm.id] = lm
        return lm

    def remove(self, lid: int) -> None:
        self.landmarks.pop(lid, None)
        self.marginal.pop(lid, None)

    def marginal_of(self, lid: int) -> MomentAccumulator:
        return self.marginal.get(lid, MomentAccumulator())


@dataclass
class AssociationReport:
    scan_index: int
    tracked: list[int] = field(default_factory=list)
    created: list[int] = field(default_factory=list)
    tracked_points: int = 0


def _even_subset(n: int, cap: int) -> np.ndarray:
    if cap <= 0 or n <= cap:
        return np.arange(n)
    return np.unique(np.round(np.linspace(0, n - 1, cap)).astype(int))


def _principal(points: np.ndarray):
    mean = points.mean(axis=0)
    d = points - mean
    lam, vec = np.linalg.eigh(d.T @ d / len(points))
    return mean, lam, vec


def create_landmark(cluster: FeatureCluster, predicted_state: MotionState, scan_index: int,
                    config: LandmarkConfig | None = None) -> Landmark:
    """New landmark from one cluster; its id is assigned by :meth:`LandmarkMap.add`."""
    cfg = config or LandmarkConfig()
    pts = cluster.compensated
    if len(pts) < 2:
        raise ValueError("cluster too small for a landmark")
    center = pts.mean(axis=0)
    spread = np.linalg.norm(pts - center, axis=1).max()
    if spread <= 1e-12:
        raise ValueError("degenerate cluster: all points identical")
    radius = float(np.clip(spread, cfg.radius_min, cfg.radius_max))
    T = predicted_state.transform
    g = T.apply(center)
    lm = Landmark(-1, cluster.category, center, radius, g, cfg.obs_count_init, scan_index, global_center=g.copy())
    _, lam, vec = _principal(pts)
    lm.world_mean = g.copy()
    axis = vec[:, 0] if cluster.category == Category.PLANE else vec[:, 2]
    lm.world_axis = T.rotation @ axis
    keep = _even_subset(len(pts), cfg.max_points_per_scan)
    lm.add_points(scan_index, cluster.raw[keep], cluster.timestamps[keep])
    return lm


def _group_fit(category: Category, pts: np.ndarray, gid: np.ndarray, G: int):
    """Per-group eigen-fit and each point's distance from its group's plane (or line)."""
    n = np.bincount(gid, minlength=G)
    nn = np.maximum(n, 1)[:, None]
    mean = np.stack([np.bincount(gid, weights=pts[:, a], minlength=G) for a in range(3)], axis=1) / nn
    d = pts - mean[gid]
    cov = np.empty((G, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            cov[:, a, b] = cov[:, b, a] = np.bincount(gid, weights=d[:, a] * d[:, b], minlength=G) / nn[:, 0]
    lam, vec = np.linalg.eigh(cov)
    lam = np.maximum(lam, 0.0)
    if category == Category.PLANE:
        axis = vec[:, :, 0]
        dist = np.abs(np.einsum("ij,ij->i", d, axis[gid]))
    else:
        axis = vec[:, :, 2]
        along = np.einsum("ij,ij->i", d, axis[gid])
        dist = np.linalg.norm(d - along[:, None] * axis[gid], axis=1)
    return n, lam, axis, dist


def _group_median(values: np.ndarray, gid: np.ndarray, G: int) -> np.ndarray:
    order = np.lexsort((values, gid))
    n = np.bincount(gid, minlength=G)
    starts = np.r_[0, np.cumsum(n)[:-1]]
    med = np.zeros(G)
    has = n > 0
    med[has] = values[order][starts[has] + (n[has] - 1) // 2]
    return med


def _evaluate_groups(category: Category, pts: np.ndarray, rows: np.ndarray, gid: np.ndarray, G: int,
                     cfg: LandmarkConfig, trim_rounds: int = 2):
    """Trim each group of off-surface outliers and apply the shape tests.

    Returns (point keep mask, group ok mask, group axis).
    """
    n0 = np.bincount(gid, minlength=G)
    keep = np.ones(len(pts), dtype=bool)
    for _ in range(trim_rounds):
        idx = np.flatnonzero(keep)
        _, _, _, dist = _group_fit(category, pts[idx], gid[idx], G)
        tol = np.maximum(3.0 * 1.4826 * _group_median(dist, gid[idx], G), cfg.trim_floor)
        out = dist > tol[gid[idx]]
        if not out.any():
            break
        keep[idx[out]] = False
    idx = np.flatnonzero(keep)
    n, lam, axis, dist = _group_fit(category, pts[idx], gid[idx], G)
    worst = np.zeros(G)
    np.maximum.at(worst, gid[idx], dist)
    ok = (n >= cfg.min_chunk_points) & (n >= cfg.min_inlier_fraction * n0)
    if category == Category.PLANE:
        ok &= (lam[:, 0] <= cfg.plane_max_thickness ** 2) & (worst <= 3 * cfg.plane_max_thickness)
        ok &= lam[:, 1] >= cfg.plane_min_extent ** 2
        # a single ring traces a curve, which cannot pin down a plane; stray
        # points from other rows do not count
        nrow = int(rows.max()) + 1 if len(rows) else 1
        pair, cnt = np.unique(gid[idx] * nrow + rows[idx], return_counts=True)
        full_rows = np.bincount(pair[cnt >= 3] // nrow, minlength=G)
        ok &= full_rows >= cfg.plane_min_rows
    else:
        ok &= (lam[:, 0] + lam[:, 1] <= cfg.edge_max_thickness ** 2) & (worst <= 3 * cfg.edge_max_thickness)
        ok &= lam[:, 2] >= cfg.edge_min_length ** 2 / 12.0
    return keep, ok, axis


def _split_points(category: Category, pts: np.ndarray, owner: np.ndarray, rows: np.ndarray,
                  cfg: LandmarkConfig) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pieces as (sorted point indices, axis); see :func:`split_cluster`."""
    out = []
    active = np.arange(len(pts))
    size = cfg.chunk_size
    while len(active) and size >= cfg.chunk_min - 1e-12:
        cell = np.floor(pts[active] / size).astype(np.int64)
        cols = np.column_stack([owner[active], cell - cell.min(axis=0)])
        keys = np.ravel_multi_index(cols.T, tuple(cols.max(axis=0) + 1))
        _, gid, counts = np.unique(keys, return_inverse=True, return_counts=True)
        big = counts[gid] >= cfg.min_chunk_points
        active, gid = active[big], gid[big]
        if not len(active):
            break
        _, gid = np.unique(gid, return_inverse=True)
        G = int(gid.max()) + 1
        keep, ok, axis = _evaluate_groups(category, pts[active], rows[active], gid, G, cfg)
        order = np.argsort(gid, kind="stable")
        starts = np.r_[0, np.cumsum(np.bincount(gid, minlength=G))]
        for g in np.flatnonzero(ok):
            sel = order[starts[g]:starts[g + 1]]
            sel = sel[keep[sel]]
            out.append((np.sort(active[sel]), axis[g]))
        active = active[~ok[gid]]
        size /= 2
    return out


def _concat(clusters: list[FeatureCluster]) -> FeatureCluster:
    return FeatureCluster(
        -1, clusters[0].category,
        np.vstack([c.raw for c in clusters]), np.vstack([c.compensated for c in clusters]),
        np.concatenate([c.timestamps for c in clusters]), np.vstack([c.cells for c in clusters]),
    )


def split_cluster(cluster: FeatureCluster, config: LandmarkConfig | None = None) -> list[FeatureCluster]:
    """Cut a cluster into compact pieces that each fit one plane or line.

    Pieces are cubes of ``chunk_size`` in the scan frame. Each cube is
    trimmed of off-surface outliers; if too many points go, or the rest
    fails the shape test, the cube is split into octants, down to
    ``chunk_min``. Trimmed points are dropped.
    """
    cfg = config or LandmarkConfig()
    owner = np.zeros(len(cluster), dtype=np.int64)
    pieces = _split_points(cluster.category, cluster.compensated, owner, cluster.cells[:, 0], cfg)
    return [cluster.subset(idx) for idx, _ in pieces]


def associate(lmap: LandmarkMap, clusters: list[FeatureCluster], predicted_state: MotionState,
              scan_index: int, config: LandmarkConfig | None = None, gate: float | None = None) -> AssociationReport:
    """Attach feature points to existing landmarks, then seed new ones.

    Clusters are first cut into single-surface pieces. Each point joins the
    nearest same-category landmark whose projected center lies within that
    landmark's radius (ties broken by id), provided the point is near the
    landmark's surface and its piece is oriented like the landmark.
    Leftover points of a piece seed a new landmark. ``gate`` overrides the
    configured surface gate.
    """
    cfg = config or LandmarkConfig()
    gate = cfg.assoc_gate if gate is None else gate
    report = AssociationReport(scan_index)
    T = predicted_state.transform
    Rt = T.rotation.T
    lms = [lmap.landmarks[i] for i in sorted(lmap.landmarks)]
    tracked: dict[int, list[tuple[np.ndarray, np.ndarray]]] = {}
    cos_min = np.cos(np.radians(cfg.assoc_angle_deg))

    leftovers: list[FeatureCluster] = []
    for cat in (Category.PLANE, Category.EDGE):
        cl = [c for c in clusters if c.category == cat]
        if not cl:
            continue
        allc = _concat(cl)
        owner = np.repeat(np.arange(len(cl)), [len(c) for c in cl])
        split = _split_points(cat, allc.compensated, owner, allc.cells[:, 0], cfg)
        if not split:
            continue
        pieces = []
        for idx, _ in split:
            piece = allc.subset(idx)
            piece.cluster_id = cl[owner[idx[0]]].cluster_id
            pieces.append(piece)
        piece_axes = np.array([ax for _, ax in split])
        cand = [lm for lm in lms if lm.category == cat]
        pts = np.vstack([p.compensated for p in pieces])
        raw_all = np.vstack([p.raw for p in pieces])
        ts_all = np.concatenate([p.timestamps for p in pieces])
        cells_all = np.concatenate([p.cells[:, 0] for p in pieces])
        sizes = [len(p) for p in pieces]
        offs = np.r_[0, np.cumsum(sizes)]
        piece_of = np.repeat(np.arange(len(pieces)), sizes)
        free = np.ones(len(pts), dtype=bool)
        if cand:
            centers = np.array([Rt @ (lm.global_center - T.translation) for lm in cand])
            radii = np.array([lm.radius for lm in cand])
            hits = cKDTree(pts).query_ball_point(centers, radii)
            lens = np.array([len(h) for h in hits])
            if lens.sum():
                pi = np.concatenate([np.asarray(h, dtype=np.int64) for h in hits if h])
                li = np.repeat(np.arange(len(cand)), lens)
                d = np.linalg.norm(pts[pi] - centers[li], axis=1)
                ok = d <= radii[li]
                if gate > 0:
                    dist, lm_axes = _gate(cand, li, pts[pi], Rt, T.translation, cat)
                    agree = np.abs(np.einsum("ij,ij->i", piece_axes[piece_of[pi]], lm_axes))
                    ok &= (dist <= gate) & (agree >= cos_min)
                pi, li, d = pi[ok], li[ok], d[ok]
            if lens.sum() and len(pi):
                lid_arr = np.array([lm.id for lm in cand])[li]
                order = np.lexsort((lid_arr, d, pi))
                pi, li = pi[order], li[order]
                first = np.r_[True, pi[1:] != pi[:-1]]
                pi, li = pi[first], li[first]
                order = np.lexsort((pi, li))
                pi, li = pi[order], li[order]
                starts = np.flatnonzero(np.r_[True, li[1:] != li[:-1]])
                for st, sel in zip(starts, np.split(pi, starts[1:])):
                    tracked.setdefault(cand[li[st]].id, []).append((raw_all[sel], ts_all[sel]))
                report.tracked_points += len(pi)
                free[pi] = False
        # untracked remainders of each piece may seed landmarks
        rem = np.flatnonzero(free)
        if len(rem):
            gid = piece_of[rem]
            _, gid = np.unique(gid, return_inverse=True)
            G = int(gid.max()) + 1
            _, ok, _ = _evaluate_groups(cat, pts[rem], cells_all[rem], gid, G, cfg, trim_rounds=0)
            order = np.argsort(gid, kind="stable")
            bounds = np.r_[0, np.cumsum(np.bincount(gid, minlength=G))]
            for g in np.flatnonzero(ok):
                sel = rem[order[bounds[g]:bounds[g + 1]]]
                j = piece_of[sel[0]]
                leftovers.append(pieces[j].subset(sel - offs[j]))

    for lid in sorted(tracked):
        raws = np.vstack([r for r, _ in tracked[lid]])
        ts = np.concatenate([t for _, t in tracked[lid]])
        keep = np.sort(np.argsort(ts, kind="stable")[_even_subset(len(ts), cfg.max_points_per_scan)])
        lmap.landmarks[lid].add_points(scan_index, raws[keep], ts[keep])
        report.tracked.append(lid)

    for piece in leftovers:
        lm = lmap.add(create_landmark(piece, predicted_state, scan_index, cfg))
        report.created.append(lm.id)
    return report


def _gate(cand, li, pts, Rt, t, cat):
    """Distance of each point to its candidate's plane (or line), plus that
    candidate's axis, both in the scan frame."""
    means = np.array([Rt @ ((lm.world_mean if lm.world_mean is not None else lm.global_center) - t) for lm in cand])
    axes = np.array([Rt @ lm.world_axis for lm in cand])
    diff = pts - means[li]
    ax = axes[li]
    along = np.einsum("ij,ij->i", diff, ax)
    if cat == Category.PLANE:
        return np.abs(along), ax
    return np.linalg.norm(diff - along[:, None] * ax, axis=1), ax


def update_observation_counts(lmap: LandmarkMap, report: AssociationReport) -> list[int]:
    """+1 for tracked landmarks, -1 for the rest; landmarks at 0 are removed."""
    hit = set(report.tracked)
    fresh = set(report.created)
    deleted = []
    for lid in sorted(lmap.landmarks):
        if lid in fresh:
            continue
        lm = lmap.landmarks[lid]
        lm.observation_count += 1 if lid in hit else -1
        if lm.observation_count <= 0:
            deleted.append(lid)
    for lid in deleted:
        lmap.remove(lid)
    return deleted


def check_center_drift(lmap: LandmarkMap, landmark_id: int, optimized_state: MotionState,
                       drift_factor: float = 3.0) -> Literal["keep", "delete"]:
    lm = lmap.landmarks[landmark_id]
    moved = optimized_state.transform.apply(lm.center)
    if np.linalg.norm(moved - lm.initial_global_center) > drift_factor * lm.radius:
        lmap.remove(landmark_id)
        return "delete"
    return "keep"


def prune_small_planes(lmap: LandmarkMap, current_scan_index: int, min_points: int = 86,
                       min_age: int = 5) -> list[int]:
    doomed = [
        lid for lid, lm in sorted(lmap.landmarks.items())
        if lm.category == Category.PLANE
        and current_scan_index - lm.creation_scan >= min_age
        and lm.total_points < min_points
    ]
    for lid in doomed:
        lmap.remove(lid)
    return doomed


def refresh_geometry(lmap: LandmarkMap, window_states: dict[int, MotionState],
                     state_of: Callable[[int], MotionState | None]) -> None:
    """Recompute each landmark's world center, mean and axis from current states.

    ``window_states`` holds the scans whose points are not yet in the
    marginal sums; ``state_of`` resolves any scan id (window or fixed).
    """
    ids = sorted(lmap.landmarks)
    if not ids:
        return
    pos = {lid: i for i, lid in enumerate(ids)}
    O = np.empty((len(ids), 3, 3))
    S = np.empty((len(ids), 3))
    n = np.empty(len(ids))
    for i, lid in enumerate(ids):
        m = lmap.marginal_of(lid)
        O[i], S[i], n[i] = m.second_moment, m.first_moment, m.count
    for sid, ws in window_states.items():
        have = [lid for lid in ids if sid in lmap.landmarks[lid].points_by_scan]
        if not have:
            continue
        o, s, c = grouped_sums(ws, [lmap.landmarks[lid].points_by_scan[sid] for lid in have])
        rows = [pos[lid] for lid in have]
        O[rows] += o
        S[rows] += s
        n[rows] += c
    ok = n >= 3
    nn = np.maximum(n, 1.0)
    mean = S / nn[:, None]
    cov = O / nn[:, None, None] - mean[:, :, None] * mean[:, None, :]
    cov = 0.5 * (cov + cov.transpose(0, 2, 1))
    cov[~ok] = np.eye(3)
    _, vec = np.linalg.eigh(cov)
    for i, lid in enumerate(ids):
        lm = lmap.landmarks[lid]
        st = state_of(lm.creation_scan)
        if st is not None:
            lm.global_center = st.transform.apply(lm.center)
        if not ok[i]:
            continue
        lm.world_mean = mean[i]
        lm.world_axis = vec[i, :, 0] if lm.category == Category.PLANE else vec[i, :, 2]


def reject_outliers(lmap: LandmarkMap, window_states: dict[int, MotionState], gate: float) -> int:
    """Drop in-window points farther than ``gate`` from their landmark's surface.

    Run after optimisation (and :func:`refresh_geometry`), when the poses are
    better than the prediction that admitted the points. Returns the number
    of points removed.
    """
    removed = 0
    for sid in sorted(window_states):
        ws = window_states[sid]
        have = [lid for lid in sorted(lmap.landmarks)
                if sid in lmap.landmarks[lid].points_by_scan and lmap.landmarks[lid].world_axis is not None]
        if not have:
            continue
        groups = [lmap.landmarks[lid].points_by_scan[sid] for lid in have]
        sizes = [len(r) for r, _ in groups]
        raw = np.concatenate([r for r, _ in groups])
        ts = np.concatenate([t for _, t in groups])
        w = world_points(ws, raw, ts - ws.start_time)
        gid = np.repeat(np.arange(len(have)), sizes)
        means = np.array([lmap.landmarks[lid].world_mean for lid in have])
        axes = np.array([lmap.landmarks[lid].world_axis for lid in have])
        is_plane = np.array([lmap.landmarks[lid].category == Category.PLANE for lid in have])
        diff = w - means[gid]
        along = np.einsum("ij,ij->i", diff, axes[gid])
        perp = np.linalg.norm(diff - along[:, None] * axes[gid], axis=1)
        dist = np.where(is_plane[gid], np.abs(along), perp)
        bad = dist > gate
        if not bad.any():
            continue
        offs = np.r_[0, np.cumsum(sizes)]
        for k in np.unique(gid[bad]):
            lm = lmap.landmarks[have[k]]
            keep = ~bad[offs[k]:offs[k + 1]]
            r, t = lm.points_by_scan.pop(sid)
            lm.total_points -= len(r)
            removed += int((~keep).sum())
            if keep.any():
                lm.add_points(sid, r[keep], t[keep])
    return removed


def recount(lm: Landmark) -> int:
    return sum(len(r) for r, _ in lm.points_by_scan.values())


def active_ids(lmap: LandmarkMap) -> Iterable[int]:
    return sorted(lmap.landmarks)
