"""Plane and edge feature clusters from a single de-skewed sweep.

The sweep is rasterised into a (ring x column) range image, where the
column is proportional to the firing time and the ring comes from the raw
beam elevation. A range-normalised curvature score separates flat cells
from creases and silhouettes, and same-category neighbours are joined into
clusters across small range gaps.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .motion_model import MotionState, compensate_points
from .scan_io import Scan


class Category(enum.IntEnum):
    PLANE = 0
    EDGE = 1


@dataclass
class FeatureConfig:
    alpha: float = 18000.0  # columns per second
    columns: int = 1800
    rings: int = 64
    fov_min_deg: float = -22.5
    fov_max_deg: float = 22.5
    plane_threshold: float = 0.05
    edge_threshold: float = 0.5
    smooth_window: int = 5
    depth_gap: float = 0.3
    min_cluster: int = 5


@dataclass
class SphericalImage:
    """Range image; empty cells hold index -1 and range NaN."""

    width: int
    height: int
    index: np.ndarray  # (H, W) int, point index into the scan
    range: np.ndarray  # (H, W)
    position: np.ndarray  # (H, W, 3) compensated positions
    compensated: np.ndarray  # (N, 3) compensated positions of every scan point

    @property
    def occupied(self) -> np.ndarray:
        return self.index >= 0


@dataclass
class FeatureCluster:
    """Points of one cluster, stored column-wise as arrays.

    ``raw`` is in the sensor frame at firing time, ``compensated`` in the
    frame at scan start; ``cells`` are (row, column) pairs in the image.
    """

    cluster_id: int
    category: Category
    raw: np.ndarray
    compensated: np.ndarray
    timestamps: np.ndarray
    cells: np.ndarray

    @property
    def centroid(self) -> np.ndarray:
        return self.compensated.mean(axis=0)

    def __len__(self) -> int:
        return len(self.raw)

    def subset(self, mask) -> "FeatureCluster":
        return FeatureCluster(self.cluster_id, self.category, self.raw[mask], self.compensated[mask],
                              self.timestamps[mask], self.cells[mask])


def ring_rows(raw: np.ndarray, rings: int, fov_min_deg: float, fov_max_deg: float) -> np.ndarray:
    """Row index from the raw beam elevation; -1 outside the field of view."""
    el = np.degrees(np.arctan2(raw[:, 2], np.hypot(raw[:, 0], raw[:, 1])))
    if rings == 1:
        return np.zeros(len(raw), dtype=int)
    step = (fov_max_deg - fov_min_deg) / (rings - 1)
    row = np.rint((el - fov_min_deg) / step).astype(int)
    row[(row < 0) | (row >= rings)] = -1
    return row


def project_spherical(scan: Scan, state: MotionState, alpha: float, config: FeatureConfig | None = None,
                      compensated: np.ndarray | None = None) -> SphericalImage:
    """Rasterise a scan after de-skewing it with ``state``'s velocities."""
    cfg = config or FeatureConfig()
    if compensated is None:
        compensated = compensate_points(scan.points, scan.timestamps, state.linear_velocity,
                                        state.angular_velocity, state.start_time)
    W, H = cfg.columns, cfg.rings
    # the small guard absorbs timestamp text rounding at column boundaries
    col = np.floor(alpha * (scan.timestamps - state.start_time) + 1e-3).astype(int)
    np.clip(col, 0, W - 1, out=col)
    row = ring_rows(scan.points, H, cfg.fov_min_deg, cfg.fov_max_deg)
    rng = np.sqrt(np.einsum("ij,ij->i", compensated, compensated))

    keep = np.flatnonzero(row >= 0)
    # nearest point wins a shared cell; a column-major key is nearly sorted
    # already in firing order, which the stable sort exploits
    rk = rng[keep]
    span = float(rk.max()) + 1.0 if len(rk) else 1.0
    order = np.argsort((col[keep] * H + row[keep]) * span + rk, kind="stable")
    winners_all = keep[order]
    key_sorted = col[winners_all] * H + row[winners_all]
    first = np.ones(len(order), dtype=bool)
    first[1:] = key_sorted[1:] != key_sorted[:-1]
    winners = winners_all[first]
    cells = row[winners] * W + col[winners]

    index = np.full(H * W, -1, dtype=np.int64)
    index[cells] = winners
    r_img = np.full(H * W, np.nan)
    r_img[cells] = rng[winners]
    pos = np.full((H * W, 3), np.nan)
    pos[cells] = compensated[winners]
    return SphericalImage(W, H, index.reshape(H, W), r_img.reshape(H, W), pos.reshape(H, W, 3), compensated)


def smoothness_scores(img: SphericalImage, window: int) -> np.ndarray:
    """Range-normalised curvature per cell; NaN where the neighbourhood is incomplete.

    score = |sum_j (r_j - r_i)| / (n * r_i) over the ``2 * window`` same-row
    neighbours, all of which must be occupied.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    r = img.range
    valid = np.isfinite(r)
    rz = np.where(valid, r, 0.0)
    H, W = r.shape
    pad_r = np.zeros((H, W + 2 * window + 1))
    pad_v = np.zeros((H, W + 2 * window + 1))
    pad_r[:, window + 1 : window + 1 + W] = rz
    pad_v[:, window + 1 : window + 1 + W] = valid
    cr = np.cumsum(pad_r, axis=1)
    cv = np.cumsum(pad_v, axis=1)
    # inclusive window sums [c - window, c + window]
    sum_r = cr[:, 2 * window + 1 :] - cr[:, : W]
    sum_v = cv[:, 2 * window + 1 :] - cv[:, : W]
    n_nb = sum_v - valid
    full = valid & (n_nb == 2 * window)
    score = np.full(r.shape, np.nan)
    nb_sum = sum_r[full] - rz[full]
    n = n_nb[full]
    score[full] = np.abs(nb_sum - n * rz[full]) / (n * rz[full])
    return score


def classify_and_cluster(img: SphericalImage, scores: np.ndarray, plane_threshold: float, edge_threshold: float,
                         depth_gap: float = 0.3, min_cluster: int = 5, scan: Scan | None = None,
                         stride: tuple[int, int] = (1, 1)) -> list[FeatureCluster]:
    """Threshold the scores and join 4-connected same-category cells.

    ``stride`` = (column, row) keeps only lattice cells of each cluster, as
    :func:`thin_cluster` would; sizes are judged before thinning.
    """
    if edge_threshold <= plane_threshold:
        raise ValueError("edge_threshold must exceed plane_threshold")
    H, W = scores.shape
    with np.errstate(invalid="ignore"):
        cat = np.full((H, W), -1, dtype=np.int8)
        cat[scores < plane_threshold] = Category.PLANE
        cat[scores > edge_threshold] = Category.EDGE
    flat_cat = cat.ravel()
    cand = np.flatnonzero(flat_cat >= 0)
    if len(cand) == 0:
        return []
    node_of = np.full(H * W, -1, dtype=np.int64)
    node_of[cand] = np.arange(len(cand))
    r = img.range.ravel()

    pairs = []
    right = cand[(cand % W) < W - 1]
    down = cand[cand < (H - 1) * W]
    for a, nb in ((right, right + 1), (down, down + W)):
        ok = (flat_cat[nb] == flat_cat[a]) & (np.abs(r[nb] - r[a]) < depth_gap)
        pairs.append((node_of[a[ok]], node_of[nb[ok]]))
    src = np.concatenate([p[0] for p in pairs])
    dst = np.concatenate([p[1] for p in pairs])
    graph = coo_matrix((np.ones(len(src), dtype=np.int8), (src, dst)), shape=(len(cand), len(cand)))
    _, labels = connected_components(graph, directed=False)

    sizes = np.bincount(labels)
    big = sizes >= min_cluster
    keep_nodes = np.flatnonzero(big[labels])
    if len(keep_nodes) == 0:
        return []
    # dense ids ordered by each cluster's first cell in raster order
    order = np.argsort(labels[keep_nodes], kind="stable")
    grouped = keep_nodes[order]
    lab_sorted = labels[grouped]
    starts = np.flatnonzero(np.r_[True, lab_sorted[1:] != lab_sorted[:-1]])
    groups = np.split(grouped, starts[1:])
    groups.sort(key=lambda g: int(cand[g[0]]))

    idx_flat = img.index.ravel()
    cs, rs = stride
    clusters = []
    for cid, g in enumerate(groups):
        cells_flat = cand[g]
        cat_id = int(flat_cat[cells_flat[0]])
        if cs > 1 or rs > 1:
            cells_flat = cells_flat[((cells_flat % W) % cs == 0) & ((cells_flat // W) % rs == 0)]
        pidx = idx_flat[cells_flat]
        raw = scan.points[pidx] if scan is not None else img.position.reshape(-1, 3)[cells_flat]
        ts = scan.timestamps[pidx] if scan is not None else np.zeros(len(pidx))
        clusters.append(FeatureCluster(
            cid, Category(cat_id), raw, img.compensated[pidx], ts,
            np.column_stack([cells_flat // W, cells_flat % W]),
        ))
    return clusters


def thin_cluster(cluster: FeatureCluster, col_stride: int, row_stride: int = 1) -> FeatureCluster:
    """Keep cells on a regular (row, column) lattice; used to bound BA cost."""
    if col_stride <= 1 and row_stride <= 1:
        return cluster
    m = (cluster.cells[:, 1] % col_stride == 0) & (cluster.cells[:, 0] % row_stride == 0)
    return cluster.subset(m)


def extract_features(scan: Scan, state: MotionState, config: FeatureConfig | None = None,
                     stride: tuple[int, int] = (1, 1)) -> list[FeatureCluster]:
    cfg = config or FeatureConfig()
    img = project_spherical(scan, state, cfg.alpha, cfg)
    scores = smoothness_scores(img, cfg.smooth_window)
    return classify_and_cluster(img, scores, cfg.plane_threshold, cfg.edge_threshold, cfg.depth_gap,
                                cfg.min_cluster, scan=scan, stride=stride)
