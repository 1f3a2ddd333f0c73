"""Eigenvalue landmark residuals, marginal moment sums and the window solver.

A landmark's cost is built from the covariance of all of its points in the
world frame. Points from scans that left the window are folded into fixed
moment sums (sum p p^T, sum p, count), so the covariance over the full
history costs the same as one over the window alone.

The solver is Levenberg-Marquardt over the in-window states, each with a
12-dof local increment [d_theta, d_p, d_v, d_omega]; rotations are updated
as R <- R exp(d_theta).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .feature_extract import Category
from .geom import (
    RigidTransform,
    cross_rows,
    rotate_scaled,
    exp_so3,
    exp_so3_batch,
    log_so3,
    orthonormalize,
    right_jacobian,
    right_jacobian_batch,
    right_jacobian_inv,
    rotate_batch,
    skew,
    skew_batch,
)
from .motion_model import MotionState

log = logging.getLogger(__name__)

STATE_DOF = 12


@dataclass
class BAConfig:
    window_size: int = 4
    lm_max_iters: int = 15
    lm_init_damping: float = 1e-4
    lm_rel_tol: float = 1e-6
    weight_position: float = 10.0
    weight_rotation: float = 10.0
    weight_angular: float = 1.0
    # separate factor tying consecutive world-frame velocities; 0 disables it
    weight_velocity: float = 1.0
    min_plane_eval: int = 5
    min_edge_eval: int = 4
    sqrt_n_weighting: bool = True


@dataclass
class MomentAccumulator:
    """Running sums sum(p p^T), sum(p) and the point count."""

    second_moment: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    first_moment: np.ndarray = field(default_factory=lambda: np.zeros(3))
    count: int = 0

    def __add__(self, other: "MomentAccumulator") -> "MomentAccumulator":
        return MomentAccumulator(self.second_moment + other.second_moment,
                                 self.first_moment + other.first_moment, self.count + other.count)

    def copy(self) -> "MomentAccumulator":
        return MomentAccumulator(self.second_moment.copy(), self.first_moment.copy(), self.count)


def scan_moments(points) -> MomentAccumulator:
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    return MomentAccumulator(p.T @ p, p.sum(axis=0), len(p))


@dataclass
class LandmarkCovariance:
    mean: np.ndarray
    cov: np.ndarray
    eigenvalues: np.ndarray  # ascending
    eigenvectors: np.ndarray  # columns
    count: int


def covariance_from_moments(acc: MomentAccumulator) -> LandmarkCovariance:
    n = acc.count
    mean = acc.first_moment / n
    cov = acc.second_moment / n - np.outer(mean, mean)
    cov = 0.5 * (cov + cov.T)
    lam, vec = np.linalg.eigh(cov)
    return LandmarkCovariance(mean, cov, lam, vec, n)


def landmark_covariance(marg: MomentAccumulator, window_points: Sequence[np.ndarray],
                        min_count: int = 1) -> LandmarkCovariance | None:
    """Covariance over marginal sums plus the current window points.

    Returns None when fewer than ``min_count`` points are available; the
    caller then skips the landmark for this evaluation.
    """
    acc = marg.copy()
    for pts in window_points:
        acc = acc + scan_moments(pts)
    if acc.count < max(min_count, 1):
        return None
    return covariance_from_moments(acc)


def plane_residual(c: LandmarkCovariance) -> float:
    return math.sqrt(max(c.eigenvalues[0], 0.0))


def edge_residual(c: LandmarkCovariance) -> float:
    # an ideal line has its two smallest eigenvalues at zero
    return math.sqrt(max(c.eigenvalues[0], 0.0) + max(c.eigenvalues[1], 0.0))


def landmark_residual(category: Category, c: LandmarkCovariance) -> float:
    return plane_residual(c) if category == Category.PLANE else edge_residual(c)


def huber(s: float) -> float:
    if s < 0:
        raise ValueError("huber argument must be non-negative")
    return s if s <= 1.0 else 2.0 * math.sqrt(s) - 1.0


def _huber_vec(s: np.ndarray) -> np.ndarray:
    return np.where(s <= 1.0, s, 2.0 * np.sqrt(np.maximum(s, 1.0)) - 1.0)


def _huber_slope(s: np.ndarray) -> np.ndarray:
    return np.where(s <= 1.0, 1.0, 1.0 / np.sqrt(np.maximum(s, 1.0)))


# --- world points and their derivatives ------------------------------------


def world_points(state: MotionState, raw: np.ndarray, tau: np.ndarray) -> np.ndarray:
    """De-skew raw points with ``state``'s velocities, then map to the world."""
    w = state.angular_velocity
    q = rotate_scaled(w, tau, raw) if np.any(w) else raw.copy()
    q += tau[:, None] * state.linear_velocity
    return q @ state.rotation.T + state.position


def point_jacobian(state: MotionState, raw: np.ndarray, tau: np.ndarray) -> np.ndarray:
    """d(world point)/d(local increment), shape (N, 3, 12)."""
    R = state.rotation
    phi = tau[:, None] * state.angular_velocity
    q = rotate_batch(phi, raw) + tau[:, None] * state.linear_velocity
    J = np.empty((len(raw), 3, STATE_DOF))
    J[:, :, 0:3] = -R @ skew_batch(q)
    J[:, :, 3:6] = np.eye(3)
    J[:, :, 6:9] = tau[:, None, None] * R
    # d/dw exp(tau w) c = -exp(tau w) [c]x Jr(tau w) tau
    E = exp_so3_batch(phi)
    J[:, :, 9:12] = -tau[:, None, None] * (R @ (E @ skew_batch(raw) @ right_jacobian_batch(phi)))
    return J


def projected_jacobian(state: MotionState, raw: np.ndarray, tau: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rows b_i^T d(world point i)/d(increment), shape (N, 12).

    Same as ``einsum('ni,nij->nj', b, point_jacobian(...))`` without
    building the 3x12 blocks.
    """
    R = state.rotation
    phi = tau[:, None] * state.angular_velocity
    rb = b @ R  # rows of R^T b
    w = state.angular_velocity
    q = rotate_scaled(w, tau, raw) + tau[:, None] * state.linear_velocity
    out = np.empty((len(raw), STATE_DOF))
    out[:, 0:3] = cross_rows(q, rb)
    out[:, 3:6] = b
    out[:, 6:9] = tau[:, None] * rb
    # omega block: tau * Jr(phi)^T (c x exp(-phi) R^T b), with Jr(phi)^T = Jr(-phi)
    y = cross_rows(raw, rotate_scaled(-w, tau, rb))
    theta = np.linalg.norm(phi, axis=1)
    small = theta < 1e-5
    safe = np.where(small, 1.0, theta)
    c1 = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    c2 = np.where(small, 1.0 / 6.0 - theta**2 / 120.0, (safe - np.sin(safe)) / safe**3)
    py = cross_rows(phi, y)
    out[:, 9:12] = tau[:, None] * (y + c1[:, None] * py + c2[:, None] * cross_rows(phi, py))
    return out


def retract(state: MotionState, delta: np.ndarray) -> MotionState:
    R = state.rotation @ exp_so3(delta[0:3])
    if abs(np.linalg.det(R) - 1.0) > 1e-12 or np.linalg.norm(R @ R.T - np.eye(3)) > 1e-12:
        R = orthonormalize(R)
    return MotionState(
        RigidTransform(R, state.position + delta[3:6]),
        state.linear_velocity + delta[6:9],
        state.angular_velocity + delta[9:12],
        state.start_time,
    )


# --- continuity factor -------------------------------------------------------


def continuity_residual(a: MotionState, b: MotionState, config: BAConfig | None = None) -> np.ndarray:
    """Consistency of b with the constant-velocity prediction from a.

    Rows: translation, rotation (body frame of b), world-frame angular rate.
    Zero exactly when b == predict_next_state(a, b.start_time).
    """
    cfg = config or BAConfig()
    dt = b.start_time - a.start_time
    Ra, Rb = a.rotation, b.rotation
    r = np.empty(9)
    r[0:3] = cfg.weight_position * (Ra @ (dt * a.linear_velocity) + a.position - b.position)
    r[3:6] = cfg.weight_rotation * log_so3(Rb.T @ Ra @ exp_so3(dt * a.angular_velocity))
    r[6:9] = cfg.weight_angular * (Ra @ a.angular_velocity - Rb @ b.angular_velocity)
    return r


def continuity_jacobian(a: MotionState, b: MotionState, config: BAConfig | None = None):
    """Analytic (9 x 12) Jacobians of :func:`continuity_residual` w.r.t. a and b."""
    cfg = config or BAConfig()
    dt = b.start_time - a.start_time
    Ra, Rb = a.rotation, b.rotation
    Ew = exp_so3(dt * a.angular_velocity)
    E = Rb.T @ Ra @ Ew
    Jri = right_jacobian_inv(log_so3(E))
    Ja = np.zeros((9, STATE_DOF))
    Jb = np.zeros((9, STATE_DOF))
    Ja[0:3, 0:3] = -dt * Ra @ skew(a.linear_velocity)
    Ja[0:3, 3:6] = np.eye(3)
    Ja[0:3, 6:9] = dt * Ra
    Jb[0:3, 3:6] = -np.eye(3)
    Ja[3:6, 0:3] = Jri @ Ew.T
    Ja[3:6, 9:12] = dt * Jri @ right_jacobian(dt * a.angular_velocity)
    Jb[3:6, 0:3] = -Jri @ E.T
    Ja[6:9, 0:3] = -Ra @ skew(a.angular_velocity)
    Ja[6:9, 9:12] = Ra
    Jb[6:9, 0:3] = Rb @ skew(b.angular_velocity)
    Jb[6:9, 9:12] = -Rb
    Ja[0:3] *= cfg.weight_position
    Jb[0:3] *= cfg.weight_position
    Ja[3:6] *= cfg.weight_rotation
    Jb[3:6] *= cfg.weight_rotation
    Ja[6:9] *= cfg.weight_angular
    Jb[6:9] *= cfg.weight_angular
    return Ja, Jb


def velocity_residual(a: MotionState, b: MotionState, config: BAConfig | None = None) -> np.ndarray:
    """Constant-velocity consistency of world-frame linear velocities, a 3-vector.

    Without it the newest state's velocity is pinned only by de-skewing,
    yet it drives the next prediction.
    """
    cfg = config or BAConfig()
    return cfg.weight_velocity * (a.rotation @ a.linear_velocity - b.rotation @ b.linear_velocity)


def velocity_jacobian(a: MotionState, b: MotionState, config: BAConfig | None = None):
    """Analytic (3 x 12) Jacobians of :func:`velocity_residual` w.r.t. a and b."""
    cfg = config or BAConfig()
    Ja = np.zeros((3, STATE_DOF))
    Jb = np.zeros((3, STATE_DOF))
    Ja[:, 0:3] = -a.rotation @ skew(a.linear_velocity)
    Ja[:, 6:9] = a.rotation
    Jb[:, 0:3] = b.rotation @ skew(b.linear_velocity)
    Jb[:, 6:9] = -b.rotation
    return cfg.weight_velocity * Ja, cfg.weight_velocity * Jb


def pair_residual(a: MotionState, b: MotionState, config: BAConfig | None = None) -> np.ndarray:
    """Continuity rows followed by the velocity rows (12-vector)."""
    return np.concatenate([continuity_residual(a, b, config), velocity_residual(a, b, config)])


def pair_jacobian(a: MotionState, b: MotionState, config: BAConfig | None = None):
    Ca, Cb = continuity_jacobian(a, b, config)
    Va, Vb = velocity_jacobian(a, b, config)
    return np.vstack([Ca, Va]), np.vstack([Cb, Vb])


# --- landmark residual Jacobian ----------------------------------------------


@dataclass
class Observation:
    """Raw points of one landmark captured by one scan."""

    state: MotionState
    raw: np.ndarray
    times: np.ndarray

    @property
    def tau(self) -> np.ndarray:
        return self.times - self.state.start_time


def _obs_covariance(marg: MomentAccumulator, obs: Sequence[Observation]) -> LandmarkCovariance:
    return landmark_covariance(marg, [world_points(o.state, o.raw, o.tau) for o in obs])


def residual_jacobian(category: Category, marg: MomentAccumulator, obs: Sequence[Observation],
                      fd_step: float = 1e-6, force_numeric: bool = False) -> list[np.ndarray]:
    """d(eps)/d(increment) for each observing scan, one (12,) vector per entry of ``obs``.

    Uses the eigenvalue perturbation d(lambda_k)/dp_j = (2/N) u_k u_k^T (p_j - mean);
    falls back to central differences when the relevant eigen-gap is tiny.
    """
    c = _obs_covariance(marg, obs)
    lam = c.eigenvalues
    k = 1 if category == Category.PLANE else 2
    gap = lam[k] - lam[k - 1]
    eps = landmark_residual(category, c)
    degenerate = gap < 1e-8 * max(np.trace(c.cov), 1e-300) or eps < 1e-12
    if force_numeric or degenerate:
        return _residual_jacobian_fd(category, marg, obs, fd_step)
    U = c.eigenvectors[:, :k]
    out = []
    for o in obs:
        if len(o.raw) == 0:
            out.append(np.zeros(STATE_DOF))
            continue
        w = world_points(o.state, o.raw, o.tau)
        J = point_jacobian(o.state, o.raw, o.tau)
        proj = (w - c.mean) @ U  # (n, k)
        # sum_k u_k u_k^T (w - mean) = U proj
        g = np.einsum("nk,ik,nij->j", proj, U, J) * (2.0 / c.count)
        out.append(g / (2.0 * eps))
    return out


def _residual_jacobian_fd(category, marg, obs, h):
    out = []
    for i, o in enumerate(obs):
        g = np.zeros(STATE_DOF)
        for d in range(STATE_DOF):
            e = np.zeros(STATE_DOF)
            e[d] = h
            vals = []
            for sgn in (1.0, -1.0):
                moved = list(obs)
                moved[i] = Observation(retract(o.state, sgn * e), o.raw, o.times)
                vals.append(landmark_residual(category, _obs_covariance(marg, moved)))
            g[d] = (vals[0] - vals[1]) / (2 * h)
        out.append(g)
    return out


# --- sliding window ---------------------------------------------------------


@dataclass
class SlidingWindow:
    """Most recent ``capacity`` scan states; older states are frozen."""

    capacity: int = 4
    scan_ids: list[int] = field(default_factory=list)
    states: list[MotionState] = field(default_factory=list)
    fixed_poses: dict[int, MotionState] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.states)

    @property
    def full(self) -> bool:
        return len(self.states) >= self.capacity

    def push(self, scan_id: int, state: MotionState) -> None:
        if self.full:
            raise RuntimeError("window is full; marginalize the oldest scan first")
        self.scan_ids.append(scan_id)
        self.states.append(state)

    def pop_oldest(self) -> tuple[int, MotionState]:
        sid, st = self.scan_ids.pop(0), self.states.pop(0)
        if sid in self.fixed_poses:
            raise RuntimeError(f"scan {sid} already fixed")
        self.fixed_poses[sid] = st
        return sid, st

    def state_of(self, scan_id: int) -> MotionState:
        if scan_id in self.fixed_poses:
            return self.fixed_poses[scan_id]
        return self.states[self.scan_ids.index(scan_id)]

    def last_fixed(self) -> MotionState | None:
        if not self.fixed_poses:
            return None
        return self.fixed_poses[max(self.fixed_poses)]


def grouped_sums(state: MotionState, groups: Sequence[tuple[np.ndarray, np.ndarray]]):
    """World-frame (sum p p^T, sum p, count) arrays for raw point groups seen by one scan."""
    G = len(groups)
    sizes = np.array([len(r) for r, _ in groups], dtype=np.int64)
    O, S = np.zeros((G, 3, 3)), np.zeros((G, 3))
    if G == 0 or sizes.sum() == 0:
        return O, S, sizes
    raw = np.concatenate([np.asarray(r, float).reshape(-1, 3) for r, _ in groups])
    ts = np.concatenate([np.asarray(t, float).reshape(-1) for _, t in groups])
    w = world_points(state, raw, ts - state.start_time)
    gid = np.repeat(np.arange(G), sizes)
    for a in range(3):
        S[:, a] = np.bincount(gid, weights=w[:, a], minlength=G)
        for b in range(a, 3):
            O[:, a, b] = O[:, b, a] = np.bincount(gid, weights=w[:, a] * w[:, b], minlength=G)
    return O, S, sizes


def grouped_moments(state: MotionState, groups: Sequence[tuple[np.ndarray, np.ndarray]]) -> list[MomentAccumulator]:
    """World-frame moments of several raw point groups seen by one scan."""
    O, S, n = grouped_sums(state, groups)
    return [MomentAccumulator(O[i], S[i], int(n[i])) for i in range(len(groups))]


def marginalize_scan(accumulators: dict[int, MomentAccumulator], scan_state: MotionState,
                     scan_points: Mapping[int, tuple[np.ndarray, np.ndarray]]) -> dict[int, MomentAccumulator]:
    """Fold one exiting scan's landmark points into the marginal sums.

    ``scan_points`` maps landmark id to (raw points, timestamps) of that scan;
    points are de-skewed and placed with the scan's final state. Returns the
    same dict, updated in place.
    """
    ids = [lid for lid, (raw, _) in scan_points.items() if len(raw)]
    moments = grouped_moments(scan_state, [scan_points[lid] for lid in ids])
    for lid, m in zip(ids, moments):
        acc = accumulators.get(lid)
        accumulators[lid] = m if acc is None else acc + m
    return accumulators


# --- the window problem -----------------------------------------------------


@dataclass
class LandmarkView:
    """What the solver needs to know about one landmark."""

    id: int
    category: Category
    marg: MomentAccumulator
    points_by_scan: Mapping[int, tuple[np.ndarray, np.ndarray]]


@dataclass
class OptimizeResult:
    states: list[MotionState]
    cost_trace: list[float]
    iterations: int
    converged: bool


class WindowProblem:
    """Landmark + continuity cost over the states of a sliding window."""

    def __init__(self, landmarks: Sequence[LandmarkView], window: SlidingWindow, config: BAConfig):
        self.cfg = config
        self.scan_ids = list(window.scan_ids)
        self.prev_fixed = window.last_fixed()
        n_win = len(self.scan_ids)
        slot = {sid: i for i, sid in enumerate(self.scan_ids)}

        views = []
        for lm in landmarks:
            n_w = sum(len(lm.points_by_scan[s][0]) for s in self.scan_ids if s in lm.points_by_scan)
            if n_w == 0:
                continue
            need = config.min_plane_eval if lm.category == Category.PLANE else config.min_edge_eval
            if lm.marg.count + n_w < need:
                continue
            views.append(lm)
        self.views = views
        L = len(views)
        self.n_land = L
        self.is_edge = np.array([v.category == Category.EDGE for v in views], dtype=bool)
        self.O_m = np.array([v.marg.second_moment for v in views]).reshape(L, 3, 3)
        self.S_m = np.array([v.marg.first_moment for v in views]).reshape(L, 3)
        self.n_m = np.array([v.marg.count for v in views], dtype=float)

        self.raw, self.times, self.lidx = [], [], []
        for s in range(n_win):
            sid = self.scan_ids[s]
            raws, ts, ids = [], [], []
            for li, v in enumerate(views):
                pts = v.points_by_scan.get(sid)
                if pts is not None and len(pts[0]):
                    raws.append(pts[0])
                    ts.append(pts[1])
                    ids.append(np.full(len(pts[0]), li))
            self.raw.append(np.concatenate(raws) if raws else np.zeros((0, 3)))
            self.times.append(np.concatenate(ts) if ts else np.zeros(0))
            self.lidx.append(np.concatenate(ids) if ids else np.zeros(0, dtype=int))
        self.n_total = self.n_m + sum(np.bincount(l, minlength=L) for l in self.lidx) if L else np.zeros(0)
        self._stats_key: list | None = None
        self._stats = None
        self.free = np.ones(n_win * STATE_DOF, dtype=bool)
        if self.prev_fixed is None and n_win:
            # nothing anchors the world frame yet: hold the first pose
            self.free[0:6] = False

    # moments and eigen-structure; the last result is reused because LM
    # linearizes at exactly the states whose cost it just accepted
    def _landmark_stats(self, states):
        if self._stats_key is not None and len(self._stats_key) == len(states) and all(
                a is b for a, b in zip(self._stats_key, states)):
            return self._stats
        out = self._compute_stats(states)
        self._stats_key, self._stats = list(states), out
        return out

    def _compute_stats(self, states):
        L = self.n_land
        O = self.O_m.copy()
        S = self.S_m.copy()
        worlds = []
        for s, st in enumerate(states):
            raw = self.raw[s]
            if len(raw) == 0:
                worlds.append(raw)
                continue
            w = world_points(st, raw, self.times[s] - st.start_time)
            worlds.append(w)
            l = self.lidx[s]
            for a in range(3):
                S[:, a] += np.bincount(l, weights=w[:, a], minlength=L)
                for b in range(a, 3):
                    v = np.bincount(l, weights=w[:, a] * w[:, b], minlength=L)
                    O[:, a, b] += v
                    if b != a:
                        O[:, b, a] += v
        N = self.n_total
        mean = S / N[:, None]
        cov = O / N[:, None, None] - mean[:, :, None] * mean[:, None, :]
        lam, U = np.linalg.eigh(cov)
        return worlds, mean, lam, U

    def _landmark_cost_args(self, lam):
        small = np.maximum(lam[:, 0], 0.0) + np.where(self.is_edge, np.maximum(lam[:, 1], 0.0), 0.0)
        if self.cfg.sqrt_n_weighting:
            return small * self.n_total
        return small

    def _continuity_pairs(self, states):
        pairs = []
        if self.prev_fixed is not None and states:
            pairs.append((None, 0))
        pairs.extend((i, i + 1) for i in range(len(states) - 1))
        return pairs

    def cost(self, states) -> float:
        total = 0.0
        if self.n_land:
            _, _, lam, _ = self._landmark_stats(states)
            total += float(np.sum(_huber_vec(self._landmark_cost_args(lam))))
        for ia, ib in self._continuity_pairs(states):
            a = self.prev_fixed if ia is None else states[ia]
            total += float(np.sum(pair_residual(a, states[ib], self.cfg) ** 2))
        return total

    def linearize(self, states):
        """Gauss-Newton system (H, g) and cost at ``states``.

        For a landmark with residual basis B (smallest eigenvector, plus the
        second one for edges) each point j contributes r_j = B^T (w_j - mean)
        and rows a_j = B^T dw_j/dx. Because the mean moves with every point,
        H = sum a_j^T a_j - N m^T m with m the mean of the rows per landmark.
        """
        n_win = len(states)
        dim = n_win * STATE_DOF
        H = np.zeros((dim, dim))
        g = np.zeros(dim)
        cost = 0.0
        if self.n_land:
            L = self.n_land
            worlds, mean, lam, U = self._landmark_stats(states)
            s_arg = self._landmark_cost_args(lam)
            cost += float(np.sum(_huber_vec(s_arg)))
            weight = _huber_slope(s_arg)
            if not self.cfg.sqrt_n_weighting:
                weight = weight / self.n_total
            N = self.n_total
            M = []  # per scan: summed rows per (basis, landmark), (2L, 12)
            for s, st in enumerate(states):
                m_s = np.zeros((2 * L, STATE_DOF))
                if len(self.raw[s]):
                    l = self.lidx[s]
                    tau = self.times[s] - st.start_time
                    e = self.is_edge[l]
                    raw = np.concatenate([self.raw[s], self.raw[s][e]])
                    tt = np.concatenate([tau, tau[e]])
                    lk = np.concatenate([l, l[e]])
                    key = np.concatenate([l, L + l[e]])
                    b = np.concatenate([U[l, :, 0], U[l[e], :, 1]])
                    dw = np.concatenate([worlds[s], worlds[s][e]]) - mean[lk]
                    r = np.einsum("ij,ij->i", b, dw)
                    A = projected_jacobian(st, raw, tt, b)
                    Aw = A * weight[lk][:, None]
                    sl = slice(s * STATE_DOF, (s + 1) * STATE_DOF)
                    H[sl, sl] += Aw.T @ A
                    g[sl] += Aw.T @ r
                    starts = np.flatnonzero(np.r_[True, key[1:] != key[:-1]])
                    m_s[key[starts]] = np.add.reduceat(A, starts, axis=0)
                M.append(m_s / np.tile(N, 2)[:, None])
            coef = np.tile(weight * N, 2)
            for s in range(n_win):
                cm = M[s] * coef[:, None]
                for t in range(n_win):
                    H[s * STATE_DOF:(s + 1) * STATE_DOF, t * STATE_DOF:(t + 1) * STATE_DOF] -= cm.T @ M[t]
        for ia, ib in self._continuity_pairs(states):
            a = self.prev_fixed if ia is None else states[ia]
            b = states[ib]
            r = pair_residual(a, b, self.cfg)
            cost += float(r @ r)
            Ja, Jb = pair_jacobian(a, b, self.cfg)
            sb = slice(ib * STATE_DOF, (ib + 1) * STATE_DOF)
            H[sb, sb] += Jb.T @ Jb
            g[sb] += Jb.T @ r
            if ia is not None:
                sa = slice(ia * STATE_DOF, (ia + 1) * STATE_DOF)
                H[sa, sa] += Ja.T @ Ja
                H[sa, sb] += Ja.T @ Jb
                H[sb, sa] += Jb.T @ Ja
                g[sa] += Ja.T @ r
        return H, g, cost


def apply_increment(states: Sequence[MotionState], delta: np.ndarray) -> list[MotionState]:
    return [retract(st, delta[i * STATE_DOF:(i + 1) * STATE_DOF]) for i, st in enumerate(states)]


def optimize_window(landmarks: Sequence[LandmarkView], window: SlidingWindow,
                    config: BAConfig | None = None) -> OptimizeResult:
    """Levenberg-Marquardt over the window states; never touches fixed data.

    The returned ``cost_trace`` holds the initial cost followed by the cost
    after every accepted step.
    """
    cfg = config or BAConfig()
    states = list(window.states)
    if len(states) < 2:
        return OptimizeResult(states, [], 0, True)
    prob = WindowProblem(landmarks, window, cfg)
    free = prob.free
    mu = cfg.lm_init_damping
    H, g, cost = prob.linearize(states)
    trace = [cost]
    converged = False
    it = 0
    while it < cfg.lm_max_iters:
        it += 1
        Hf = H[np.ix_(free, free)]
        gf = g[free]
        if cost <= 1e-30 or np.max(np.abs(gf), initial=0.0) < 1e-15:
            converged = True
            break
        diag = np.diag(Hf).copy()
        diag = np.maximum(diag, 1e-9 * max(diag.max(initial=0.0), 1e-12))
        step = None
        while mu < 1e12:
            try:
                step = np.linalg.solve(Hf + mu * np.diag(diag), -gf)
            except np.linalg.LinAlgError:
                step = None
            if step is not None and np.all(np.isfinite(step)):
                delta = np.zeros(len(free))
                delta[free] = step
                cand = apply_increment(states, delta)
                new_cost = prob.cost(cand)
                if new_cost < cost:
                    break
            mu *= 10.0
            step = None
        if step is None:
            converged = True  # no descent direction left at any damping
            break
        rel = (cost - new_cost) / max(cost, 1e-300)
        states, cost = cand, new_cost
        trace.append(cost)
        mu = max(mu / 3.0, 1e-12)
        if rel < cfg.lm_rel_tol or np.max(np.abs(step)) < 1e-12:
            converged = True
            break
        H, g, _ = prob.linearize(states)
    if not converged:
        log.warning("window optimisation hit %d iterations without converging", cfg.lm_max_iters)
    return OptimizeResult(states, trace, it, converged)
