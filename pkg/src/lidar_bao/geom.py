"""Rigid-body math on SO(3) and SE(3).

Rotations are kept as 3x3 matrices. Rotation vectors (axis * angle) are the
tangent representation used for angular velocities and local increments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SMALL_ANGLE = 1e-8
ORTHO_TOL = 1e-9


def _as_vec3(x, name: str) -> np.ndarray:
    v = np.asarray(x, dtype=float).reshape(-1)
    if v.shape != (3,):
        raise ValueError(f"{name} must be a 3-vector, got shape {np.shape(x)}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} must be finite, got {v}")
    return v


def skew(w) -> np.ndarray:
    """Return the cross-product matrix [w]x such that [w]x @ p == w x p."""
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def skew_batch(w: np.ndarray) -> np.ndarray:
    """Cross-product matrices for an (N, 3) array, shape (N, 3, 3)."""
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def cross_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cross product of (N, 3) arrays; faster than np.cross for small rows."""
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., 0] = a1 * b2 - a2 * b1
    out[..., 1] = a2 * b0 - a0 * b2
    out[..., 2] = a0 * b1 - a1 * b0
    return out


def _rodrigues_coeffs(theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # sin(t)/t and (1 - cos(t))/t^2, Taylor branch below SMALL_ANGLE
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    return a, b


def exp_so3(omega) -> np.ndarray:
    """Rodrigues exponential of a rotation vector."""
    w = _as_vec3(omega, "omega")
    theta = np.linalg.norm(w)
    a, b = _rodrigues_coeffs(np.array(theta))
    K = skew(w)
    return np.eye(3) + float(a) * K + float(b) * (K @ K)


def exp_so3_batch(omega: np.ndarray) -> np.ndarray:
    """Vectorised exp_so3 over an (N, 3) array; no validation."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega, axis=-1)
    a, b = _rodrigues_coeffs(theta)
    K = skew_batch(omega)
    KK = K @ K
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * KK


def rotate_batch(omega: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Apply exp(omega_i) to p_i row-wise without forming matrices."""
    theta = np.linalg.norm(omega, axis=-1)
    a, b = _rodrigues_coeffs(theta)
    wxp = cross_rows(omega, p)
    wxwxp = cross_rows(omega, wxp)
    return p + a[:, None] * wxp + b[:, None] * wxwxp


def rotate_scaled(omega, tau: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Apply exp(tau_i * omega) to p_i row-wise for one shared rotation vector."""
    w = np.asarray(omega, dtype=float)
    tau = np.asarray(tau, dtype=float)
    K = skew(w)
    if len(tau) > 1 and np.all(tau[1:] >= tau[:-1]):
        # sweeps fire many points per instant: evaluate trig once per instant
        new = np.r_[True, tau[1:] != tau[:-1]]
        inv = np.cumsum(new) - 1
        tu = tau[new]
        au, bu = _rodrigues_coeffs(np.abs(tu) * np.linalg.norm(w))
        a, b = (au * tu)[inv], (bu * tu * tu)[inv]
    else:
        a, b = _rodrigues_coeffs(np.abs(tau) * np.linalg.norm(w))
        a, b = a * tau, b * tau * tau
    return p + a[:, None] * (p @ K.T) + b[:, None] * (p @ (K @ K).T)


def check_rotation(rot, tol: float = ORTHO_TOL) -> np.ndarray:
    r = np.asarray(rot, dtype=float)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        raise ValueError("rotation must be a finite 3x3 matrix")
    if np.linalg.norm(r @ r.T - np.eye(3)) > tol or abs(np.linalg.det(r) - 1.0) > tol:
        raise ValueError("matrix is not a proper rotation")
    return r


def log_so3(rot) -> np.ndarray:
    """Rotation vector of a rotation matrix, angle in [0, pi].

    At exactly pi the axis is ambiguous; the returned axis has its first
    nonzero component positive.
    """
    R = check_rotation(rot)
    cos_t = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    # atan2 stays well conditioned near 0 and pi, where acos loses digits
    theta = math.atan2(0.5 * np.linalg.norm(vee), cos_t)
    if theta < 1e-6:
        # theta/(2 sin theta) ~ 1/2 + theta^2/12
        return (0.5 + theta**2 / 12.0) * vee
    if math.pi - theta > 1e-4:
        return theta / (2.0 * math.sin(theta)) * vee
    # near pi: axis from the symmetric part, R + R^T = 2 cos(t) I + 2 (1 - cos t) a a^T
    B = (R + R.T) / 2.0 - cos_t * np.eye(3)
    B /= 1.0 - cos_t
    k = int(np.argmax(np.diag(B)))
    axis = B[:, k] / math.sqrt(max(B[k, k], 1e-300))
    axis /= np.linalg.norm(axis)
    if np.linalg.norm(vee) > 1e-10:
        if np.dot(axis, vee) < 0:
            axis = -axis
    elif axis[np.flatnonzero(np.abs(axis) > 1e-12)[0]] < 0:
        axis = -axis
    return theta * axis


def right_jacobian(phi) -> np.ndarray:
    """Right Jacobian of SO(3): exp(phi + d) ~= exp(phi) exp(Jr(phi) d)."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-5:
        return np.eye(3) - 0.5 * K + K @ K / 6.0
    return (
        np.eye(3)
        - (1.0 - math.cos(theta)) / theta**2 * K
        + (theta - math.sin(theta)) / theta**3 * (K @ K)
    )


def right_jacobian_inv(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-5:
        return np.eye(3) + 0.5 * K + K @ K / 12.0
    coef = 1.0 / theta**2 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return np.eye(3) + 0.5 * K + coef * (K @ K)


def right_jacobian_batch(phi: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(phi, axis=-1)
    small = theta < 1e-5
    safe = np.where(small, 1.0, theta)
    c1 = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    c2 = np.where(small, 1.0 / 6.0 - theta**2 / 120.0, (safe - np.sin(safe)) / safe**3)
    K = skew_batch(phi)
    return np.eye(3) - c1[:, None, None] * K + c2[:, None, None] * (K @ K)


@dataclass(frozen=True)
class RigidTransform:
    """Maps points from a local frame into a parent frame: p' = R p + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", check_rotation(self.rotation))
        object.__setattr__(self, "translation", _as_vec3(self.translation, "translation"))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_rotvec(cls, omega, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(exp_so3(omega), translation)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform a single point or an (N, 3) array."""
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


def transform_point(t: RigidTransform, p) -> np.ndarray:
    return t.rotation @ _as_vec3(p, "p") + t.translation


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform equivalent to applying b first, then a."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def orthonormalize(rot: np.ndarray) -> np.ndarray:
    """Project a near-rotation back onto SO(3) via SVD."""
    u, _, vt = np.linalg.svd(rot)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


def rotation_to_quaternion(rot) -> np.ndarray:
    """Unit quaternion (qx, qy, qz, qw) with qw >= 0."""
    R = np.asarray(rot, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = np.array([(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s])
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s, (R[1, 0] - R[0, 1]) / s])
    q /= np.linalg.norm(q)
    if q[3] < 0:
        q = -q
    return q


def quaternion_to_rotation(q) -> np.ndarray:
    x, y, z, w = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )
