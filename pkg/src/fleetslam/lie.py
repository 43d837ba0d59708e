"""SO(3)/SE(3) primitives: exponential/log maps, rigid-body poses.

Rotations are plain 3x3 orthonormal numpy matrices throughout; tangent
vectors are axis-angle 3-vectors. All maps use a 2-term Taylor branch
below SMALL_ANGLE to avoid division by ~0.
"""
from __future__ import annotations

import numpy as np

SMALL_ANGLE = 1e-8


def skew(v) -> np.ndarray:
    """Cross-product matrix [v]x such that skew(v) @ w == cross(v, w)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(omega) -> np.ndarray:
    """Rodrigues formula mapping an axis-angle vector to a rotation matrix."""
    omega = np.asarray(omega, dtype=float)
    angle = np.linalg.norm(omega)
    K = skew(omega)
    if angle < SMALL_ANGLE:
        # 2-term Taylor of sin(a)/a and (1-cos(a))/a^2
        return np.eye(3) + K + 0.5 * (K @ K)
    s = np.sin(angle) / angle
    c = (1.0 - np.cos(angle)) / (angle * angle)
    return np.eye(3) + s * K + c * (K @ K)


def so3_log(r) -> np.ndarray:
    """Inverse of so3_exp; returns the axis-angle vector with norm <= pi.

    The angle ~ pi case is handled through the largest diagonal element of
    R + I, the generic case through the skew-symmetric part.
    """
    r = np.asarray(r, dtype=float)
    trace = np.clip((np.trace(r) - 1.0) * 0.5, -1.0, 1.0)
    angle = np.arccos(trace)
    if angle < SMALL_ANGLE:
        # R ~ I + [w]x, read off the skew part
        return np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]]) * 0.5
    if np.pi - angle < 1e-6:
        # near pi the skew part degenerates; use the axis from R + I
        A = r + np.eye(3)
        k = int(np.argmax(np.diag(A)))
        axis = A[:, k] / np.sqrt(2.0 * A[k, k])
        w = axis * angle
        # fix the sign so exp(w) reproduces r (w and -w give the same R only at exactly pi)
        if np.linalg.norm(so3_exp(w) - r) > np.linalg.norm(so3_exp(-w) - r):
            w = -w
        return w
    vee = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return vee * (0.5 * angle / np.sin(angle))


def so3_right_jacobian(omega) -> np.ndarray:
    """Right Jacobian Jr such that Exp(w + d) ~ Exp(w) Exp(Jr(w) d)."""
    omega = np.asarray(omega, dtype=float)
    angle = np.linalg.norm(omega)
    K = skew(omega)
    if angle < SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + (K @ K) / 6.0
    a2 = angle * angle
    return (
        np.eye(3)
        - (1.0 - np.cos(angle)) / a2 * K
        + (angle - np.sin(angle)) / (a2 * angle) * (K @ K)
    )


def so3_right_jacobian_inv(omega) -> np.ndarray:
    """Inverse of the right Jacobian."""
    omega = np.asarray(omega, dtype=float)
    angle = np.linalg.norm(omega)
    K = skew(omega)
    if angle < SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + (K @ K) / 12.0
    a2 = angle * angle
    cot_term = (1.0 / a2) - (1.0 + np.cos(angle)) / (2.0 * angle * np.sin(angle))
    return np.eye(3) + 0.5 * K + cot_term * (K @ K)


def so3_log_batch(R: np.ndarray) -> np.ndarray:
    """Vectorized log map over a stack (n, 3, 3); per-element fallback near pi."""
    R = np.asarray(R, dtype=float)
    n = len(R)
    trace = np.clip((R[:, 0, 0] + R[:, 1, 1] + R[:, 2, 2] - 1.0) * 0.5, -1.0, 1.0)
    angle = np.arccos(trace)
    vee = np.stack([
        R[:, 2, 1] - R[:, 1, 2],
        R[:, 0, 2] - R[:, 2, 0],
        R[:, 1, 0] - R[:, 0, 1],
    ], axis=1)
    scale = np.full(n, 0.5)
    generic = angle >= SMALL_ANGLE
    scale[generic] = 0.5 * angle[generic] / np.sin(angle[generic])
    out = vee * scale[:, None]
    near_pi = np.pi - angle < 1e-6
    for i in np.where(near_pi)[0]:
        out[i] = so3_log(R[i])
    return out


def skew_batch(v: np.ndarray) -> np.ndarray:
    """Stack of cross-product matrices from (n, 3) vectors."""
    v = np.asarray(v, dtype=float)
    out = np.zeros((len(v), 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


def so3_right_jacobian_inv_batch(omega: np.ndarray) -> np.ndarray:
    """Vectorized inverse right Jacobian over (n, 3) tangent vectors."""
    omega = np.asarray(omega, dtype=float)
    n = len(omega)
    angle = np.linalg.norm(omega, axis=1)
    K = skew_batch(omega)
    KK = K @ K
    out = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    out += 0.5 * K
    coef = np.full(n, 1.0 / 12.0)
    generic = angle >= SMALL_ANGLE
    a = angle[generic]
    coef[generic] = (1.0 / (a * a)) - (1.0 + np.cos(a)) / (2.0 * a * np.sin(a))
    out += coef[:, None, None] * KK
    return out


def renormalize_rotation(r) -> np.ndarray:
    """Project a nearly-orthonormal matrix back onto SO(3) (polar decomposition)."""
    u, _, vt = np.linalg.svd(np.asarray(r, dtype=float))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def is_rotation(r, tol=1e-9) -> bool:
    r = np.asarray(r)
    return (
        r.shape == (3, 3)
        and np.allclose(r @ r.T, np.eye(3), atol=tol)
        and abs(np.linalg.det(r) - 1.0) < tol
    )


class Pose:
    """Rigid transform (R, t): maps points p -> R @ p + t.

    Value semantics: operations return new Pose objects and never mutate.
    """

    __slots__ = ("R", "t")

    def __init__(self, R=None, t=None):
        self.R = np.eye(3) if R is None else np.asarray(R, dtype=float).reshape(3, 3)
        self.t = np.zeros(3) if t is None else np.asarray(t, dtype=float).reshape(3)

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    @staticmethod
    def exp(xi) -> "Pose":
        """Pose from a 6-vector [rotation tangent; translation] (translation applied directly)."""
        xi = np.asarray(xi, dtype=float)
        return Pose(so3_exp(xi[:3]), xi[3:6])

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        Rt = self.R.T
        return Pose(Rt, -Rt @ self.t)

    def between(self, other: "Pose") -> "Pose":
        """Relative transform self^-1 * other."""
        return self.inverse().compose(other)

    def apply(self, points) -> np.ndarray:
        """Transform one point (3,) or many (n, 3)."""
        p = np.asarray(points, dtype=float)
        if p.ndim == 1:
            return self.R @ p + self.t
        return p @ self.R.T + self.t

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    @staticmethod
    def from_matrix(m) -> "Pose":
        m = np.asarray(m, dtype=float)
        return Pose(m[:3, :3], m[:3, 3])

    def renormalized(self) -> "Pose":
        return Pose(renormalize_rotation(self.R), self.t)

    def copy(self) -> "Pose":
        return Pose(self.R.copy(), self.t.copy())

    def almost_equal(self, other: "Pose", tol=1e-9) -> bool:
        return np.allclose(self.R, other.R, atol=tol) and np.allclose(self.t, other.t, atol=tol)

    def __repr__(self):
        return f"Pose(t={np.round(self.t, 4).tolist()}, rot={np.round(so3_log(self.R), 4).tolist()})"


def pose_compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def pose_inverse(a: Pose) -> Pose:
    return a.inverse()


def pose_between(a: Pose, b: Pose) -> Pose:
    return a.between(b)


def rotation_angle(r) -> float:
    """Geodesic angle of a rotation matrix, in [0, pi]."""
    return float(np.linalg.norm(so3_log(r)))


def rotation_to_quat(r) -> np.ndarray:
    """Quaternion (qx, qy, qz, qw) with qw >= 0 (Shepperd's method)."""
    r = np.asarray(r, dtype=float)
    t = np.trace(r)
    q = np.empty(4)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        q[3] = 0.25 * s
        q[0] = (r[2, 1] - r[1, 2]) / s
        q[1] = (r[0, 2] - r[2, 0]) / s
        q[2] = (r[1, 0] - r[0, 1]) / s
    else:
        i = int(np.argmax(np.diag(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(r[i, i] - r[j, j] - r[k, k] + 1.0) * 2.0
        q[i] = 0.25 * s
        q[3] = (r[k, j] - r[j, k]) / s
        q[j] = (r[j, i] + r[i, j]) / s
        q[k] = (r[k, i] + r[i, k]) / s
    if q[3] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quat_to_rotation(q) -> np.ndarray:
    """Rotation matrix from quaternion (qx, qy, qz, qw)."""
    x, y, z, w = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
