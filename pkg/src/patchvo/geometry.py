"""Quaternion and rigid-transform helpers.

Conventions used throughout the package:

* quaternions are ``[x, y, z, w]``, unit norm;
* a pose ``(q, t)`` maps world points into the camera frame,
  ``X_cam = R(q) @ X_world + t``;
* se(3) tangent vectors are ``[v, w]`` (translation first, rotation second)
  and the retraction is a left increment, ``T <- exp(xi) * T``.

All functions accept and return float64 arrays; the network side of the
package runs in float32 but geometry stays in double precision.
"""

import numpy as np


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q)


def quat_multiply(a, b):
    """Hamilton product a*b for [x, y, z, w] quaternions."""
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array([
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
        aw * bw - ax * bx - ay * by - az * bz,
    ])


def quat_conjugate(q):
    return np.array([-q[0], -q[1], -q[2], q[3]])


def quat_to_matrix(q):
    x, y, z, w = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R):
    """Inverse of :func:`quat_to_matrix` (Shepperd's method)."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        w = 0.25 * s
        x = (R[2, 1] - R[1, 2]) / s
        y = (R[0, 2] - R[2, 0]) / s
        z = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        w = (R[2, 1] - R[1, 2]) / s
        x = 0.25 * s
        y = (R[0, 1] + R[1, 0]) / s
        z = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        w = (R[0, 2] - R[2, 0]) / s
        x = (R[0, 1] + R[1, 0]) / s
        y = 0.25 * s
        z = (R[1, 2] + R[2, 1]) / s
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        w = (R[1, 0] - R[0, 1]) / s
        x = (R[0, 2] + R[2, 0]) / s
        y = (R[1, 2] + R[2, 1]) / s
        z = 0.25 * s
    return quat_normalize([x, y, z, w])


def skew(v):
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


class SE3:
    """Rigid transform stored as (unit quaternion, translation)."""

    __slots__ = ("q", "t")

    def __init__(self, q=None, t=None):
        self.q = quat_normalize(q) if q is not None else np.array([0.0, 0.0, 0.0, 1.0])
        self.t = np.asarray(t, dtype=np.float64).copy() if t is not None else np.zeros(3)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, R, t):
        return cls(matrix_to_quat(R), t)

    def matrix(self):
        return quat_to_matrix(self.q)

    def apply(self, X):
        """Transform points, shape (3,) or (N, 3)."""
        R = self.matrix()
        X = np.asarray(X, dtype=np.float64)
        return X @ R.T + self.t

    def compose(self, other):
        """self o other: apply ``other`` first."""
        R = self.matrix()
        return SE3(quat_multiply(self.q, other.q), R @ other.t + self.t)

    def inverse(self):
        Rt = self.matrix().T
        return SE3(quat_conjugate(self.q), -Rt @ self.t)

    def retract(self, xi):
        """Left increment: exp(xi) o self, xi = [v, w]."""
        return se3_exp(xi).compose(self)

    def copy(self):
        return SE3(self.q.copy(), self.t.copy())

    def almost_equal(self, other, tol=1e-9):
        dq = min(np.linalg.norm(self.q - other.q), np.linalg.norm(self.q + other.q))
        return dq < tol and np.linalg.norm(self.t - other.t) < tol

    def __repr__(self):
        return f"SE3(q={self.q}, t={self.t})"


def so3_exp(w):
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        # second-order series keeps exp/log round trips exact near zero
        return np.eye(3) + skew(w) + 0.5 * skew(w) @ skew(w)
    K = skew(w / theta)
    return np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * (K @ K)


def so3_log(R):
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < 1e-9:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    if np.pi - theta < 1e-6:
        # near pi the axis comes from the symmetric part
        A = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diag(A), 0.0))
        axis = axis / np.linalg.norm(axis)
        # fix signs from off-diagonals
        if A[0, 1] < 0:
            axis[1] = -axis[1]
        if A[0, 2] < 0:
            axis[2] = -axis[2]
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * np.array(
        [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]
    )


def _left_jacobian(w):
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < 1e-8:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    K2 = K @ K
    return (
        np.eye(3)
        + (1 - np.cos(theta)) / theta**2 * K
        + (theta - np.sin(theta)) / theta**3 * K2
    )


def se3_exp(xi):
    """Exponential map, xi = [v, w] -> SE3."""
    xi = np.asarray(xi, dtype=np.float64)
    v, w = xi[:3], xi[3:]
    R = so3_exp(w)
    t = _left_jacobian(w) @ v
    return SE3.from_matrix(R, t)


def se3_log(T):
    """Logarithm map, SE3 -> [v, w]."""
    w = so3_log(T.matrix())
    V = _left_jacobian(w)
    v = np.linalg.solve(V, T.t)
    return np.concatenate([v, w])


class Sim3:
    """Similarity transform x -> s * R x + t."""

    __slots__ = ("scale", "q", "t")

    def __init__(self, scale=1.0, q=None, t=None):
        if scale <= 0:
            raise ValueError("similarity scale must be positive")
        self.scale = float(scale)
        self.q = quat_normalize(q) if q is not None else np.array([0.0, 0.0, 0.0, 1.0])
        self.t = np.asarray(t, dtype=np.float64).copy() if t is not None else np.zeros(3)

    @classmethod
    def identity(cls):
        return cls()

    def apply(self, X):
        R = quat_to_matrix(self.q)
        X = np.asarray(X, dtype=np.float64)
        return self.scale * (X @ R.T) + self.t

    def __repr__(self):
        return f"Sim3(s={self.scale}, q={self.q}, t={self.t})"
