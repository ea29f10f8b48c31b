"""SO(3)/SE(3) arithmetic on unit quaternions.

Quaternions are stored (w, x, y, z) and kept canonical with w >= 0.
Tangent vectors of SE(3) are ordered (linear, angular).

Perturbations are on the right everywhere:

    p (+) v = p * Exp(v)
    a (-) b = Log(b^-1 * a)

The array kernels (``quat_*``, ``se3_*``) are numba-compiled and used by the
dynamics and cost code; the ``Rotation``/``Pose``/``Tangent6`` classes wrap
them for everyday use.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

SMALL_ANGLE = 1e-5
# Taylor switch for the SE(3) Jacobian coefficients, which cancel much earlier
_JAC_SMALL = 1e-2


# ---------------------------------------------------------------------------
# array kernels
# ---------------------------------------------------------------------------

@njit(cache=True)
def skew(v):
    m = np.zeros((3, 3))
    m[0, 1] = -v[2]
    m[0, 2] = v[1]
    m[1, 0] = v[2]
    m[1, 2] = -v[0]
    m[2, 0] = -v[1]
    m[2, 1] = v[0]
    return m


@njit(cache=True)
def quat_canonical(q):
    n = math.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
    out = q / n
    if out[0] < 0.0:
        out = -out
    return out


@njit(cache=True)
def quat_mul(a, b):
    out = np.empty(4)
    out[0] = a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3]
    out[1] = a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2]
    out[2] = a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1]
    out[3] = a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]
    return quat_canonical(out)


@njit(cache=True)
def quat_conj(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


@njit(cache=True)
def quat_to_matrix(q):
    w, x, y, z = q[0], q[1], q[2], q[3]
    m = np.empty((3, 3))
    m[0, 0] = 1.0 - 2.0 * (y * y + z * z)
    m[0, 1] = 2.0 * (x * y - w * z)
    m[0, 2] = 2.0 * (x * z + w * y)
    m[1, 0] = 2.0 * (x * y + w * z)
    m[1, 1] = 1.0 - 2.0 * (x * x + z * z)
    m[1, 2] = 2.0 * (y * z - w * x)
    m[2, 0] = 2.0 * (x * z - w * y)
    m[2, 1] = 2.0 * (y * z + w * x)
    m[2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return m


@njit(cache=True)
def matrix_to_quat(m):
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    q = np.empty(4)
    if tr > 0.0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q[0] = 0.25 * s
        q[1] = (m[2, 1] - m[1, 2]) / s
        q[2] = (m[0, 2] - m[2, 0]) / s
        q[3] = (m[1, 0] - m[0, 1]) / s
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q[0] = (m[2, 1] - m[1, 2]) / s
        q[1] = 0.25 * s
        q[2] = (m[0, 1] + m[1, 0]) / s
        q[3] = (m[0, 2] + m[2, 0]) / s
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q[0] = (m[0, 2] - m[2, 0]) / s
        q[1] = (m[0, 1] + m[1, 0]) / s
        q[2] = 0.25 * s
        q[3] = (m[1, 2] + m[2, 1]) / s
    else:
        s = 2.0 * math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q[0] = (m[1, 0] - m[0, 1]) / s
        q[1] = (m[0, 2] + m[2, 0]) / s
        q[2] = (m[1, 2] + m[2, 1]) / s
        q[3] = 0.25 * s
    return quat_canonical(q)


@njit(cache=True)
def quat_rotate(q, v):
    # v + 2 w (u x v) + 2 u x (u x v), u the vector part
    ux, uy, uz = q[1], q[2], q[3]
    tx = 2.0 * (uy * v[2] - uz * v[1])
    ty = 2.0 * (uz * v[0] - ux * v[2])
    tz = 2.0 * (ux * v[1] - uy * v[0])
    out = np.empty(3)
    out[0] = v[0] + q[0] * tx + (uy * tz - uz * ty)
    out[1] = v[1] + q[0] * ty + (uz * tx - ux * tz)
    out[2] = v[2] + q[0] * tz + (ux * ty - uy * tx)
    return out


@njit(cache=True)
def so3_exp(w):
    theta = math.sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2])
    q = np.empty(4)
    if theta < SMALL_ANGLE:
        q[0] = 1.0 - theta * theta / 8.0
        k = 0.5 - theta * theta / 48.0
    else:
        q[0] = math.cos(0.5 * theta)
        k = math.sin(0.5 * theta) / theta
    q[1] = k * w[0]
    q[2] = k * w[1]
    q[3] = k * w[2]
    return quat_canonical(q)


@njit(cache=True)
def so3_log(q):
    # q canonical: w >= 0, so the angle lies in [0, pi]
    n = math.sqrt(q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
    out = np.empty(3)
    if n < SMALL_ANGLE:
        # theta / sin(theta/2) ~ 2 (1 + theta^2/24), theta ~ 2 n / w
        k = 2.0 / q[0] * (1.0 - n * n / (3.0 * q[0] * q[0]))
        out[0] = k * q[1]
        out[1] = k * q[2]
        out[2] = k * q[3]
        return out
    theta = 2.0 * math.atan2(n, q[0])
    out[0] = theta * q[1] / n
    out[1] = theta * q[2] / n
    out[2] = theta * q[3] / n
    if q[0] == 0.0:
        # angle exactly pi: both signs are valid, pick largest component positive
        imax = 0
        for i in range(1, 3):
            if abs(out[i]) > abs(out[imax]):
                imax = i
        if out[imax] < 0.0:
            out = -out
    return out


@njit(cache=True)
def so3_left_jacobian(w):
    theta = math.sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2])
    W = skew(w)
    if theta < SMALL_ANGLE:
        a = 0.5 - theta * theta / 24.0
        b = 1.0 / 6.0 - theta * theta / 120.0
    else:
        a = (1.0 - math.cos(theta)) / (theta * theta)
        b = (theta - math.sin(theta)) / (theta * theta * theta)
    return np.eye(3) + a * W + b * (W @ W)


@njit(cache=True)
def so3_left_jacobian_inv(w):
    theta = math.sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2])
    W = skew(w)
    if theta < SMALL_ANGLE:
        c = 1.0 / 12.0 + theta * theta / 720.0
    else:
        # cot(theta/2) form stays finite at theta = pi
        c = 1.0 / (theta * theta) - 1.0 / (2.0 * theta * math.tan(0.5 * theta))
    return np.eye(3) - 0.5 * W + c * (W @ W)


@njit(cache=True)
def se3_exp(tau):
    """tau = (rho, theta) -> (quat, translation)."""
    w = tau[3:6].copy()
    theta = math.sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2])
    if theta < SMALL_ANGLE:
        a = 0.5 - theta * theta / 24.0
        b = 1.0 / 6.0 - theta * theta / 120.0
    else:
        a = (1.0 - math.cos(theta)) / (theta * theta)
        b = (theta - math.sin(theta)) / (theta * theta * theta)
    # J_l(w) rho = rho + a w x rho + b w x (w x rho)
    r0, r1, r2 = tau[0], tau[1], tau[2]
    c0 = w[1] * r2 - w[2] * r1
    c1 = w[2] * r0 - w[0] * r2
    c2 = w[0] * r1 - w[1] * r0
    t = np.empty(3)
    t[0] = r0 + a * c0 + b * (w[1] * c2 - w[2] * c1)
    t[1] = r1 + a * c1 + b * (w[2] * c0 - w[0] * c2)
    t[2] = r2 + a * c2 + b * (w[0] * c1 - w[1] * c0)
    return so3_exp(w), t


@njit(cache=True)
def se3_log(q, t):
    w = so3_log(q)
    out = np.empty(6)
    out[0:3] = so3_left_jacobian_inv(w) @ t
    out[3:6] = w
    return out


@njit(cache=True)
def se3_compose(qa, ta, qb, tb):
    return quat_mul(qa, qb), ta + quat_rotate(qa, tb)


@njit(cache=True)
def se3_inverse(q, t):
    qi = quat_conj(q)
    return qi, -quat_rotate(qi, t)


@njit(cache=True)
def se3_boxplus(q, t, v):
    dq, dt = se3_exp(v)
    return se3_compose(q, t, dq, dt)


@njit(cache=True)
def se3_boxminus(qa, ta, qb, tb):
    qi, ti = se3_inverse(qb, tb)
    qr, tr = se3_compose(qi, ti, qa, ta)
    return se3_log(qr, tr)


@njit(cache=True)
def _se3_q_block(tau):
    rho = tau[0:3].copy()
    w = tau[3:6].copy()
    theta = math.sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2])
    P = skew(rho)
    W = skew(w)
    if theta < _JAC_SMALL:
        t2 = theta * theta
        c1 = 1.0 / 6.0 - t2 / 120.0
        c2 = -1.0 / 24.0 + t2 / 720.0
        c3 = -1.0 / 120.0 + t2 / 2520.0
    else:
        t2 = theta * theta
        s = math.sin(theta)
        c = math.cos(theta)
        c1 = (theta - s) / (t2 * theta)
        c2 = (1.0 - 0.5 * t2 - c) / (t2 * t2)
        c3 = 0.5 * (c2 - 3.0 * (theta - s - t2 * theta / 6.0) / (t2 * t2 * theta))
    WP = W @ P
    PW = P @ W
    WPW = WP @ W
    return (0.5 * P + c1 * (WP + PW + WPW)
            - c2 * (W @ WP + PW @ W - 3.0 * WPW)
            - c3 * (WPW @ W + W @ WPW))


@njit(cache=True)
def se3_left_jacobian(tau):
    w = tau[3:6].copy()
    J = so3_left_jacobian(w)
    out = np.zeros((6, 6))
    out[0:3, 0:3] = J
    out[3:6, 3:6] = J
    out[0:3, 3:6] = _se3_q_block(tau)
    return out


@njit(cache=True)
def se3_right_jacobian_inv(tau):
    """Inverse right Jacobian: d Log(X Exp(d)) / d d at d = 0, X = Exp(tau)."""
    m = -tau
    Ji = so3_left_jacobian_inv(m[3:6].copy())
    Q = _se3_q_block(m)
    out = np.zeros((6, 6))
    out[0:3, 0:3] = Ji
    out[3:6, 3:6] = Ji
    out[0:3, 3:6] = -(Ji @ Q @ Ji)
    return out


@njit(cache=True)
def se3_right_jacobian(tau):
    return se3_left_jacobian(-tau)


@njit(cache=True)
def se3_adjoint(q, t):
    """Adjoint for (linear, angular) ordering."""
    R = quat_to_matrix(q)
    out = np.zeros((6, 6))
    out[0:3, 0:3] = R
    out[3:6, 3:6] = R
    out[0:3, 3:6] = skew(t) @ R
    return out


# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------

def _vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=float).reshape(3)
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite vector")
    return a


@dataclass(frozen=True, eq=False)
class Rotation:
    quat: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.quat, dtype=float).reshape(4)
        object.__setattr__(self, "quat", quat_canonical(q))

    @classmethod
    def identity(cls) -> Rotation:
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_matrix(cls, m) -> Rotation:
        return cls(matrix_to_quat(np.asarray(m, dtype=float)))

    @classmethod
    def from_rotvec(cls, w) -> Rotation:
        return cls(so3_exp(_vec3(w)))

    @classmethod
    def from_rpy(cls, roll: float, pitch: float, yaw: float) -> Rotation:
        rz = so3_exp(np.array([0.0, 0.0, yaw]))
        ry = so3_exp(np.array([0.0, pitch, 0.0]))
        rx = so3_exp(np.array([roll, 0.0, 0.0]))
        return cls(quat_mul(quat_mul(rz, ry), rx))

    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    def rotvec(self) -> np.ndarray:
        return so3_log(self.quat)

    def rpy(self) -> np.ndarray:
        return matrix_to_rpy(self.matrix())

    def inverse(self) -> Rotation:
        return Rotation(quat_conj(self.quat))

    def apply(self, v) -> np.ndarray:
        return quat_to_matrix(self.quat) @ _vec3(v)

    def __mul__(self, other: Rotation) -> Rotation:
        return Rotation(quat_mul(self.quat, other.quat))

    def __repr__(self):
        return f"Rotation(quat={np.array2string(self.quat, precision=6)})"


@dataclass(frozen=True, eq=False)
class Tangent6:
    linear: np.ndarray
    angular: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "linear", _vec3(self.linear))
        object.__setattr__(self, "angular", _vec3(self.angular))

    @classmethod
    def zero(cls) -> Tangent6:
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_vector(cls, v) -> Tangent6:
        v = np.asarray(v, dtype=float).reshape(6)
        return cls(v[:3], v[3:])

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.linear, self.angular])

    def __add__(self, other: Tangent6) -> Tangent6:
        return Tangent6(self.linear + other.linear, self.angular + other.angular)

    def __sub__(self, other: Tangent6) -> Tangent6:
        return Tangent6(self.linear - other.linear, self.angular - other.angular)

    def __neg__(self) -> Tangent6:
        return Tangent6(-self.linear, -self.angular)

    def __mul__(self, s: float) -> Tangent6:
        return Tangent6(s * self.linear, s * self.angular)

    __rmul__ = __mul__

    def __repr__(self):
        return f"Tangent6(linear={self.linear.tolist()}, angular={self.angular.tolist()})"


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: Rotation
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "translation", _vec3(self.translation))

    @classmethod
    def identity(cls) -> Pose:
        return cls(Rotation.identity(), np.zeros(3))

    @classmethod
    def from_arrays(cls, quat, translation) -> Pose:
        return cls(Rotation(quat), translation)

    def inverse(self) -> Pose:
        q, t = se3_inverse(self.rotation.quat, self.translation)
        return Pose(Rotation(q), t)

    def act(self, point) -> np.ndarray:
        return self.rotation.apply(point) + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.matrix()
        m[:3, 3] = self.translation
        return m

    def __mul__(self, other: Pose) -> Pose:
        q, t = se3_compose(self.rotation.quat, self.translation,
                           other.rotation.quat, other.translation)
        return Pose(Rotation(q), t)

    def __repr__(self):
        return f"Pose({self.rotation!r}, translation={self.translation.tolist()})"


def exp(tau: Tangent6) -> Pose:
    q, t = se3_exp(tau.vector)
    return Pose(Rotation(q), t)


def log(p: Pose) -> Tangent6:
    return Tangent6.from_vector(se3_log(p.rotation.quat, p.translation))


def boxplus(p: Pose, v: Tangent6) -> Pose:
    return p * exp(v)


def boxminus(a: Pose, b: Pose) -> Tangent6:
    return Tangent6.from_vector(
        se3_boxminus(a.rotation.quat, a.translation, b.rotation.quat, b.translation))


def matrix_to_rpy(m: np.ndarray) -> np.ndarray:
    """Z-Y-X Euler angles (roll, pitch, yaw) of a rotation matrix."""
    pitch = math.atan2(-m[2, 0], math.hypot(m[0, 0], m[1, 0]))
    roll = math.atan2(m[2, 1], m[2, 2])
    yaw = math.atan2(m[1, 0], m[0, 0])
    return np.array([roll, pitch, yaw])
