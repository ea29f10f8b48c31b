"""Floating-base rigid-body dynamics and the constant-control integrator.

State vectors are laid out as::

    x  = [base position(3), base quat(4, wxyz), joint angles(nj),
          base linear velocity(3), base angular velocity(3), joint rates(nj)]
    dx = [pose tangent(6, linear first), d joint angles(nj),
          d base twist(6), d joint rates(nj)]

Base velocities are body-frame; gravity is -z in the world.  Forward
dynamics use the articulated-body algorithm; the composite mass matrix path
(`mass_matrix`, `bias_forces`) exists for constrained worlds such as the
vertical rail.  All kernels are numba-compiled and take the tuple returned by
`kernel_args(model)`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .liegroup import (Pose, Rotation, Tangent6, quat_to_matrix, se3_adjoint, se3_boxminus,
                       se3_boxplus, se3_exp, se3_right_jacobian, skew)
from .model import RobotModel


# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class State:
    pose: Pose
    q: np.ndarray
    twist: Tangent6
    qd: np.ndarray

    @classmethod
    def from_vector(cls, x, n_joints: int) -> State:
        x = np.asarray(x, float)
        nj = n_joints
        return cls(Pose(Rotation(x[3:7]), x[0:3]), x[7:7 + nj].copy(),
                   Tangent6(x[7 + nj:10 + nj], x[10 + nj:13 + nj]), x[13 + nj:].copy())

    @classmethod
    def at_rest(cls, model: RobotModel, position=(0.0, 0.0, 0.0), q=None,
                rotation: Rotation | None = None) -> State:
        nj = model.n_joints
        return cls(Pose(rotation or Rotation.identity(), position),
                   np.zeros(nj) if q is None else np.asarray(q, float),
                   Tangent6.zero(), np.zeros(nj))

    def vector(self) -> np.ndarray:
        return np.concatenate([self.pose.translation, self.pose.rotation.quat, self.q,
                               self.twist.linear, self.twist.angular, self.qd])


@dataclass(frozen=True, eq=False)
class Control:
    thrusts: np.ndarray
    torques: np.ndarray

    @classmethod
    def from_vector(cls, u, n_props: int) -> Control:
        u = np.asarray(u, float)
        return cls(u[:n_props].copy(), u[n_props:].copy())

    def vector(self) -> np.ndarray:
        return np.concatenate([self.thrusts, self.torques])


@dataclass(frozen=True, eq=False)
class Acceleration:
    base: Tangent6
    qdd: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([self.base.vector, self.qdd])


def _as_x(state) -> np.ndarray:
    return state.vector() if isinstance(state, State) else np.asarray(state, float)


def _as_u(control) -> np.ndarray:
    return control.vector() if isinstance(control, Control) else np.asarray(control, float)


def kernel_args(model: RobotModel) -> tuple:
    k = model.kernel()
    return (k.parent, k.tree_E, k.tree_r, k.axis, k.inertia, k.prop_pos, k.prop_yaw, k.gravity)


# ---------------------------------------------------------------------------
# spatial algebra (angular-first, Featherstone)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _axis_rotation(axis, angle):
    K = skew(axis)
    return np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * (K @ K)


@njit(cache=True)
def _xm(E, r, m):
    """Motion transform X m."""
    out = np.empty(6)
    w = m[0:3]
    out[0:3] = E @ w
    out[3:6] = E @ (m[3:6] - np.cross(r, w))
    return out


@njit(cache=True)
def _xtf(E, r, f):
    """Force transform back to the parent: X^T f."""
    out = np.empty(6)
    fl = E.T @ f[3:6]
    out[0:3] = E.T @ f[0:3] + np.cross(r, fl)
    out[3:6] = fl
    return out


@njit(cache=True)
def _xmat(E, r):
    X = np.zeros((6, 6))
    X[0:3, 0:3] = E
    X[3:6, 3:6] = E
    X[3:6, 0:3] = -E @ skew(r)
    return X


@njit(cache=True)
def _crm(v, m):
    out = np.empty(6)
    out[0:3] = np.cross(v[0:3], m[0:3])
    out[3:6] = np.cross(v[3:6], m[0:3]) + np.cross(v[0:3], m[3:6])
    return out


@njit(cache=True)
def _crf(v, f):
    out = np.empty(6)
    out[0:3] = np.cross(v[0:3], f[0:3]) + np.cross(v[3:6], f[3:6])
    out[3:6] = np.cross(v[0:3], f[3:6])
    return out


@njit(cache=True)
def _split(x, nj):
    quat = x[3:7].copy()
    q = x[7:7 + nj].copy()
    v0 = np.empty(6)
    v0[0:3] = x[10 + nj:13 + nj]
    v0[3:6] = x[7 + nj:10 + nj]
    qd = x[13 + nj:13 + 2 * nj].copy()
    return quat, q, v0, qd


@njit(cache=True)
def _joint_transforms(M, q):
    parent, tree_E, tree_r, axis = M[0], M[1], M[2], M[3]
    nb = parent.shape[0]
    XE = np.zeros((nb, 3, 3))
    Xr = np.zeros((nb, 3))
    for i in range(1, nb):
        XE[i] = _axis_rotation(axis[i], q[i - 1]).T @ tree_E[i]
        Xr[i] = tree_r[i]
    return XE, Xr


@njit(cache=True)
def thrust_wrench(M, thrusts):
    """Base wrench (angular-first, body frame) produced by propeller thrusts."""
    prop_pos, prop_yaw = M[5], M[6]
    f = np.zeros(6)
    for k in range(prop_pos.shape[0]):
        T = thrusts[k]
        f[0] += prop_pos[k, 1] * T
        f[1] += -prop_pos[k, 0] * T
        f[2] += prop_yaw[k] * T
        f[5] += T
    return f


@njit(cache=True, inline="always")
def _cross(a0, a1, a2, b0, b1, b2):
    return a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0


@njit(cache=True)
def _xm_into(E, r, m, out):
    c0, c1, c2 = _cross(r[0], r[1], r[2], m[0], m[1], m[2])
    l0, l1, l2 = m[3] - c0, m[4] - c1, m[5] - c2
    for k in range(3):
        out[k] = E[k, 0] * m[0] + E[k, 1] * m[1] + E[k, 2] * m[2]
        out[3 + k] = E[k, 0] * l0 + E[k, 1] * l1 + E[k, 2] * l2


@njit(cache=True)
def _xtf_add(E, r, f, out):
    f0 = E[0, 0] * f[3] + E[1, 0] * f[4] + E[2, 0] * f[5]
    f1 = E[0, 1] * f[3] + E[1, 1] * f[4] + E[2, 1] * f[5]
    f2 = E[0, 2] * f[3] + E[1, 2] * f[4] + E[2, 2] * f[5]
    c0, c1, c2 = _cross(r[0], r[1], r[2], f0, f1, f2)
    out[0] += E[0, 0] * f[0] + E[1, 0] * f[1] + E[2, 0] * f[2] + c0
    out[1] += E[0, 1] * f[0] + E[1, 1] * f[1] + E[2, 1] * f[2] + c1
    out[2] += E[0, 2] * f[0] + E[1, 2] * f[1] + E[2, 2] * f[2] + c2
    out[3] += f0
    out[4] += f1
    out[5] += f2


@njit(cache=True)
def _congruence_add(E, r, A, X, T, out):
    """out += X^T A X for the motion transform X(E, r)."""
    X[:, :] = 0.0
    rx = skew(r)
    for i in range(3):
        for j in range(3):
            X[i, j] = E[i, j]
            X[3 + i, 3 + j] = E[i, j]
            acc = 0.0
            for k in range(3):
                acc -= E[i, k] * rx[k, j]
            X[3 + i, j] = acc
    for i in range(6):
        for j in range(6):
            acc = 0.0
            for k in range(6):
                acc += A[i, k] * X[k, j]
            T[i, j] = acc
    for i in range(6):
        for j in range(6):
            acc = 0.0
            for k in range(6):
                acc += X[k, i] * T[k, j]
            out[i, j] += acc


@njit(cache=True)
def _chol_solve6(A, b, L, out):
    """Solve the 6x6 SPD system A out = b using the scratch matrix L."""
    for j in range(6):
        s = A[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if s <= 0.0:
            raise ValueError("articulated inertia of the base is not positive definite")
        L[j, j] = math.sqrt(s)
        for i in range(j + 1, 6):
            s = A[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            L[i, j] = s / L[j, j]
    for i in range(6):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * out[k]
        out[i] = s / L[i, i]
    for i in range(5, -1, -1):
        s = out[i]
        for k in range(i + 1, 6):
            s -= L[k, i] * out[k]
        out[i] = s / L[i, i]


@njit(cache=True)
def _joint_rotations_into(M, x, nj, XE):
    """Child-from-parent coordinate rotations of every joint at configuration x."""
    tree_E, axis = M[1], M[3]
    nb = nj + 1
    for i in range(3):
        for j in range(3):
            XE[0, i, j] = 1.0 if i == j else 0.0
    for i in range(1, nb):
        qa = x[6 + i]
        c, s = math.cos(qa), math.sin(qa)
        a0, a1, a2 = axis[i, 0], axis[i, 1], axis[i, 2]
        # R(axis, -q) = R(axis, q)^T
        Rt00 = c + (1 - c) * a0 * a0
        Rt01 = (1 - c) * a0 * a1 + s * a2
        Rt02 = (1 - c) * a0 * a2 - s * a1
        Rt10 = (1 - c) * a1 * a0 - s * a2
        Rt11 = c + (1 - c) * a1 * a1
        Rt12 = (1 - c) * a1 * a2 + s * a0
        Rt20 = (1 - c) * a2 * a0 + s * a1
        Rt21 = (1 - c) * a2 * a1 - s * a0
        Rt22 = c + (1 - c) * a2 * a2
        Et = tree_E[i]
        for j in range(3):
            XE[i, 0, j] = Rt00 * Et[0, j] + Rt01 * Et[1, j] + Rt02 * Et[2, j]
            XE[i, 1, j] = Rt10 * Et[0, j] + Rt11 * Et[1, j] + Rt12 * Et[2, j]
            XE[i, 2, j] = Rt20 * Et[0, j] + Rt21 * Et[1, j] + Rt22 * Et[2, j]


@njit(cache=True)
def _joint_rotations(M, x, nj):
    XE = np.empty((nj + 1, 3, 3))
    _joint_rotations_into(M, x, nj, XE)
    return XE


@njit(cache=True)
def aba_workspace(nb):
    """Scratch arrays for ``aba_into`` (reused across calls to avoid allocation)."""
    return (np.empty((nb, 3, 3)), np.empty((nb, 6)), np.empty((nb, 6)), np.empty((nb, 6)),
            np.empty((nb, 6)), np.empty(nb), np.empty(nb), np.empty((nb, 6)), np.empty((nb, 6, 6)),
            np.empty((6, 6)), np.empty((6, 6)), np.empty(6), np.empty(6))


@njit(cache=True)
def aba_into(M, x, tau, f_ext, ws, out):
    """Articulated-body forward dynamics into ``out`` = [base linear, base angular, qdd].

    ``f_ext`` is (nb, 6), body-frame, angular-first; gravity is included.
    """
    parent, tree_r, axis, inertia, g = M[0], M[2], M[3], M[4], M[7]
    XE, v, c, pA, U, d, uu, a, IA, X, T, tmp, a0 = ws
    nb = parent.shape[0]
    nj = nb - 1
    _joint_rotations_into(M, x, nj, XE)
    IA[:] = inertia
    c[0, :] = 0.0
    U[0, :] = 0.0

    v[0, 0:3] = x[10 + nj:13 + nj]
    v[0, 3:6] = x[7 + nj:10 + nj]
    for i in range(1, nb):
        _xm_into(XE[i], tree_r[i], v[parent[i]], v[i])
        qd = x[12 + nj + i]
        s0, s1, s2 = axis[i, 0] * qd, axis[i, 1] * qd, axis[i, 2] * qd
        v[i, 0] += s0
        v[i, 1] += s1
        v[i, 2] += s2
        c[i, 0], c[i, 1], c[i, 2] = _cross(v[i, 0], v[i, 1], v[i, 2], s0, s1, s2)
        c[i, 3], c[i, 4], c[i, 5] = _cross(v[i, 3], v[i, 4], v[i, 5], s0, s1, s2)

    for i in range(nb):
        I = inertia[i]
        for k in range(6):
            acc = 0.0
            for j in range(6):
                acc += I[k, j] * v[i, j]
            tmp[k] = acc
        n0, n1, n2 = _cross(v[i, 0], v[i, 1], v[i, 2], tmp[0], tmp[1], tmp[2])
        m0, m1, m2 = _cross(v[i, 3], v[i, 4], v[i, 5], tmp[3], tmp[4], tmp[5])
        f0, f1, f2 = _cross(v[i, 0], v[i, 1], v[i, 2], tmp[3], tmp[4], tmp[5])
        pA[i, 0] = n0 + m0 - f_ext[i, 0]
        pA[i, 1] = n1 + m1 - f_ext[i, 1]
        pA[i, 2] = n2 + m2 - f_ext[i, 2]
        pA[i, 3] = f0 - f_ext[i, 3]
        pA[i, 4] = f1 - f_ext[i, 4]
        pA[i, 5] = f2 - f_ext[i, 5]

    for i in range(nb - 1, 0, -1):
        Ii = IA[i]
        for k in range(6):
            U[i, k] = Ii[k, 0] * axis[i, 0] + Ii[k, 1] * axis[i, 1] + Ii[k, 2] * axis[i, 2]
        d[i] = U[i, 0] * axis[i, 0] + U[i, 1] * axis[i, 1] + U[i, 2] * axis[i, 2]
        uu[i] = tau[i - 1] - (pA[i, 0] * axis[i, 0] + pA[i, 1] * axis[i, 1] + pA[i, 2] * axis[i, 2])
        for k in range(6):
            for j in range(6):
                Ii[k, j] -= U[i, k] * U[i, j] / d[i]
        for k in range(6):
            acc = pA[i, k] + U[i, k] * uu[i] / d[i]
            for j in range(6):
                acc += Ii[k, j] * c[i, j]
            tmp[k] = acc
        p = parent[i]
        _xtf_add(XE[i], tree_r[i], tmp, pA[p])
        _congruence_add(XE[i], tree_r[i], Ii, X, T, IA[p])

    _chol_solve6(IA[0], pA[0], X, a0)
    for k in range(6):
        a[0, k] = -a0[k]
    for i in range(1, nb):
        _xm_into(XE[i], tree_r[i], a[parent[i]], a[i])
        acc = 0.0
        for k in range(6):
            a[i, k] += c[i, k]
            acc += U[i, k] * a[i, k]
        qdd = (uu[i] - acc) / d[i]
        out[5 + i] = qdd
        for k in range(3):
            a[i, k] += axis[i, k] * qdd

    w, qx, qy, qz = x[3], x[4], x[5], x[6]
    # third row of R, i.e. R^T e_z
    out[0] = a[0, 3] - g * 2.0 * (qx * qz - w * qy)
    out[1] = a[0, 4] - g * 2.0 * (qy * qz + w * qx)
    out[2] = a[0, 5] - g * (1.0 - 2.0 * (qx * qx + qy * qy))
    out[3] = a[0, 0]
    out[4] = a[0, 1]
    out[5] = a[0, 2]


@njit(cache=True)
def aba_input_response(M, ws, base_wrench, dtau, out):
    """Acceleration change for an extra base wrench and joint torques.

    Reuses the articulated quantities left in ``ws`` by the last
    ``aba_into`` call; forward dynamics are affine in these inputs, so the
    result is exact (velocity and gravity terms cancel).
    """
    parent, tree_r, axis = M[0], M[2], M[3]
    XE, v, c, pA, U, d, uu, a, IA, X, T, tmp, a0 = ws
    nb = parent.shape[0]
    # reuse pA / uu / a as scratch for the deltas
    for i in range(nb):
        for k in range(6):
            pA[i, k] = 0.0
    for k in range(6):
        pA[0, k] = -base_wrench[k]
    for i in range(nb - 1, 0, -1):
        uu[i] = dtau[i - 1] - (pA[i, 0] * axis[i, 0] + pA[i, 1] * axis[i, 1] + pA[i, 2] * axis[i, 2])
        for k in range(6):
            tmp[k] = pA[i, k] + U[i, k] * uu[i] / d[i]
        _xtf_add(XE[i], tree_r[i], tmp, pA[parent[i]])
    _chol_solve6(IA[0], pA[0], X, a0)
    for k in range(6):
        a[0, k] = -a0[k]
    for i in range(1, nb):
        _xm_into(XE[i], tree_r[i], a[parent[i]], a[i])
        acc = 0.0
        for k in range(6):
            acc += U[i, k] * a[i, k]
        qdd = (uu[i] - acc) / d[i]
        out[5 + i] = qdd
        for k in range(3):
            a[i, k] += axis[i, k] * qdd
    out[0] = a[0, 3]
    out[1] = a[0, 4]
    out[2] = a[0, 5]
    out[3] = a[0, 0]
    out[4] = a[0, 1]
    out[5] = a[0, 2]


@njit(cache=True)
def aba(M, x, tau, f_ext):
    """Allocating wrapper of ``aba_into``: (base spatial accel angular-first, qdd)."""
    nb = M[0].shape[0]
    out = np.empty(5 + nb)
    aba_into(M, x, tau, f_ext, aba_workspace(nb), out)
    base = np.empty(6)
    base[0:3] = out[3:6]
    base[3:6] = out[0:3]
    return base, out[6:].copy()


@njit(cache=True)
def _control_forces(M, u, nb):
    nprop = M[5].shape[0]
    f_ext = np.zeros((nb, 6))
    f_ext[0] = thrust_wrench(M, u[0:nprop])
    return f_ext, u[nprop:].copy()


@njit(cache=True)
def acceleration_kernel(M, x, u):
    """Generalized acceleration [base linear, base angular, joints] (body frame)."""
    nb = M[0].shape[0]
    f_ext, tau = _control_forces(M, u, nb)
    out = np.empty(5 + nb)
    aba_into(M, x, tau, f_ext, aba_workspace(nb), out)
    return out


@njit(cache=True)
def state_plus(x, dx, nj):
    out = np.empty_like(x)
    quat, t = se3_boxplus(x[3:7].copy(), x[0:3].copy(), dx[0:6].copy())
    out[0:3] = t
    out[3:7] = quat
    out[7:7 + nj] = x[7:7 + nj] + dx[6:6 + nj]
    out[7 + nj:] = x[7 + nj:] + dx[6 + nj:]
    return out


@njit(cache=True)
def state_diff(x0, x1, nj):
    """x1 (-) x0."""
    out = np.empty(12 + 2 * nj)
    out[0:6] = se3_boxminus(x1[3:7].copy(), x1[0:3].copy(), x0[3:7].copy(), x0[0:3].copy())
    out[6:6 + nj] = x1[7:7 + nj] - x0[7:7 + nj]
    out[6 + nj:] = x1[7 + nj:] - x0[7 + nj:]
    return out


@njit(cache=True)
def _euler_substep(x, acc, h, nj):
    out = x.copy()
    nv = 6 + nj
    v0 = x[7 + nj:7 + nj + nv]
    vel = v0 + h * acc
    out[7 + nj:7 + nj + nv] = vel
    # positions advance with the mean of old and new velocity (exact under constant acceleration)
    vm = 0.5 * (v0 + vel)
    quat, t = se3_boxplus(x[3:7].copy(), x[0:3].copy(), h * vm[0:6])
    out[0:3] = t
    out[3:7] = quat
    out[7:7 + nj] = x[7:7 + nj] + h * vm[6:]
    return out


@njit(cache=True)
def integrate_kernel(M, x, u, dt, substeps):
    nj = M[0].shape[0] - 1
    h = dt / substeps
    for _ in range(substeps):
        x = _euler_substep(x, acceleration_kernel(M, x, u), h, nj)
    return x


@njit(cache=True)
def rollout_kernel(M, x0, us, dts, substeps):
    n = us.shape[0]
    xs = np.empty((n + 1, x0.shape[0]))
    xs[0] = x0
    for k in range(n):
        xs[k + 1] = integrate_kernel(M, xs[k], us[k], dts[k], substeps)
    return xs


@njit(cache=True)
def acceleration_derivatives(M, x, u, eps, central):
    """Generalized acceleration and its Jacobians w.r.t. dx and u.

    The gravity-free articulated dynamics do not depend on the base pose, so
    the pose columns reduce to the derivative of R^T g.  Control enters
    affinely: thrusts through the base wrench, torques directly, so the
    control columns are exact responses to unit inputs.
    """
    nb = M[0].shape[0]
    nj = nb - 1
    nv = 6 + nj
    ndx = 12 + 2 * nj
    nu = u.shape[0]
    nprop = M[5].shape[0]
    ws = aba_workspace(nb)
    f_ext, tau = _control_forces(M, u, nb)
    a0 = np.empty(nv)
    aba_into(M, x, tau, f_ext, ws, a0)
    ap = np.empty(nv)
    am = np.empty(nv)
    Ax = np.zeros((nv, ndx))
    R = quat_to_matrix(x[3:7].copy())
    gb = R.T @ np.array([0.0, 0.0, -M[7]])
    Ax[0:3, 3:6] = skew(gb)
    xp = x.copy()
    for i in range(6, ndx):
        xi = x[i + 1]
        xp[i + 1] = xi + eps
        aba_into(M, xp, tau, f_ext, ws, ap)
        if central:
            xp[i + 1] = xi - eps
            aba_into(M, xp, tau, f_ext, ws, am)
            for r in range(nv):
                Ax[r, i] = (ap[r] - am[r]) / (2.0 * eps)
        else:
            for r in range(nv):
                Ax[r, i] = (ap[r] - a0[r]) / eps
        xp[i + 1] = xi
    # exact unit responses, taken about the nominal articulated inertias
    aba_into(M, x, tau, f_ext, ws, ap)
    Au = np.empty((nv, nu))
    unit = np.zeros(nprop)
    zero_w = np.zeros(6)
    dtau = np.zeros(nj)
    for j in range(nu):
        if j < nprop:
            unit[:] = 0.0
            unit[j] = 1.0
            aba_input_response(M, ws, thrust_wrench(M, unit), dtau, ap)
        else:
            dtau[j - nprop] = 1.0
            aba_input_response(M, ws, zero_w, dtau, ap)
            dtau[j - nprop] = 0.0
        Au[:, j] = ap
    return a0, Ax, Au


@njit(cache=True)
def _substep_jacobians(x, acc, Ax, Au, h, nj):
    nv = 6 + nj
    ndx = 12 + 2 * nj
    nu = Au.shape[1]
    x_new = _euler_substep(x, acc, h, nj)
    v0 = x[7 + nj:7 + nj + nv]
    vm = v0 + 0.5 * h * acc
    tau = h * vm[0:6]
    # d vm / d(dx, du)
    dvm_x = 0.5 * h * Ax
    for i in range(nv):
        dvm_x[i, 6 + nj + i] += 1.0
    dvm_u = 0.5 * h * Au
    Sx = np.zeros((ndx, ndx))
    Su = np.zeros((ndx, nu))
    qi, ti = se3_exp(-tau)
    Ad = se3_adjoint(qi, ti)
    Jr = se3_right_jacobian(tau.copy())
    Sx[0:6, 0:6] = Ad
    Sx[0:6, :] += h * (Jr @ dvm_x[0:6])
    Su[0:6, :] = h * (Jr @ dvm_u[0:6])
    for i in range(nj):
        Sx[6 + i, 6 + i] += 1.0
        Sx[6 + i, :] += h * dvm_x[6 + i]
        Su[6 + i, :] = h * dvm_u[6 + i]
    for i in range(nv):
        Sx[6 + nj + i, 6 + nj + i] += 1.0
        Sx[6 + nj + i, :] += h * Ax[i]
        Su[6 + nj + i, :] = h * Au[i]
    return x_new, Sx, Su


@njit(cache=True)
def step_derivatives(M, x, u, dt, substeps, eps, central=False):
    """Next state and its Jacobians in the tangent space."""
    nj = M[0].shape[0] - 1
    ndx = 12 + 2 * nj
    h = dt / substeps
    Fx = np.eye(ndx)
    Fu = np.zeros((ndx, u.shape[0]))
    for _ in range(substeps):
        acc, Ax, Au = acceleration_derivatives(M, x, u, eps, central)
        x, Sx, Su = _substep_jacobians(x, acc, Ax, Au, h, nj)
        Fx = Sx @ Fx
        Fu = Sx @ Fu + Su
    return x, Fx, Fu


@njit(cache=True)
def batch_derivatives(M, xs, us, dts, substeps, eps, central=False):
    n = us.shape[0]
    nj = M[0].shape[0] - 1
    ndx = 12 + 2 * nj
    nu = us.shape[1]
    xn = np.empty((n, xs.shape[1]))
    Fx = np.empty((n, ndx, ndx))
    Fu = np.empty((n, ndx, nu))
    for k in range(n):
        a, b, c = step_derivatives(M, xs[k], us[k], dts[k], substeps, eps, central)
        xn[k] = a
        Fx[k] = b
        Fu[k] = c
    return xn, Fx, Fu


@njit(cache=True)
def batch_step(M, xs, us, dts, substeps):
    n = us.shape[0]
    xn = np.empty((n, xs.shape[1]))
    for k in range(n):
        xn[k] = integrate_kernel(M, xs[k], us[k], dts[k], substeps)
    return xn


# ---------------------------------------------------------------------------
# inverse dynamics / joint-space matrices
# ---------------------------------------------------------------------------

@njit(cache=True)
def rnea(M, x, acc, vel_scale, grav_scale, f_ext):
    """Generalized forces [base force, base torque, joint torques] for ``acc``."""
    parent, axis, inertia, g = M[0], M[3], M[4], M[7]
    nb = parent.shape[0]
    nj = nb - 1
    quat, q, v0, qd = _split(x, nj)
    v0 = v0 * vel_scale
    qd = qd * vel_scale
    XE, Xr = _joint_transforms(M, q)
    R = quat_to_matrix(quat)

    a0 = np.empty(6)
    a0[0:3] = acc[3:6]
    a0[3:6] = acc[0:3]
    a0[3:6] -= grav_scale * (R.T @ np.array([0.0, 0.0, -g]))

    v = np.zeros((nb, 6))
    a = np.zeros((nb, 6))
    f = np.zeros((nb, 6))
    S = np.zeros((nb, 6))
    v[0] = v0
    a[0] = a0
    for i in range(1, nb):
        S[i, 0:3] = axis[i]
        vJ = S[i] * qd[i - 1]
        v[i] = _xm(XE[i], Xr[i], v[parent[i]]) + vJ
        a[i] = _xm(XE[i], Xr[i], a[parent[i]]) + S[i] * acc[5 + i] + _crm(v[i], vJ)
    for i in range(nb):
        Iv = inertia[i] @ v[i]
        f[i] = inertia[i] @ a[i] + _crf(v[i], Iv) - f_ext[i]
    tau = np.zeros(6 + nj)
    for i in range(nb - 1, 0, -1):
        tau[5 + i] = S[i] @ f[i]
        f[parent[i]] += _xtf(XE[i], Xr[i], f[i])
    tau[0:3] = f[0, 3:6]
    tau[3:6] = f[0, 0:3]
    return tau


@njit(cache=True)
def mass_matrix_kernel(M, x):
    nv = 6 + M[0].shape[0] - 1
    nb = M[0].shape[0]
    H = np.empty((nv, nv))
    zero_f = np.zeros((nb, 6))
    for j in range(nv):
        e = np.zeros(nv)
        e[j] = 1.0
        H[:, j] = rnea(M, x, e, 0.0, 0.0, zero_f)
    return 0.5 * (H + H.T)


# ---------------------------------------------------------------------------
# kinematics
# ---------------------------------------------------------------------------

@njit(cache=True)
def body_poses(M, x):
    """World rotation and origin of every body frame."""
    parent, tree_E, tree_r, axis = M[0], M[1], M[2], M[3]
    nb = parent.shape[0]
    nj = nb - 1
    Rw = np.zeros((nb, 3, 3))
    pw = np.zeros((nb, 3))
    Rw[0] = quat_to_matrix(x[3:7].copy())
    pw[0] = x[0:3]
    for i in range(1, nb):
        p = parent[i]
        Rw[i] = Rw[p] @ tree_E[i].T @ _axis_rotation(axis[i], x[6 + i])
        pw[i] = pw[p] + Rw[p] @ tree_r[i]
    return Rw, pw


@njit(cache=True)
def body_velocities(M, x):
    """Spatial velocity of every body, body coordinates, angular-first."""
    parent, axis = M[0], M[3]
    nb = parent.shape[0]
    nj = nb - 1
    quat, q, v0, qd = _split(x, nj)
    XE, Xr = _joint_transforms(M, q)
    v = np.zeros((nb, 6))
    v[0] = v0
    for i in range(1, nb):
        s = np.zeros(6)
        s[0:3] = axis[i]
        v[i] = _xm(XE[i], Xr[i], v[parent[i]]) + s * qd[i - 1]
    return v


@njit(cache=True)
def point_velocity(M, x, body, offset):
    Rw, pw = body_poses(M, x)
    v = body_velocities(M, x)[body]
    return Rw[body] @ (v[3:6] + np.cross(v[0:3], offset))


@njit(cache=True)
def point_jacobian(M, x, body, offset):
    """d(world point)/d(dx) for the configuration part of dx (6 + nj columns)."""
    parent, axis = M[0], M[3]
    nb = parent.shape[0]
    nj = nb - 1
    Rw, pw = body_poses(M, x)
    p = pw[body] + Rw[body] @ offset
    J = np.zeros((3, 6 + nj))
    R0 = Rw[0]
    J[:, 0:3] = R0
    J[:, 3:6] = -R0 @ skew(R0.T @ (p - pw[0]))
    i = body
    while i > 0:
        a = Rw[i] @ axis[i]
        J[:, 5 + i] = np.cross(a, p - pw[i])
        i = parent[i]
    return J


@njit(cache=True)
def com_kernel(M, x):
    mass, com = M[8], M[9]
    Rw, pw = body_poses(M, x)
    c = np.zeros(3)
    for i in range(mass.shape[0]):
        c += mass[i] * (pw[i] + Rw[i] @ com[i])
    return c / mass.sum()


def _kin_args(model: RobotModel) -> tuple:
    k = model.kernel()
    return kernel_args(model) + (k.mass, k.com)


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------

def forward_dynamics(model: RobotModel, state, control) -> Acceleration:
    acc = acceleration_kernel(kernel_args(model), _as_x(state), _as_u(control))
    if not np.all(np.isfinite(acc)):
        raise FloatingPointError(f"non-finite acceleration {acc}")
    return Acceleration(Tangent6(acc[0:3], acc[3:6]), acc[6:])


def integrate(model: RobotModel, state, control, dt: float, substeps: int = 1):
    """Semi-implicit Euler under constant control; returns the same type as ``state``."""
    if dt <= 0 or substeps < 1:
        raise ValueError("dt must be > 0 and substeps >= 1")
    xn = integrate_kernel(kernel_args(model), _as_x(state), _as_u(control), float(dt), int(substeps))
    if isinstance(state, State):
        return State.from_vector(xn, model.n_joints)
    return xn


def rollout(model: RobotModel, x0, U, dt: float, substeps: int = 1) -> list:
    xs = [x0]
    for u in U:
        xs.append(integrate(model, xs[-1], u, dt, substeps))
    return xs


def diff(model: RobotModel, x0, x1) -> np.ndarray:
    """x1 (-) x0 on the state manifold."""
    return state_diff(_as_x(x0), _as_x(x1), model.n_joints)


def plus(model: RobotModel, x, dx) -> np.ndarray:
    return state_plus(_as_x(x), np.asarray(dx, float), model.n_joints)


def mass_matrix(model: RobotModel, state) -> np.ndarray:
    return mass_matrix_kernel(kernel_args(model), _as_x(state))


def bias_forces(model: RobotModel, state, control=None, f_ext=None) -> np.ndarray:
    """Generalized forces needed for zero acceleration, minus the control forces."""
    M = kernel_args(model)
    nb = len(model.links)
    fx = np.zeros((nb, 6)) if f_ext is None else np.array(f_ext, float)
    tau = np.zeros(model.n_joints)
    if control is not None:
        u = _as_u(control)
        fx[0] += thrust_wrench(M, u[:model.n_props])
        tau = u[model.n_props:]
    h = rnea(M, _as_x(state), np.zeros(6 + model.n_joints), 1.0, 1.0, fx)
    h[6:] -= tau
    return h


def body_placements(model: RobotModel, state):
    return body_poses(kernel_args(model), _as_x(state))


def frame_position(model: RobotModel, state, frame: str = "ee") -> np.ndarray:
    f = model.frames[frame]
    Rw, pw = body_placements(model, state)
    b = model.link_index(f.parent)
    return pw[b] + Rw[b] @ f.offset


def frame_velocity(model: RobotModel, state, frame: str = "ee") -> np.ndarray:
    f = model.frames[frame]
    return point_velocity(kernel_args(model), _as_x(state), model.link_index(f.parent), f.offset)


def frame_jacobian(model: RobotModel, state, frame: str = "ee") -> np.ndarray:
    f = model.frames[frame]
    return point_jacobian(kernel_args(model), _as_x(state), model.link_index(f.parent), f.offset)


def com_position(model: RobotModel, state) -> np.ndarray:
    return com_kernel(_kin_args(model), _as_x(state))


def _body_world_quantities(model, x):
    M = kernel_args(model)
    Rw, pw = body_poses(M, x)
    v = body_velocities(M, x)
    return Rw, pw, v


def kinetic_energy(model: RobotModel, state) -> float:
    v = body_velocities(kernel_args(model), _as_x(state))
    k = model.kernel()
    return float(sum(0.5 * v[i] @ k.inertia[i] @ v[i] for i in range(len(model.links))))


def potential_energy(model: RobotModel, state) -> float:
    return model.total_mass * model.gravity * float(com_position(model, state)[2])


def momentum(model: RobotModel, state) -> tuple[np.ndarray, np.ndarray]:
    """World-frame linear momentum and angular momentum about the world origin."""
    Rw, pw, v = _body_world_quantities(model, _as_x(state))
    k = model.kernel()
    lin = np.zeros(3)
    ang = np.zeros(3)
    for i in range(len(model.links)):
        h = k.inertia[i] @ v[i]
        hl = Rw[i] @ h[3:6]
        lin += hl
        ang += Rw[i] @ h[0:3] + np.cross(pw[i], hl)
    return lin, ang


def com_velocity(model: RobotModel, state) -> np.ndarray:
    return momentum(model, state)[0] / model.total_mass


def com_acceleration(model: RobotModel, state, acceleration) -> np.ndarray:
    """World-frame CoM acceleration from a generalized acceleration."""
    x = _as_x(state)
    acc = acceleration.vector() if isinstance(acceleration, Acceleration) else np.asarray(acceleration)
    M = kernel_args(model)
    Rw, pw = body_poses(M, x)
    v = body_velocities(M, x)
    nj = model.n_joints
    _, q, _, qd = _split(x, nj)
    XE, Xr = _joint_transforms(M, q)
    k = model.kernel()
    nb = len(model.links)
    a = np.zeros((nb, 6))
    a[0, 0:3] = acc[3:6]
    a[0, 3:6] = acc[0:3]
    for i in range(1, nb):
        s = np.zeros(6)
        s[0:3] = k.axis[i]
        a[i] = _xm(XE[i], Xr[i], a[k.parent[i]]) + s * acc[5 + i] + _crm(v[i], s * qd[i - 1])
    out = np.zeros(3)
    for i in range(nb):
        c = k.com[i]
        w, vl = v[i, 0:3], v[i, 3:6]
        # classical acceleration of the body CoM from spatial quantities
        ac = a[i, 3:6] + np.cross(a[i, 0:3], c) + np.cross(w, vl + np.cross(w, c))
        out += k.mass[i] * (Rw[i] @ ac)
    return out / model.total_mass
