"""Residual cost terms with Gauss-Newton derivatives.

Every term is ``0.5 * r^T W r`` with a diagonal, non-negative ``W``.
Derivatives are taken w.r.t. the state tangent ``dx`` (x (+) dx) and the
control, and are returned as ``(l, lx, lu, lxx, luu, lxu)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import dynamics as D
from .liegroup import quat_to_matrix, se3_right_jacobian_inv
from .model import RobotModel

NAVIGATION = "navigation"
TASK = "task"


def _diag(weights, n: int, what: str) -> np.ndarray:
    w = np.broadcast_to(np.asarray(weights, float), (n,)).copy()
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError(f"{what}: weights must be finite and >= 0")
    return w


@dataclass(frozen=True, eq=False)
class CostDerivatives:
    l: float
    lx: np.ndarray
    lu: np.ndarray
    lxx: np.ndarray
    luu: np.ndarray
    lxu: np.ndarray

    @classmethod
    def zeros(cls, ndx: int, nu: int) -> CostDerivatives:
        return cls(0.0, np.zeros(ndx), np.zeros(nu), np.zeros((ndx, ndx)),
                   np.zeros((nu, nu)), np.zeros((ndx, nu)))


class ResidualTerm:
    kind = ""
    regularization = False

    def residual(self, x, u) -> np.ndarray:
        raise NotImplementedError

    def cost(self, x, u) -> float:
        r = self.residual(x, u)
        return 0.5 * float(r @ (self.weights * r))

    def accumulate(self, x, u, d: dict) -> None:
        """Add this term's value and Gauss-Newton derivatives into ``d``."""
        raise NotImplementedError

    def scaled(self, c: float) -> ResidualTerm:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class StateTracking(ResidualTerm):
    """r = x (-) x_ref, weighted per tangent coordinate."""

    x_ref: np.ndarray
    weights: np.ndarray
    n_joints: int
    kind = "state_tracking"

    def __post_init__(self):
        ndx = 12 + 2 * self.n_joints
        object.__setattr__(self, "x_ref", np.asarray(self.x_ref, float))
        object.__setattr__(self, "weights", _diag(self.weights, ndx, self.kind))

    def residual(self, x, u=None):
        return D.state_diff(self.x_ref, np.asarray(x, float), self.n_joints)

    def accumulate(self, x, u, d):
        r = self.residual(x)
        w = self.weights
        wr = w * r
        d["l"] += 0.5 * float(r @ wr)
        Jp = se3_right_jacobian_inv(r[:6].copy())
        d["lx"][:6] += Jp.T @ wr[:6]
        d["lx"][6:] += wr[6:]
        d["lxx"][:6, :6] += Jp.T @ (w[:6, None] * Jp)
        idx = np.arange(6, r.size)
        d["lxx"][idx, idx] += w[6:]

    def scaled(self, c):
        return StateTracking(self.x_ref, self.weights * c, self.n_joints)


@dataclass(frozen=True, eq=False)
class ControlReg(ResidualTerm):
    """r = u - u_ref (u_ref defaults to zero)."""

    weights: np.ndarray
    u_ref: np.ndarray | None = None
    kind = "control_reg"
    regularization = True

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, float))
        n = w.size if self.u_ref is None else np.asarray(self.u_ref).size
        object.__setattr__(self, "weights", _diag(w, n, self.kind))
        if self.u_ref is not None:
            object.__setattr__(self, "u_ref", np.asarray(self.u_ref, float))

    def residual(self, x, u):
        u = np.asarray(u, float)
        return u if self.u_ref is None else u - self.u_ref

    def accumulate(self, x, u, d):
        r = self.residual(x, u)
        wr = self.weights * r
        d["l"] += 0.5 * float(r @ wr)
        d["lu"] += wr
        idx = np.arange(r.size)
        d["luu"][idx, idx] += self.weights

    def scaled(self, c):
        return ControlReg(self.weights * c, self.u_ref)


@dataclass(frozen=True, eq=False)
class EEPosition(ResidualTerm):
    """r = p_frame(x) - target (world frame)."""

    model: RobotModel
    target: np.ndarray
    weights: np.ndarray
    frame: str = "ee"
    kind = "ee_position"

    def __post_init__(self):
        object.__setattr__(self, "target", np.asarray(self.target, float).reshape(3))
        object.__setattr__(self, "weights", _diag(self.weights, 3, self.kind))
        if self.frame not in self.model.frames:
            raise ValueError(f"ee_position: unknown frame '{self.frame}'")

    def residual(self, x, u=None):
        return D.frame_position(self.model, x, self.frame) - self.target

    def accumulate(self, x, u, d):
        r = self.residual(x)
        wr = self.weights * r
        J = D.frame_jacobian(self.model, x, self.frame)
        n = J.shape[1]
        d["l"] += 0.5 * float(r @ wr)
        d["lx"][:n] += J.T @ wr
        d["lxx"][:n, :n] += J.T @ (self.weights[:, None] * J)

    def scaled(self, c):
        return EEPosition(self.model, self.target, self.weights * c, self.frame)


def base_pitch(x) -> float:
    """Z-Y-X pitch angle of the base."""
    R = quat_to_matrix(np.asarray(x[3:7], float))
    return math.atan2(-R[2, 0], math.hypot(R[0, 0], R[1, 0]))


@dataclass(frozen=True, eq=False)
class BasePitch(ResidualTerm):
    target: float
    weights: np.ndarray
    kind = "base_pitch"

    def __post_init__(self):
        object.__setattr__(self, "weights", _diag(self.weights, 1, self.kind))

    def residual(self, x, u=None):
        return np.array([base_pitch(x) - self.target])

    def accumulate(self, x, u, d):
        R = quat_to_matrix(np.asarray(x[3:7], float))
        c = math.hypot(R[0, 0], R[1, 0])
        r = base_pitch(x) - self.target
        w = self.weights[0]
        # pitch = -asin(R20); under R -> R Exp(dtheta), dR20 = R21 dtheta_z - R22 dtheta_y
        J = np.zeros(3)
        if c > 1e-9:
            J[1] = R[2, 2] / c
            J[2] = -R[2, 1] / c
        d["l"] += 0.5 * w * r * r
        d["lx"][3:6] += w * r * J
        d["lxx"][3:6, 3:6] += w * np.outer(J, J)

    def scaled(self, c):
        return BasePitch(self.target, self.weights * c)


@dataclass(frozen=True, eq=False)
class JointBarrier(ResidualTerm):
    """One-sided quadratic outside [lower, upper]; zero inside."""

    lower: np.ndarray
    upper: np.ndarray
    weights: np.ndarray
    kind = "joint_barrier"
    regularization = True

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, float))
        hi = np.atleast_1d(np.asarray(self.upper, float))
        if lo.shape != hi.shape or np.any(lo >= hi):
            raise ValueError("joint_barrier: need lower < upper")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "weights", _diag(self.weights, lo.size, self.kind))

    @classmethod
    def from_model(cls, model: RobotModel, weight: float, margin: float = 0.05) -> JointBarrier:
        return cls(model.joint_lower + margin, model.joint_upper - margin, weight)

    def residual(self, x, u=None):
        q = np.asarray(x, float)[7:7 + self.lower.size]
        return q - np.clip(q, self.lower, self.upper)

    def accumulate(self, x, u, d):
        r = self.residual(x)
        active = (r != 0.0).astype(float)
        n = r.size
        d["l"] += 0.5 * float(r @ (self.weights * r))
        d["lx"][6:6 + n] += self.weights * r
        idx = np.arange(6, 6 + n)
        d["lxx"][idx, idx] += self.weights * active

    def scaled(self, c):
        return JointBarrier(self.lower, self.upper, self.weights * c)


@dataclass(frozen=True, eq=False)
class NodeCost:
    terms: tuple[ResidualTerm, ...]
    ndx: int
    nu: int
    node_kind: str = NAVIGATION

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if self.node_kind not in (NAVIGATION, TASK):
            raise ValueError(f"node kind must be '{NAVIGATION}' or '{TASK}'")
        if self.node_kind == TASK and all(t.regularization for t in self.terms):
            raise ValueError("task nodes need at least one non-regularization term")

    def eval(self, x, u) -> float:
        return float(sum(t.cost(x, u) for t in self.terms))

    def calc_diff(self, x, u) -> CostDerivatives:
        z = CostDerivatives.zeros(self.ndx, self.nu)
        d = {"l": 0.0, "lx": z.lx, "lu": z.lu, "lxx": z.lxx, "luu": z.luu, "lxu": z.lxu}
        x = np.asarray(x, float)
        u = np.asarray(u, float)
        for t in self.terms:
            t.accumulate(x, u, d)
        return CostDerivatives(d["l"], z.lx, z.lu, z.lxx, z.luu, z.lxu)

    def quadratic_approx(self, x, u) -> tuple[np.ndarray, np.ndarray]:
        """Gradient and Gauss-Newton Hessian over the stacked [dx, du]."""
        c = self.calc_diff(x, u)
        g = np.concatenate([c.lx, c.lu])
        H = np.block([[c.lxx, c.lxu], [c.lxu.T, c.luu]])
        return g, H

    def scaled(self, c: float) -> NodeCost:
        return NodeCost(tuple(t.scaled(c) for t in self.terms), self.ndx, self.nu, self.node_kind)

    def kinds(self) -> set[str]:
        return {t.kind for t in self.terms}


def default_state_weights(n_joints: int, position=10.0, orientation=10.0, velocity=1.0,
                          joints=5.0, joint_rates=None) -> np.ndarray:
    """Diagonal W_x: pose, joint angles, base twist, joint rates."""
    jr = velocity if joint_rates is None else joint_rates
    return np.concatenate([np.full(3, position), np.full(3, orientation), np.full(n_joints, joints),
                           np.full(6, velocity), np.full(n_joints, jr)])


def default_control_weights(n_props: int, n_joints: int, thrust=0.1, torque=0.1) -> np.ndarray:
    return np.concatenate([np.full(n_props, thrust), np.full(n_joints, torque)])


@njit(cache=True)
def _tracking_value(xs, us, x_refs, u_refs, wx, wu, nj):
    total = 0.0
    N = us.shape[0]
    for t in range(N + 1):
        r = D.state_diff(x_refs[t], xs[t], nj)
        total += 0.5 * np.sum(wx[t] * r * r)
        if t < N:
            du = us[t] - u_refs[t]
            total += 0.5 * np.sum(wu[t] * du * du)
    return total


@njit(cache=True)
def _tracking_derivatives(xs, us, x_refs, u_refs, wx, wu, nj):
    N, nu = us.shape
    ndx = wx.shape[1]
    Lx = np.zeros((N + 1, ndx))
    Lxx = np.zeros((N + 1, ndx, ndx))
    Lu = np.zeros((N, nu))
    Luu = np.zeros((N, nu, nu))
    total = 0.0
    for t in range(N + 1):
        r = D.state_diff(x_refs[t], xs[t], nj)
        w = wx[t]
        wr = w * r
        total += 0.5 * np.sum(wr * r)
        Jp = se3_right_jacobian_inv(r[:6].copy())
        for i in range(6):
            s = 0.0
            for k in range(6):
                s += Jp[k, i] * wr[k]
            Lx[t, i] = s
            for j in range(6):
                s = 0.0
                for k in range(6):
                    s += Jp[k, i] * w[k] * Jp[k, j]
                Lxx[t, i, j] = s
        for i in range(6, ndx):
            Lx[t, i] = wr[i]
            Lxx[t, i, i] = w[i]
        if t < N:
            for i in range(nu):
                du = us[t, i] - u_refs[t, i]
                total += 0.5 * wu[t, i] * du * du
                Lu[t, i] = wu[t, i] * du
                Luu[t, i, i] = wu[t, i]
    return total, Lx, Lu, Lxx, Luu


@dataclass(frozen=True, eq=False)
class TrackingBatch:
    """Whole-horizon ``sum 0.5|x_t (-) x_ref_t|^2_Wx + 0.5|u_t - u_ref_t|^2_Wu``.

    Compiled equivalent of a problem whose nodes hold only a StateTracking and
    a ControlReg term (the terminal node only StateTracking).
    """

    x_refs: np.ndarray
    u_refs: np.ndarray
    wx: np.ndarray
    wu: np.ndarray
    n_joints: int

    @property
    def N(self) -> int:
        return self.u_refs.shape[0]

    def value(self, xs, us) -> float:
        return _tracking_value(xs, us, self.x_refs, self.u_refs, self.wx, self.wu, self.n_joints)

    def derivatives(self, xs, us) -> tuple:
        total, Lx, Lu, Lxx, Luu = _tracking_derivatives(xs, us, self.x_refs, self.u_refs,
                                                        self.wx, self.wu, self.n_joints)
        return total, Lx, Lu, Lxx, Luu, np.zeros((us.shape[0], self.wx.shape[1], us.shape[1]))

    def scaled(self, c: float) -> TrackingBatch:
        return TrackingBatch(self.x_refs, self.u_refs, self.wx * c, self.wu * c, self.n_joints)

    def node_costs(self) -> tuple[list, NodeCost]:
        """Equivalent per-node costs (reference path and structural checks)."""
        N, nu = self.u_refs.shape
        ndx = self.wx.shape[1]
        running = [NodeCost([StateTracking(self.x_refs[t], self.wx[t], self.n_joints),
                             ControlReg(self.wu[t], self.u_refs[t])], ndx, nu) for t in range(N)]
        terminal = NodeCost([StateTracking(self.x_refs[N], self.wx[N], self.n_joints)], ndx, nu)
        return running, terminal


@njit(cache=True)
def _state_tracking_group(xs, idx, refs, w, nj, Lx, Lxx, with_derivatives):
    total = 0.0
    for n in range(idx.shape[0]):
        t = idx[n]
        r = D.state_diff(refs[n], xs[t], nj)
        wr = w[n] * r
        total += 0.5 * np.sum(wr * r)
        if not with_derivatives:
            continue
        Jp = se3_right_jacobian_inv(r[:6].copy())
        for i in range(6):
            s = 0.0
            for k in range(6):
                s += Jp[k, i] * wr[k]
            Lx[t, i] += s
            for j in range(6):
                s = 0.0
                for k in range(6):
                    s += Jp[k, i] * w[n, k] * Jp[k, j]
                Lxx[t, i, j] += s
        for i in range(6, r.shape[0]):
            Lx[t, i] += wr[i]
            Lxx[t, i, i] += w[n, i]
    return total


@njit(cache=True)
def _control_group(us, idx, refs, w, Lu, Luu, with_derivatives):
    total = 0.0
    for n in range(idx.shape[0]):
        t = idx[n]
        for i in range(us.shape[1]):
            r = us[t, i] - refs[n, i]
            total += 0.5 * w[n, i] * r * r
            if with_derivatives:
                Lu[t, i] += w[n, i] * r
                Luu[t, i, i] += w[n, i]
    return total


@njit(cache=True)
def _barrier_group(xs, idx, lo, hi, w, Lx, Lxx, with_derivatives):
    total = 0.0
    for n in range(idx.shape[0]):
        t = idx[n]
        for i in range(lo.shape[1]):
            q = xs[t, 7 + i]
            r = 0.0
            if q > hi[n, i]:
                r = q - hi[n, i]
            elif q < lo[n, i]:
                r = q - lo[n, i]
            if r != 0.0:
                total += 0.5 * w[n, i] * r * r
                if with_derivatives:
                    Lx[t, 6 + i] += w[n, i] * r
                    Lxx[t, 6 + i, 6 + i] += w[n, i]
    return total


class GroupedCosts:
    """Horizon cost evaluated term-type by term-type in compiled loops.

    Built from per-node NodeCosts; StateTracking, ControlReg and JointBarrier
    terms of all nodes are stacked into arrays, any other term is evaluated
    through its own ``accumulate``.  Terminal control terms are ignored, as in
    the per-node path.
    """

    def __init__(self, running, terminal, ndx: int, nu: int):
        nodes = list(running) + [terminal]
        self.N, self.ndx, self.nu = len(running), ndx, nu
        st, cr, jb, self.other = [], [], [], []
        self.n_joints = 0
        for t, node in enumerate(nodes):
            for term in node.terms:
                if isinstance(term, StateTracking):
                    st.append((t, term.x_ref, term.weights))
                    self.n_joints = term.n_joints
                elif isinstance(term, ControlReg):
                    if t < self.N:
                        ref = np.zeros(nu) if term.u_ref is None else term.u_ref
                        cr.append((t, ref, term.weights))
                elif isinstance(term, JointBarrier):
                    jb.append((t, term.lower, term.upper, term.weights))
                else:
                    self.other.append((t, term))
        if not st:
            self.n_joints = (ndx - 12) // 2
        self._st = self._stack(st, (ndx + 1, ndx))
        self._cr = self._stack(cr, (nu, nu))
        self._jb = self._stack(jb, (1, 1, 1))

    @staticmethod
    def _stack(rows, widths):
        if not rows:
            return (np.zeros(0, np.int64),) + tuple(np.zeros((0, w)) for w in widths)
        cols = list(zip(*rows))
        return (np.array(cols[0], np.int64),) + tuple(np.array(c, float) for c in cols[1:])

    def _evaluate(self, xs, us, derivs):
        N, ndx, nu = self.N, self.ndx, self.nu
        Lx = np.zeros((N + 1, ndx))
        Lxx = np.zeros((N + 1, ndx, ndx))
        Lu = np.zeros((N, nu))
        Luu = np.zeros((N, nu, nu))
        Lxu = np.zeros((N, ndx, nu))
        xs = np.ascontiguousarray(xs, dtype=float)
        us = np.ascontiguousarray(us, dtype=float)
        total = _state_tracking_group(xs, *self._st, self.n_joints, Lx, Lxx, derivs)
        total += _control_group(us, *self._cr, Lu, Luu, derivs)
        total += _barrier_group(xs, *self._jb, Lx, Lxx, derivs)
        for t, term in self.other:
            u = us[t] if t < N else np.zeros(nu)
            if derivs:
                d = {"l": 0.0, "lx": Lx[t], "lu": Lu[t] if t < N else np.zeros(nu), "lxx": Lxx[t],
                     "luu": Luu[t] if t < N else np.zeros((nu, nu)),
                     "lxu": Lxu[t] if t < N else np.zeros((ndx, nu))}
                term.accumulate(xs[t], u, d)
                total += d["l"]
            else:
                total += term.cost(xs[t], u)
        return total, Lx, Lu, Lxx, Luu, Lxu

    def value(self, xs, us) -> float:
        return float(self._evaluate(xs, us, False)[0])

    def derivatives(self, xs, us) -> tuple:
        return self._evaluate(xs, us, True)
