"""Feasibility-driven DDP with box-bounded controls through a logistic squash.

The solver iterates on raw, unbounded controls ``w`` and hands
``u = lb + (ub - lb) * sigmoid(s * w)`` to the dynamics and the costs, so
every control it returns lies within the bounds (strictly inside up to
floating-point saturation of the sigmoid).  Multiple shooting
gaps ``f_t = f(x_{t-1}, u_{t-1}) (-) x_t`` are tolerated in the warm start and
closed by the nonlinear rollout (fully when the step length is 1).

A problem needs three things: a dynamics object (``nx``, ``ndx``, ``plus``,
``diff``, ``step``, ``derivatives``), one cost per running node exposing
``eval(x, u)`` / ``calc_diff(x, u)``, and a terminal cost.  A problem may
also carry a compiled ``batch_cost`` that evaluates the whole horizon at once;
it must agree with the per-node costs.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import dynamics as D
from .costs import CostDerivatives, GroupedCosts, NodeCost
from .model import RobotModel

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# squashing
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SquashConfig:
    lower: np.ndarray
    upper: np.ndarray
    sharpness: np.ndarray

    @classmethod
    def from_bounds(cls, lower, upper, sharpness=None) -> SquashConfig:
        lo = np.asarray(lower, float)
        hi = np.asarray(upper, float)
        if lo.shape != hi.shape or not np.all(lo < hi) or not np.all(np.isfinite(hi - lo)):
            raise ValueError("bounds must be finite with lower < upper")
        s = 10.0 / (hi - lo) if sharpness is None else np.broadcast_to(np.asarray(sharpness, float), lo.shape).copy()
        return cls(lo, hi, s)

    def squash(self, w) -> np.ndarray:
        return squash(w, self.lower, self.upper, self.sharpness)

    def derivative(self, w) -> np.ndarray:
        return squash_derivative(w, self.lower, self.upper, self.sharpness)

    def unsquash(self, u) -> np.ndarray:
        return unsquash(u, self.lower, self.upper, self.sharpness)


def _sigmoid(z):
    # overflow-free logistic
    z = np.asarray(z, float)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def squash(w, lower, upper, sharpness):
    return lower + (upper - lower) * _sigmoid(sharpness * np.asarray(w, float))


def squash_derivative(w, lower, upper, sharpness):
    s = _sigmoid(sharpness * np.asarray(w, float))
    return (upper - lower) * sharpness * s * (1.0 - s)


def unsquash(u, lower, upper, sharpness, margin=1e-9):
    frac = np.clip((np.asarray(u, float) - lower) / (upper - lower), margin, 1.0 - margin)
    return np.log(frac / (1.0 - frac)) / sharpness


# ---------------------------------------------------------------------------
# dynamics adapters
# ---------------------------------------------------------------------------

class RobotDynamics:
    """Whole-body dynamics with compiled steps and step derivatives."""

    def __init__(self, model: RobotModel, substeps: int = 1, eps: float = 1e-7):
        self.model = model
        self.substeps = int(substeps)
        self.eps = float(eps)
        self.args = D.kernel_args(model)
        self.nx, self.ndx, self.nu = model.nx, model.ndx, model.nu
        self._nj = model.n_joints

    def plus(self, x, dx):
        return D.state_plus(x, dx, self._nj)

    def diff(self, x0, x1):
        return D.state_diff(x0, x1, self._nj)

    def step(self, xs, us, dts):
        return D.batch_step(self.args, xs, us, dts, self.substeps)

    def derivatives(self, xs, us, dts):
        return D.batch_derivatives(self.args, xs, us, dts, self.substeps, self.eps)


class LinearDynamics:
    """x+ = A x + B u + c on a Euclidean state."""

    def __init__(self, A, B, c=None):
        self.A = np.asarray(A, float)
        self.B = np.asarray(B, float)
        self.c = np.zeros(self.A.shape[0]) if c is None else np.asarray(c, float)
        self.nx = self.ndx = self.A.shape[0]
        self.nu = self.B.shape[1]

    def plus(self, x, dx):
        return x + dx

    def diff(self, x0, x1):
        return x1 - x0

    def step(self, xs, us, dts):
        return xs @ self.A.T + us @ self.B.T + self.c

    def derivatives(self, xs, us, dts):
        n = us.shape[0]
        return (self.step(xs, us, dts), np.broadcast_to(self.A, (n,) + self.A.shape).copy(),
                np.broadcast_to(self.B, (n,) + self.B.shape).copy())


@dataclass(frozen=True, eq=False)
class QuadraticCost:
    """0.5 (x - x_ref)^T Q (x - x_ref) + 0.5 (u - u_ref)^T R (u - u_ref) on Euclidean states."""

    Q: np.ndarray
    R: np.ndarray | None = None
    x_ref: np.ndarray | None = None
    u_ref: np.ndarray | None = None

    def _dx(self, x):
        return x if self.x_ref is None else x - self.x_ref

    def _du(self, u):
        return u if self.u_ref is None else u - self.u_ref

    def eval(self, x, u) -> float:
        dx = self._dx(np.asarray(x, float))
        v = 0.5 * dx @ self.Q @ dx
        if self.R is not None and u is not None:
            du = self._du(np.asarray(u, float))
            v += 0.5 * du @ self.R @ du
        return float(v)

    def calc_diff(self, x, u) -> CostDerivatives:
        dx = self._dx(np.asarray(x, float))
        nu = 0 if u is None else len(u)
        R = np.zeros((nu, nu)) if self.R is None else self.R
        du = np.zeros(nu) if u is None else self._du(np.asarray(u, float))
        return CostDerivatives(self.eval(x, u), self.Q @ dx, R @ du, self.Q.copy(), R.copy(),
                               np.zeros((dx.size, nu)))

    def scaled(self, c):
        return QuadraticCost(self.Q * c, None if self.R is None else self.R * c, self.x_ref, self.u_ref)


# ---------------------------------------------------------------------------
# problem / result
# ---------------------------------------------------------------------------

class ShootingProblem:
    """Discretized OCP: initial state, node costs, dynamics and control bounds.

    With ``batch_cost`` given, ``running``/``terminal`` may be omitted; they
    are then built from ``batch_cost.node_costs()`` on first access.  When
    every node is a NodeCost the horizon is evaluated through GroupedCosts.
    """

    def __init__(self, x0, running, terminal, dts, dynamics, lower, upper, sharpness=None,
                 batch_cost=None):
        self.x0 = np.asarray(x0, float)
        self.batch_cost = batch_cost
        if running is None:
            if batch_cost is None:
                raise ValueError("running costs are required without a batch cost")
            self._running, self._terminal = None, None
            n = batch_cost.N
        else:
            self._running, self._terminal = list(running), terminal
            n = len(self._running)
        if n < 1:
            raise ValueError("a shooting problem needs at least one running node")
        self.dts = np.broadcast_to(np.asarray(dts, float), (n,)).copy()
        if np.any(self.dts <= 0):
            raise ValueError("node dt must be > 0")
        self.dynamics = dynamics
        self.squash = SquashConfig.from_bounds(lower, upper, sharpness)
        self.lower, self.upper = self.squash.lower, self.squash.upper
        self._n = n
        if batch_cost is None and all(isinstance(c, NodeCost) for c in self._running + [terminal]):
            self.batch_cost = GroupedCosts(self._running, terminal, dynamics.ndx, self.lower.size)
            self._grouped = True
        else:
            self._grouped = False

    def _materialize(self):
        if self._running is None:
            running, self._terminal = self.batch_cost.node_costs()
            self._running = list(running)

    @property
    def running(self) -> list:
        self._materialize()
        return self._running

    @property
    def terminal(self):
        self._materialize()
        return self._terminal

    @property
    def N(self) -> int:
        return self._n

    @property
    def nu(self) -> int:
        return self.lower.size

    def total_cost(self, xs, us) -> float:
        if self.batch_cost is not None:
            return float(self.batch_cost.value(xs, us))
        c = sum(cost.eval(xs[t], us[t]) for t, cost in enumerate(self.running))
        return float(c + self.terminal.eval(xs[-1], None))

    def cost_derivatives(self, xs, us) -> tuple:
        if self.batch_cost is not None:
            return self.batch_cost.derivatives(xs, us)
        N, ndx, nu = self.N, self.dynamics.ndx, self.nu
        Lx = np.zeros((N + 1, ndx))
        Lxx = np.zeros((N + 1, ndx, ndx))
        Lu = np.zeros((N, nu))
        Luu = np.zeros((N, nu, nu))
        Lxu = np.zeros((N, ndx, nu))
        total = 0.0
        for t, cost in enumerate(self.running):
            c = cost.calc_diff(xs[t], us[t])
            total += c.l
            Lx[t], Lu[t], Lxx[t], Luu[t], Lxu[t] = c.lx, c.lu, c.lxx, c.luu, c.lxu
        c = self.terminal.calc_diff(xs[-1], np.zeros(nu))
        total += c.l
        Lx[N], Lxx[N] = c.lx, c.lxx
        return total, Lx, Lu, Lxx, Luu, Lxu

    def rollout(self, us) -> np.ndarray:
        xs = np.empty((self.N + 1, self.x0.size))
        xs[0] = self.x0
        for t in range(self.N):
            xs[t + 1] = self.dynamics.step(xs[t:t + 1], us[t:t + 1], self.dts[t:t + 1])[0]
        return xs

    def scaled(self, c: float) -> ShootingProblem:
        if self.batch_cost is not None and not self._grouped:
            return ShootingProblem(self.x0, None, None, self.dts, self.dynamics, self.lower, self.upper,
                                   self.squash.sharpness, self.batch_cost.scaled(c))
        return ShootingProblem(self.x0, [r.scaled(c) for r in self.running], self.terminal.scaled(c),
                               self.dts, self.dynamics, self.lower, self.upper, self.squash.sharpness)


@dataclass(eq=False)
class SolverOptions:
    max_iters: int = 100
    tol: float = 1e-6
    gap_tol: float = 1e-9
    reg_init: float = 1e-9
    reg_min: float = 1e-9
    reg_max: float = 1e9
    reg_increase: float = 10.0
    reg_decrease: float = 2.0
    alphas: tuple = tuple(2.0 ** -np.arange(11))
    accept_ratio: float = 0.1
    accept_negative: float = 2.0
    time_limit: float | None = None


@dataclass(eq=False)
class SolverResult:
    xs: np.ndarray
    us: np.ndarray
    ws: np.ndarray
    cost_trace: list
    converged: bool
    iterations: int
    gap_norm: float
    cost: float
    expected_improvement: float
    reg: float
    message: str = ""
    accepted_alphas: list = field(default_factory=list)
    feasible_trace: list = field(default_factory=list)
    info: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# compiled passes
# ---------------------------------------------------------------------------

@njit(cache=True)
def _cholesky(A):
    n = A.shape[0]
    L = np.zeros((n, n))
    for j in range(n):
        s = A[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not s > 0.0:
            return L, False
        L[j, j] = math.sqrt(s)
        for i in range(j + 1, n):
            s = A[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            L[i, j] = s / L[j, j]
    return L, True


@njit(cache=True)
def _chol_solve_mat(L, B):
    n, m = B.shape
    X = np.empty((n, m))
    for c in range(m):
        y = np.empty(n)
        for i in range(n):
            s = B[i, c]
            for k in range(i):
                s -= L[i, k] * y[k]
            y[i] = s / L[i, i]
        for i in range(n - 1, -1, -1):
            s = y[i]
            for k in range(i + 1, n):
                s -= L[k, i] * y[k]
            y[i] = s / L[i, i]
        X[:, c] = y
    return X


@njit(cache=True)
def backward_pass(Fx, Fu, Lx, Lu, Lxx, Luu, Lxu, fs, mu, feasible):
    N = Fu.shape[0]
    ndx = Fx.shape[1]
    nu = Fu.shape[2]
    k = np.zeros((N, nu))
    K = np.zeros((N, nu, ndx))
    Vx = np.zeros((N + 1, ndx))
    Vxx = np.zeros((N + 1, ndx, ndx))
    Qu = np.zeros((N, nu))
    Quu = np.zeros((N, nu, nu))
    Vxx[N] = Lxx[N]
    Vx[N] = Lx[N]
    if not feasible:
        Vx[N] += Vxx[N] @ fs[N]
    for t in range(N - 1, -1, -1):
        Vp = Vxx[t + 1].copy()
        for i in range(ndx):
            Vp[i, i] += mu
        FxV = Fx[t].T @ Vp
        FuV = Fu[t].T @ Vp
        Qx = Lx[t] + Fx[t].T @ Vx[t + 1]
        Qu[t] = Lu[t] + Fu[t].T @ Vx[t + 1]
        Qxx = Lxx[t] + FxV @ Fx[t]
        Quu[t] = Luu[t] + FuV @ Fu[t]
        Qxu = Lxu[t] + FxV @ Fu[t]
        Qr = Quu[t].copy()
        for i in range(nu):
            Qr[i, i] += mu
        L, ok = _cholesky(Qr)
        if not ok:
            return False, k, K, Vx, Vxx, Qu, Quu
        rhs = np.empty((nu, ndx + 1))
        rhs[:, 0] = Qu[t]
        rhs[:, 1:] = Qxu.T
        sol = _chol_solve_mat(L, rhs)
        k[t] = -sol[:, 0]
        K[t] = -sol[:, 1:]
        Vx[t] = Qx + K[t].T @ (Qr @ k[t]) + K[t].T @ Qu[t] + Qxu @ k[t]
        V = Qxx + K[t].T @ Qr @ K[t] + K[t].T @ Qxu.T + Qxu @ K[t]
        Vxx[t] = 0.5 * (V + V.T)
        if not feasible:
            Vx[t] += Vxx[t] @ fs[t]
        for i in range(ndx):
            if not np.isfinite(Vx[t, i]):
                return False, k, K, Vx, Vxx, Qu, Quu
    return True, k, K, Vx, Vxx, Qu, Quu


@njit(cache=True)
def expected_change(Fx, Fu, Lx, Lu, Lxx, Luu, Lxu, fs, k, K):
    """Coefficients (d1, d2) of the quadratic-model cost change a d1 + a^2 d2 / 2.

    Obtained by propagating the unit-step deviation through the linearized,
    gap-closing dynamics used by the forward pass.
    """
    N = Fu.shape[0]
    e = fs[0].copy()
    d1 = 0.0
    d2 = 0.0
    for t in range(N):
        eu = k[t] + K[t] @ e
        d1 += Lx[t] @ e + Lu[t] @ eu
        d2 += e @ (Lxx[t] @ e) + 2.0 * e @ (Lxu[t] @ eu) + eu @ (Luu[t] @ eu)
        e = Fx[t] @ e + Fu[t] @ eu + fs[t + 1]
    d1 += Lx[N] @ e
    d2 += e @ (Lxx[N] @ e)
    return d1, d2


@njit(cache=True)
def _robot_forward(M, xs, ws, fs, k, K, alpha, lower, upper, sharp, dts, substeps):
    N = ws.shape[0]
    nj = M[0].shape[0] - 1
    xs_try = np.empty_like(xs)
    ws_try = np.empty_like(ws)
    us_try = np.empty_like(ws)
    xs_try[0] = D.state_plus(xs[0], alpha * fs[0], nj)
    for t in range(N):
        dx = D.state_diff(xs[t], xs_try[t], nj)
        ws_try[t] = ws[t] + alpha * k[t] + K[t] @ dx
        for i in range(ws.shape[1]):
            z = sharp[i] * ws_try[t, i]
            if z >= 0:
                s = 1.0 / (1.0 + math.exp(-z))
            else:
                ez = math.exp(z)
                s = ez / (1.0 + ez)
            us_try[t, i] = lower[i] + (upper[i] - lower[i]) * s
        xn = D.integrate_kernel(M, xs_try[t], us_try[t], dts[t], substeps)
        xs_try[t + 1] = D.state_plus(xn, (alpha - 1.0) * fs[t + 1], nj)
    return xs_try, ws_try, us_try


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------

class FDDPSolver:
    def __init__(self, problem: ShootingProblem, options: SolverOptions | None = None):
        self.problem = problem
        self.options = options or SolverOptions()

    def _initial_guess(self, X_init, U_init):
        p = self.problem
        N = p.N
        if U_init is None or len(U_init) == 0:
            hover = getattr(p.dynamics, "model", None)
            if hover is not None:
                u0 = np.clip(hover.hover_control(), p.lower, p.upper)
            else:
                u0 = 0.5 * (p.lower + p.upper)
            U_init = np.tile(u0, (N, 1))
        U_init = np.asarray(U_init, float)
        if U_init.shape != (N, p.nu):
            raise ValueError(f"U_init must have shape {(N, p.nu)}, got {U_init.shape}")
        ws = p.squash.unsquash(U_init)
        us = p.squash.squash(ws)
        if X_init is None or len(X_init) == 0:
            xs = p.rollout(us)
        else:
            xs = np.array(X_init, float)
            if xs.shape != (N + 1, p.x0.size):
                raise ValueError(f"X_init must have shape {(N + 1, p.x0.size)}, got {xs.shape}")
        return xs, ws, us

    def _gaps(self, xs, xnext):
        dyn = self.problem.dynamics
        fs = np.empty((xs.shape[0], dyn.ndx))
        fs[0] = dyn.diff(xs[0], self.problem.x0)
        for t in range(xnext.shape[0]):
            fs[t + 1] = dyn.diff(xs[t + 1], xnext[t])
        return fs

    def _forward(self, xs, ws, fs, k, K, alpha):
        p = self.problem
        dyn = p.dynamics
        sq = p.squash
        if isinstance(dyn, RobotDynamics):
            return _robot_forward(dyn.args, xs, ws, fs, k, K, alpha, sq.lower, sq.upper,
                                  sq.sharpness, p.dts, dyn.substeps)
        xs_try = np.empty_like(xs)
        ws_try = np.empty_like(ws)
        xs_try[0] = dyn.plus(xs[0], alpha * fs[0])
        for t in range(p.N):
            ws_try[t] = ws[t] + alpha * k[t] + K[t] @ dyn.diff(xs[t], xs_try[t])
            u = sq.squash(ws_try[t])
            xn = dyn.step(xs_try[t:t + 1], u[None], p.dts[t:t + 1])[0]
            xs_try[t + 1] = dyn.plus(xn, (alpha - 1.0) * fs[t + 1])
        return xs_try, ws_try, sq.squash(ws_try)

    def solve(self, X_init=None, U_init=None) -> SolverResult:
        p, o = self.problem, self.options
        t_start = time.perf_counter()
        xs, ws, us = self._initial_guess(X_init, U_init)
        cost = p.total_cost(xs, us)
        trace = [cost]
        feas_trace = []
        alphas_ok = []
        mu = o.reg_init
        converged = False
        message = "max iterations reached"
        exp_impr = float("nan")
        gap = float("nan")
        it = 0
        if not np.isfinite(cost):
            raise FloatingPointError("initial guess has non-finite cost")
        for it in range(o.max_iters + 1):
            xnext, Fx, Fu = p.dynamics.derivatives(xs[:-1], us, p.dts)
            fs = self._gaps(xs, xnext)
            gap = float(np.abs(fs).max())
            feasible = gap <= o.gap_tol
            if feasible:
                fs[:] = 0.0
            _, Lx, Lu, Lxx, Luu, Lxu = p.cost_derivatives(xs, us)
            du = p.squash.derivative(ws)
            Fu = Fu * du[:, None, :]
            Lu = Lu * du
            Luu = Luu * du[:, :, None] * du[:, None, :]
            Lxu = Lxu * du[:, None, :]

            while True:
                ok, k, K, Vx, Vxx, Qu, Quu = backward_pass(Fx, Fu, Lx, Lu, Lxx, Luu, Lxu, fs, mu, feasible)
                if ok:
                    break
                mu *= o.reg_increase
                if mu > o.reg_max:
                    break
            if not ok:
                message = "regularization exceeded its cap in the backward pass"
                break
            d1, d2 = expected_change(Fx, Fu, Lx, Lu, Lxx, Luu, Lxu, fs, k, K)
            exp_impr = -(d1 + 0.5 * d2)
            feas_trace.append(gap)
            if abs(exp_impr) < o.tol and feasible:
                converged = True
                message = "expected improvement below tolerance"
                break
            if it == o.max_iters:
                break
            if o.time_limit is not None and time.perf_counter() - t_start > o.time_limit:
                message = "time limit reached"
                break

            accepted = False
            for alpha in o.alphas:
                xs_try, ws_try, us_try = self._forward(xs, ws, fs, k, K, alpha)
                if not np.all(np.isfinite(xs_try)):
                    continue
                cost_try = p.total_cost(xs_try, us_try)
                if not np.isfinite(cost_try):
                    continue
                dV = cost - cost_try
                dV_exp = -(alpha * d1 + 0.5 * alpha * alpha * d2)
                if dV_exp >= 0:
                    accept = dV >= o.accept_ratio * dV_exp
                    if feasible:
                        accept = accept and dV >= 0.0
                else:
                    accept = dV >= o.accept_negative * dV_exp
                if accept:
                    accepted = True
                    break
            if accepted:
                xs, ws, us, cost = xs_try, ws_try, us_try, cost_try
                trace.append(cost)
                alphas_ok.append(alpha)
                mu = max(mu / o.reg_decrease, o.reg_min)
            else:
                mu *= o.reg_increase
                if mu > o.reg_max:
                    message = "regularization exceeded its cap in the line search"
                    break
        log.debug("fddp: %s after %d iterations, cost %.6g", message, it, cost)
        return SolverResult(xs, us, ws, trace, converged, it, gap, cost, exp_impr, mu, message,
                            alphas_ok, feas_trace)


def solve(problem: ShootingProblem, X_init=None, U_init=None, options: SolverOptions | None = None) -> SolverResult:
    return FDDPSolver(problem, options).solve(X_init, U_init)
