"""Missions, the offline OCP, the reference rail and the sliding-window MPC.

A mission is an ordered list of navigation and task phases.  Each phase is
discretized into one node per ``dt``; task nodes carry the phase's residuals
with a strong weight while every node carries weak regularization.  The
offline solution is the rail.  Online, each MPC window tracks the rail
segment ahead of the current time with the same state/control residual on
every node, so the navigation/task distinction disappears.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import dynamics as D
from .costs import (NAVIGATION, TASK, BasePitch, ControlReg, EEPosition, JointBarrier, NodeCost,
                    StateTracking, TrackingBatch, default_control_weights, default_state_weights)
from .liegroup import Rotation
from .model import RobotModel, load_reference
from .solver import RobotDynamics, ShootingProblem, SolverOptions, SolverResult, solve

MISSION_DIR = "data/missions"


class MissionError(ValueError):
    """Raised for malformed missions or inconsistent discretization."""


@dataclass(frozen=True)
class Phase:
    kind: str
    duration: float
    waypoint: dict | None = None
    ee_position: dict | None = None
    pitch: dict | None = None
    limb: dict | None = None
    weight: float | None = None

    def has_task_terms(self) -> bool:
        return any(v is not None for v in (self.waypoint, self.ee_position, self.pitch, self.limb))


@dataclass(frozen=True)
class MissionWeights:
    navigation: float = 1e-2
    task: float = 1e3
    barrier: float = 1e2
    thrust: float = 1.0
    torque: float = 1e-3
    position: float = 10.0
    orientation: float = 10.0
    velocity: float = 0.1
    joints: float = 5.0


@dataclass(frozen=True)
class MpcConfig:
    nodes: int = 35
    dt: float = 0.02
    state_weights: np.ndarray | None = None
    control_weights: np.ndarray | None = None
    terminal_scale: float = 10.0
    substeps: int = 1
    options: SolverOptions = field(default_factory=lambda: SolverOptions(max_iters=5, tol=1e-6))

    def __post_init__(self):
        if self.nodes < 2:
            raise MissionError("MPC needs at least 2 nodes")
        if self.dt <= 0:
            raise MissionError("MPC node dt must be > 0")

    def weights_for(self, model: RobotModel) -> tuple[np.ndarray, np.ndarray]:
        wx = default_state_weights(model.n_joints) if self.state_weights is None else self.state_weights
        wu = (default_control_weights(model.n_props, model.n_joints) if self.control_weights is None
              else self.control_weights)
        return np.asarray(wx, float), np.asarray(wu, float)


@dataclass(frozen=True)
class MissionSpec:
    name: str
    phases: tuple[Phase, ...]
    start_position: np.ndarray
    start_joints: np.ndarray | None = None
    model: str = "borinot"
    dt: float = 0.02
    weights: MissionWeights = MissionWeights()
    mpc: MpcConfig = MpcConfig()
    sim: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.phases:
            raise MissionError(f"mission '{self.name}' has no phases")
        for i, p in enumerate(self.phases):
            if p.kind not in (NAVIGATION, TASK):
                raise MissionError(f"phase {i}: kind must be '{NAVIGATION}' or '{TASK}'")
            last = i == len(self.phases) - 1
            if p.duration < 0 or (p.duration == 0 and not (last and p.kind == TASK)):
                raise MissionError(f"phase {i}: duration must be > 0 "
                                   "(only a final task may have zero duration)")
            if p.kind == TASK and not p.has_task_terms():
                raise MissionError(f"phase {i}: task phase without residual terms")
        if not any(p.kind == TASK for p in self.phases):
            raise MissionError(f"mission '{self.name}' has no task phase")
        if self.duration < self.mpc.nodes * self.mpc.dt - 1e-9:
            raise MissionError("mission is shorter than the MPC horizon")

    @property
    def duration(self) -> float:
        return float(sum(p.duration for p in self.phases))

    def node_counts(self, dt: float | None = None) -> list[int]:
        dt = self.dt if dt is None else dt
        counts = []
        for i, p in enumerate(self.phases):
            n = int(round(p.duration / dt))
            if abs(n * dt - p.duration) > 1e-6:
                raise MissionError(f"phase {i}: duration {p.duration} s is not a multiple of dt={dt}")
            counts.append(n)
        return counts

    def start_state(self, model: RobotModel) -> np.ndarray:
        return D.State.at_rest(model, position=self.start_position, q=self.start_joints).vector()

    @classmethod
    def from_dict(cls, doc: dict) -> MissionSpec:
        try:
            phases = tuple(Phase(kind=p["kind"], duration=float(p["duration"]),
                                 waypoint=p.get("waypoint"), ee_position=p.get("ee_position"),
                                 pitch=p.get("pitch"), limb=p.get("limb"), weight=p.get("weight"))
                           for p in doc.get("phases", []))
            mpc_doc = dict(doc.get("mpc", {}))
            opts = SolverOptions(**mpc_doc.pop("solver", {"max_iters": 5, "tol": 1e-6}))
            mpc = MpcConfig(options=opts, **mpc_doc)
            start = doc.get("start", {})
            return cls(name=doc.get("name", "mission"), phases=phases,
                       start_position=np.asarray(start.get("position", [0.0, 0.0, 1.0]), float),
                       start_joints=None if "q" not in start else np.asarray(start["q"], float),
                       model=doc.get("model", "borinot"), dt=float(doc.get("dt", 0.02)),
                       weights=MissionWeights(**doc.get("weights", {})), mpc=mpc,
                       sim=dict(doc.get("sim", {})), solver=dict(doc.get("solver", {})))
        except (KeyError, TypeError) as e:
            raise MissionError(f"malformed mission document: {e}") from None


def mission_path(name: str) -> Path:
    return Path(str(resources.files("borinot") / MISSION_DIR / f"{name}.json"))


def load_mission(source) -> MissionSpec:
    """Load a mission from a path, or by name from the bundled missions."""
    if isinstance(source, dict):
        return MissionSpec.from_dict(source)
    path = Path(source)
    if not path.exists() and path.suffix != ".json" and len(path.parts) == 1:
        path = mission_path(str(source))
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise MissionError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from None
    return MissionSpec.from_dict(doc)


# ---------------------------------------------------------------------------
# offline OCP
# ---------------------------------------------------------------------------

def _waypoint_state(model: RobotModel, spec: dict, x_start: np.ndarray) -> np.ndarray:
    x = x_start.copy()
    if "position" in spec:
        x[:3] = spec["position"]
    x[3:7] = Rotation.from_rpy(*spec.get("rpy", (0.0, 0.0, 0.0))).quat
    nj = model.n_joints
    x[7 + nj:] = 0.0
    return x


def _task_terms(model: RobotModel, phase: Phase, w: MissionWeights, x_start) -> list:
    nj = model.n_joints
    scale = w.task if phase.weight is None else float(phase.weight)
    terms = []
    if phase.waypoint is not None:
        wx = default_state_weights(nj, w.position, w.orientation, w.velocity, joints=0.0)
        if not phase.waypoint.get("orientation", True):
            wx[3:6] = 0.0
        terms.append(StateTracking(_waypoint_state(model, phase.waypoint, x_start), wx * scale, nj))
    if phase.ee_position is not None:
        terms.append(EEPosition(model, phase.ee_position["target"],
                                np.asarray(phase.ee_position.get("weights", 10.0)) * scale,
                                phase.ee_position.get("frame", "ee")))
    if phase.pitch is not None:
        terms.append(BasePitch(math.radians(phase.pitch["target_deg"]),
                               phase.pitch.get("weight", 10.0) * scale))
    if phase.limb is not None:
        x_ref = x_start.copy()
        x_ref[7:7 + nj] = phase.limb["q"]
        wl = np.zeros(12 + 2 * nj)
        wl[6:6 + nj] = phase.limb.get("weight", w.joints)
        terms.append(StateTracking(x_ref, wl * scale, nj))
    return terms


def _regularization(model: RobotModel, w: MissionWeights, x_start) -> list:
    nj = model.n_joints
    x_nom = x_start.copy()
    x_nom[3:7] = (1.0, 0.0, 0.0, 0.0)
    x_nom[7:] = 0.0
    wx = default_state_weights(nj, 0.0, w.orientation, w.velocity, w.joints) * w.navigation
    wu = default_control_weights(model.n_props, nj, w.thrust, w.torque) * w.navigation
    return [StateTracking(x_nom, wx, nj), ControlReg(wu, model.hover_control()),
            JointBarrier.from_model(model, w.barrier)]


def build_ocp(mission: MissionSpec, model: RobotModel, dt: float | None = None,
              substeps: int = 1) -> ShootingProblem:
    """Discretize ``mission`` into a shooting problem with one node per ``dt``."""
    dt = mission.dt if dt is None else float(dt)
    counts = mission.node_counts(dt)
    x0 = mission.start_state(model)
    reg = _regularization(model, mission.weights, x0)
    nav = NodeCost(reg, model.ndx, model.nu, NAVIGATION)
    running = []
    last_task = None
    for phase, n in zip(mission.phases, counts):
        if phase.kind == TASK:
            last_task = _task_terms(model, phase, mission.weights, x0)
            node = NodeCost(reg + last_task, model.ndx, model.nu, TASK)
        else:
            node = nav
        running.extend([node] * n)
    if not running:
        raise MissionError("mission discretizes to zero running nodes")
    terminal = NodeCost(last_task, model.ndx, model.nu, TASK)
    return ShootingProblem(x0, running, terminal, dt, RobotDynamics(model, substeps),
                           model.control_lower, model.control_upper)


@dataclass(eq=False)
class Rail:
    """Reference states and controls on a uniform ``dt`` grid."""

    xs: np.ndarray
    us: np.ndarray
    dt: float
    converged: bool = True
    cost_trace: list = field(default_factory=list)
    message: str = ""
    name: str = ""

    def __post_init__(self):
        self.xs = np.asarray(self.xs, float)
        self.us = np.asarray(self.us, float)
        if len(self.xs) != len(self.us) + 1:
            raise MissionError("rail needs one more state than controls")

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.xs)) * self.dt

    @property
    def duration(self) -> float:
        return len(self.us) * self.dt

    def node_index(self, t: float) -> int:
        """Nearest rail node to time ``t``."""
        return int(math.floor(t / self.dt + 0.5))

    def window(self, t: float, nodes: int, u_hold=None, nv: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """References for a window starting at ``t``.

        Past the end the window holds the final node: its state, with the
        last ``nv`` (velocity) entries zeroed when ``nv`` is given, and the
        control ``u_hold`` (default: the last rail control).
        """
        i0 = self.node_index(t)
        ix = np.arange(i0, i0 + nodes + 1)
        iu = np.arange(i0, i0 + nodes)
        xs = self.xs[np.clip(ix, 0, len(self.xs) - 1)]
        us = self.us[np.clip(iu, 0, len(self.us) - 1)]
        if nv:
            xs[ix >= len(self.xs) - 1, -nv:] = 0.0
        if u_hold is not None:
            us[iu >= len(self.us)] = u_hold
        return xs, us

    def to_csv(self, path) -> None:
        nx, nu = self.xs.shape[1], self.us.shape[1]
        header = ",".join(["t"] + [f"x{i}" for i in range(nx)] + [f"u{i}" for i in range(nu)])
        us = np.vstack([self.us, np.full((1, nu), np.nan)])
        data = np.column_stack([self.times, self.xs, us])
        np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")

    @classmethod
    def from_csv(cls, path, nx: int) -> Rail:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        dt = float(data[1, 0] - data[0, 0]) if len(data) > 1 else 0.0
        return cls(data[:, 1:1 + nx], data[:-1, 1 + nx:], dt)


def solve_offline(mission: MissionSpec, model: RobotModel, options: SolverOptions | None = None,
                  continuation=None) -> Rail:
    """Solve the mission OCP once and return its optimum as a rail.

    The solve runs as a continuation over the control box: each stage widens
    the bounds about their midpoint by a factor (the last stage is 1, the true
    bounds) and warm-starts from the previous stage with controls clipped
    inside the new box.  In the widened box the squash is nearly linear over
    the region the iterates visit, which avoids the tiny steps a cold start
    takes against the saturated sigmoid.
    """
    cfg = dict(mission.solver)
    stages = list(cfg.pop("continuation", [20.0, 1.0]) if continuation is None else continuation)
    substeps = int(cfg.pop("substeps", 1))
    if not stages or stages[-1] != 1.0:
        stages.append(1.0)
    if options is None:
        options = SolverOptions(**{"max_iters": 300, "tol": 1e-6, **cfg})
    problem = build_ocp(mission, model, substeps=substeps)
    mid = 0.5 * (problem.lower + problem.upper)
    half = 0.5 * (problem.upper - problem.lower)
    X, U = None, None
    trace = []
    for widen in stages:
        stage = ShootingProblem(problem.x0, problem.running, problem.terminal, problem.dts,
                                problem.dynamics, mid - widen * half, mid + widen * half)
        if U is not None:
            pad = 1e-3 * (stage.upper - stage.lower)
            U = np.clip(U, stage.lower + pad, stage.upper - pad)
        result = solve(stage, X, U, options)
        trace.extend(result.cost_trace)
        X, U = result.xs, result.us
    return Rail(result.xs, result.us, problem.dts[0], result.converged, trace, result.message, mission.name)


# ---------------------------------------------------------------------------
# Rail-MPC
# ---------------------------------------------------------------------------

def mpc_problem(rail: Rail, model: RobotModel, x_hat, t: float, config: MpcConfig,
                dynamics: RobotDynamics | None = None) -> tuple[ShootingProblem, int]:
    """Window problem at time ``t``: the same tracking residual on every node."""
    if abs(config.dt - rail.dt) > 1e-12:
        raise MissionError("MPC node dt must match the rail dt")
    N = config.nodes
    x_refs, u_refs = rail.window(t, N, model.hover_control(), 6 + model.n_joints)
    wx, wu = config.weights_for(model)
    WX = np.tile(wx, (N + 1, 1))
    WX[N] *= config.terminal_scale
    batch = TrackingBatch(x_refs, u_refs, WX, np.tile(wu, (N, 1)), model.n_joints)
    dyn = dynamics if dynamics is not None else RobotDynamics(model, config.substeps)
    p = ShootingProblem(np.asarray(x_hat, float), None, None, config.dt, dyn,
                        model.control_lower, model.control_upper, batch_cost=batch)
    return p, rail.node_index(t)


def shift_solution(prev: SolverResult, shift: int) -> tuple[np.ndarray, np.ndarray]:
    """Drop ``shift`` leading nodes and pad by repeating the last one."""
    xs, us = prev.xs, prev.us
    if shift <= 0:
        return xs.copy(), us.copy()
    shift = min(shift, len(us))
    xs = np.vstack([xs[shift:], np.repeat(xs[-1:], shift, axis=0)])
    us = np.vstack([us[shift:], np.repeat(us[-1:], shift, axis=0)])
    return xs, us


def mpc_step(rail: Rail, x_hat, t: float, warm: SolverResult | None = None,
             model: RobotModel | None = None, config: MpcConfig | None = None,
             dynamics: RobotDynamics | None = None) -> SolverResult:
    """One Rail-MPC solve from the measured state ``x_hat`` at time ``t``.

    The result's ``info`` holds the window's start node and a ``failed``
    flag; on failure the (shifted) warm start is returned unchanged.
    """
    model = model if model is not None else load_reference()
    config = config if config is not None else MpcConfig(dt=rail.dt)
    problem, i0 = mpc_problem(rail, model, x_hat, t, config, dynamics)
    X_init = U_init = None
    if warm is not None:
        X_init, U_init = shift_solution(warm, i0 - warm.info.get("node", i0))
    try:
        result = solve(problem, X_init, U_init, config.options)
        failed = "exceeded" in result.message or not np.all(np.isfinite(result.us))
    except FloatingPointError:
        failed = True
    if failed:
        if warm is None:
            raise FloatingPointError("MPC solve failed without a previous solution to fall back on")
        result = replace(warm, xs=X_init, us=U_init, message="solver failure: previous solution shifted")
    result.info.update(node=i0, time=t, failed=failed)
    return result


class RailMpc:
    """Stateful wrapper keeping the warm start between calls."""

    def __init__(self, rail: Rail, model: RobotModel, config: MpcConfig | None = None):
        self.rail = rail
        self.model = model
        self.config = config if config is not None else MpcConfig(dt=rail.dt)
        self.dynamics = RobotDynamics(model, self.config.substeps)
        self.last: SolverResult | None = None

    def step(self, x_hat, t: float) -> SolverResult:
        self.last = mpc_step(self.rail, x_hat, t, self.last, self.model, self.config, self.dynamics)
        return self.last
