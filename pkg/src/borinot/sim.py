"""Deterministic multi-rate simulation of the control stack and the jump rail.

The closed loop runs on a 0.5 ms base tick: the plant integrates every tick,
the tracking layer updates every 2.5 ms and the Rail-MPC every 10 ms.  The
MPC first node and control are held (zero-order) for the tracking layer
until the next solve.  The jump world is a vertical rail: the base keeps its
horizontal position and orientation, only its height and the limb joints
evolve, with a spring-damper foot contact.
"""
from __future__ import annotations

import functools
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from numba import njit

from . import dynamics as D
from .actuation import V_FULL, Actuation, default_actuation, energy, power_series
from .liegroup import matrix_to_rpy, quat_to_matrix
from .mission import MissionSpec, Rail, RailMpc, load_mission, solve_offline
from .model import RobotModel, allocation_map, load_reference
from .tracking import Tracker, TrackingGains


@functools.lru_cache(maxsize=1)
def _actuation() -> Actuation:
    return default_actuation()


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PlantConfig:
    """Mismatch between the controller's model and the simulated plant."""

    mass_scale: float = 1.03
    com_offset: tuple = (0.0, 0.0, 0.0)
    thrust_bias: float = 0.0
    thrust_lag: float = 0.005
    noise_std: float = 0.0
    ground_effect: bool = False
    rotor_radius: float = 0.127
    dt: float = 0.0005
    voltage: float = V_FULL

    def __post_init__(self):
        if not 0.0 < self.dt <= 1e-3:
            raise ValueError("plant substep must be in (0, 1 ms]")
        if abs(self.mass_scale - 1.0) > 0.2 or abs(self.thrust_bias) > 0.2:
            raise ValueError("plant perturbations must stay within 20%")
        if self.thrust_lag < 0.0 or self.noise_std < 0.0:
            raise ValueError("thrust lag and noise must be non-negative")

    @classmethod
    def ideal(cls, **kw) -> PlantConfig:
        return cls(**{"mass_scale": 1.0, "thrust_lag": 0.0, **kw})

    @classmethod
    def from_dict(cls, d: dict) -> PlantConfig:
        d = dict(d)
        if "com_offset" in d:
            d["com_offset"] = tuple(d["com_offset"])
        return cls(**d)

    def plant_model(self, model: RobotModel) -> RobotModel:
        if self.mass_scale == 1.0 and not any(self.com_offset):
            return model
        return model.perturbed(self.mass_scale, self.com_offset)

    def ground_factor(self, height: float) -> float:
        if not self.ground_effect:
            return 1.0
        return ground_effect_factor(height, self.rotor_radius)


def ground_effect_factor(height: float, radius: float) -> float:
    """Thrust multiplier 1 + (R / 4z)^2, clamped at 1.25."""
    if height <= 0.0:
        return 1.25
    return min(1.0 + (radius / (4.0 * height)) ** 2, 1.25)


@dataclass(frozen=True)
class Rates:
    mpc: float = 0.01
    tracking: float = 0.0025
    plant: float = 0.0005

    def ticks(self) -> tuple[int, int]:
        """Base ticks per MPC update and per tracking update."""
        out = []
        for period in (self.mpc, self.tracking):
            n = round(period / self.plant)
            if n < 1 or abs(n * self.plant - period) > 1e-9:
                raise ValueError(f"period {period} is not a multiple of the plant step {self.plant}")
            out.append(n)
        if out[0] % out[1]:
            raise ValueError("the MPC period must be a multiple of the tracking period")
        return out[0], out[1]


@dataclass(frozen=True)
class ContactWorld:
    """Ground plane z = 0 with a spring-damper foot contact and an optional vertical rail."""

    stiffness: float = 1e4
    damping: float = 100.0
    friction: float = 0.8
    friction_viscosity: float = 50.0
    rail: bool = True
    carriage_mass: float = 0.7
    dt: float = 0.00025

    def __post_init__(self):
        if self.stiffness <= 0.0 or self.damping <= 0.0:
            raise ValueError("contact stiffness and damping must be positive")
        if self.friction < 0.0 or self.carriage_mass < 0.0:
            raise ValueError("friction and carriage mass must be non-negative")
        if not self.rail:
            raise NotImplementedError("only the rail-constrained world is simulated")


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class ExperimentMetrics:
    name: str
    series: dict
    scalars: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        lengths = {len(v) for v in self.series.values()}
        if len(lengths) > 1:
            raise ValueError(f"series lengths differ: {sorted(lengths)}")

    def __len__(self) -> int:
        return len(next(iter(self.series.values()))) if self.series else 0

    def columns(self) -> tuple[list[str], np.ndarray]:
        names, cols = [], []
        for key, v in self.series.items():
            v = np.asarray(v, float)
            if v.ndim == 1:
                names.append(key)
                cols.append(v[:, None])
            else:
                names.extend(f"{key}_{i}" for i in range(v.shape[1]))
                cols.append(v)
        return names, np.hstack(cols)

    def to_csv(self, path) -> None:
        names, data = self.columns()
        np.savetxt(path, data, delimiter=",", header=",".join(names), comments="", fmt="%.17g")

    def summary(self) -> dict:
        return {k: _jsonable(v) for k, v in self.scalars.items()}

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps({"name": self.name, "scalars": self.summary()}, indent=2,
                                         sort_keys=True) + "\n")

    def save(self, out_dir, experiment: str, variant: str) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out / f"{experiment}_{variant}.csv", out / f"{experiment}_{variant}.json"
        self.to_csv(csv_path)
        self.to_json(json_path)
        return csv_path, json_path


def _jsonable(v):
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return float(v) if math.isfinite(v) else None
    return v


# ---------------------------------------------------------------------------
# closed loop
# ---------------------------------------------------------------------------

def _mission(mission) -> MissionSpec:
    return mission if isinstance(mission, MissionSpec) else load_mission(mission)


def run_closed_loop(mission, model: RobotModel | None = None, plant: PlantConfig | None = None,
                    rates: Rates | None = None, rail: Rail | None = None,
                    gains: TrackingGains | None = None, seed: int = 0, duration: float | None = None,
                    start_offset=None, abort_distance: float = 2.0,
                    reference: str | None = None) -> ExperimentMetrics:
    """Fly ``mission`` with Rail-MPC plus tracking on a mismatched plant.

    ``reference`` selects what the tracking layer follows between MPC
    updates: ``"hold"`` keeps the first predicted node and control,
    ``"predict"`` moves x* along the first predicted interval.  The default
    comes from the mission's ``sim.reference`` (``"hold"`` if absent).
    """
    mission = _mission(mission)
    reference = reference if reference is not None else mission.sim.get("reference", "hold")
    if reference not in ("hold", "predict"):
        raise ValueError(f"unknown tracking reference '{reference}'")
    model = model if model is not None else load_reference(mission.model)
    plant = plant if plant is not None else PlantConfig()
    rates = rates if rates is not None else Rates(plant=plant.dt)
    if abs(rates.plant - plant.dt) > 1e-12:
        raise ValueError("rates.plant must equal the plant substep")
    mpc_every, track_every = rates.ticks()
    rail = rail if rail is not None else solve_offline(mission, model)
    duration = duration if duration is not None else float(mission.sim.get("duration", rail.duration))

    M = D.kernel_args(plant.plant_model(model))
    mpc = RailMpc(rail, model, mission.mpc)
    tracker = Tracker(model, gains)
    rng = np.random.default_rng(seed)
    npr, nj, ndx = model.n_props, model.n_joints, model.ndx
    effort = np.array([j.effort for j in model.joints])
    dt = plant.dt
    alpha = 1.0 if plant.thrust_lag == 0.0 else 1.0 - math.exp(-dt / plant.thrust_lag)

    x = mission.start_state(model)
    if start_offset is not None:
        x[0:3] += np.asarray(start_offset, float)
    n = int(round(duration / dt))
    X = np.empty((n + 1, model.nx))
    TH = np.empty((n + 1, npr))
    TAU = np.empty((n + 1, nj))
    UREF = np.empty((n + 1, model.nu))
    thrust = rail.us[0, :npr].copy()
    failures, solve_times, aborted, reason = 0, [], False, ""
    cmd = x_ref = u_ref = None
    k = 0
    for k in range(n + 1):
        t = k * dt
        if k % mpc_every == 0:
            x_hat = _measure(model, x, plant.noise_std, rng)
            t0 = time.perf_counter()
            sol = mpc.step(x_hat, t)
            solve_times.append(time.perf_counter() - t0)
            failures += int(sol.info["failed"])
            x_ref, u_ref = sol.xs[0], sol.us[0]
            t_sol, x_pred = t, sol.xs
        if k % track_every == 0:
            x_hat = x if k % mpc_every == 0 and plant.noise_std == 0.0 else _measure(model, x, plant.noise_std, rng)
            if reference == "predict":
                x_ref = _predicted(model, x_pred, (t - t_sol) / mission.mpc.dt)
            cmd = tracker(x_hat, x_ref, u_ref)
        tau = np.clip(cmd.joint_torque(x[7:7 + nj], x[13 + nj:]), -effort, effort)
        X[k], TH[k], TAU[k], UREF[k] = x, thrust, tau, u_ref
        if k == n:
            break
        thrust = thrust + alpha * (cmd.thrusts * (1.0 + plant.thrust_bias) - thrust)
        produced = thrust * plant.ground_factor(x[2])
        x = D.integrate_kernel(M, x, np.concatenate([produced, tau]), dt, 1)
        i = min(rail.node_index(t + dt), len(rail.xs) - 1)
        if not np.all(np.isfinite(x)):
            aborted, reason = True, "non-finite state"
        elif np.linalg.norm(x[0:3] - rail.xs[i, 0:3]) > abort_distance:
            aborted, reason = True, f"left the rail by more than {abort_distance} m"
        if aborted:
            break
    m = k + 1
    metrics = flight_metrics(mission.name, model, plant, X[:m], TH[:m], TAU[:m], UREF[:m], dt, rail)
    metrics.scalars.update(mpc_failures=failures, aborted=aborted)
    metrics.info.update(solve_times=np.array(solve_times), abort_reason=reason, rail=rail)
    return metrics


def _predicted(model, xs, s: float) -> np.ndarray:
    """State a fraction ``s`` of the way along the first predicted interval."""
    if s == 0.0:
        return xs[0]
    nj = model.n_joints
    return D.state_plus(xs[0], s * D.state_diff(xs[0], xs[1], nj), nj)


def _measure(model, x, std, rng):
    if std == 0.0:
        return x
    return D.state_plus(x, rng.normal(0.0, std, model.ndx), model.n_joints)


def flight_metrics(name, model, plant, X, TH, TAU, UREF, dt, rail=None, sat_fraction: float = 0.95):
    """Series and scalars of a flight.  Scalars are functions of the series only."""
    nj, npr = model.n_joints, model.n_props
    n = len(X)
    t = np.arange(n) * dt
    R = np.array([quat_to_matrix(q) for q in X[:, 3:7]])
    rpy = np.array([matrix_to_rpy(r) for r in R])
    v_world = np.einsum("nij,nj->ni", R, X[:, 7 + nj:10 + nj])
    omega = X[:, 10 + nj:13 + nj]
    prop_torque = (allocation_map(model).matrix @ TH.T).T[:, 3:6]
    series = {"t": t, "position": X[:, 0:3], "rpy": rpy, "velocity": v_world, "omega": omega}
    if nj:
        ee = np.array([D.frame_position(model, x) for x in X])
        ee_v = np.array([D.frame_velocity(model, x) for x in X])
        series.update(q=X[:, 7:7 + nj], qd=X[:, 13 + nj:], torque=TAU, torque_ff=UREF[:, npr:],
                      ee=ee, ee_speed=np.linalg.norm(ee_v, axis=1))
    series.update(thrust=TH, prop_torque=prop_torque, base_speed=np.linalg.norm(v_world, axis=1))
    curve = _actuation().current_curve
    qd = X[:, 13 + nj:] if nj else None
    series["power"] = power_series(curve, TH, plant.voltage, TAU if nj else None, qd)
    if rail is not None:
        ref = np.column_stack([np.interp(t, rail.times, rail.xs[:, i]) for i in range(3)])
        series["rail_error"] = np.linalg.norm(X[:, 0:3] - ref, axis=1)
    metrics = ExperimentMetrics(name, series)
    metrics.scalars.update(scalars_from_series(metrics.series, model, dt, sat_fraction))
    return metrics


def scalars_from_series(s: dict, model: RobotModel, dt: float, sat_fraction: float = 0.95) -> dict:
    effort = np.array([j.effort for j in model.joints])
    max_thrust = np.array([p.max_thrust for p in model.propellers])
    out = {
        "duration": float(s["t"][-1]),
        "peak_angular_speed": float(np.linalg.norm(s["omega"], axis=1).max()),
        "peak_roll_rate": float(np.abs(s["omega"][:, 0]).max()),
        "peak_pitch_rate": float(np.abs(s["omega"][:, 1]).max()),
        "peak_prop_roll_torque": float(np.abs(s["prop_torque"][:, 0]).max()),
        "peak_prop_pitch_torque": float(np.abs(s["prop_torque"][:, 1]).max()),
        "rms_prop_roll_torque": float(np.sqrt(np.mean(s["prop_torque"][:, 0] ** 2))),
        "rms_prop_pitch_torque": float(np.sqrt(np.mean(s["prop_torque"][:, 1] ** 2))),
        "peak_thrust_fraction": float((s["thrust"] / max_thrust).max()),
        "energy": energy(s["power"], dt),
    }
    if "rail_error" in s:
        out["max_rail_error"] = float(s["rail_error"].max())
        out["final_rail_error"] = float(s["rail_error"][-1])
    if "torque_ff" in s:
        ratio = np.abs(s["torque_ff"]) / effort
        sat = ratio >= sat_fraction
        out["saturation_duty"] = float(100.0 * sat.any(axis=1).mean())
        out["joint_saturation_duty"] = [float(100.0 * d) for d in sat.mean(axis=0)]
        out["peak_torque_fraction"] = float(ratio.max())
        first = np.flatnonzero(sat.any(axis=1))
        out["first_saturation_time"] = float(s["t"][first[0]]) if first.size else None
    return out


@dataclass(frozen=True)
class AggressivenessThresholds:
    gentle_control: float = 0.5
    graceful_duty: float = 5.0


def aggressiveness_report(metrics: ExperimentMetrics,
                          thresholds: AggressivenessThresholds = AggressivenessThresholds()) -> str:
    s = metrics.scalars
    duty = s.get("saturation_duty", 0.0)
    peak = max(s.get("peak_torque_fraction", 0.0), s["peak_thrust_fraction"])
    if duty == 0.0 and peak < thresholds.gentle_control:
        return "gentle"
    if duty < thresholds.graceful_duty:
        return "graceful"
    return "aggressive"


# ---------------------------------------------------------------------------
# end-effector hold
# ---------------------------------------------------------------------------

def ee_hold_mission(pitch: float | None = 45.0, name: str = "ee_hold") -> MissionSpec:
    """The bundled EE-hold mission, optionally with another (or no) pitch target."""
    from .mission import mission_path
    doc = json.loads(mission_path(name).read_text())
    for phase in doc["phases"]:
        if "pitch" in phase:
            if pitch is None:
                del phase["pitch"]
            else:
                phase["pitch"] = dict(phase["pitch"], target_deg=pitch)
    if pitch != 45.0:
        doc["name"] = f"{doc['name']}_pitch{'none' if pitch is None else f'{pitch:g}'}"
    return MissionSpec.from_dict(doc)


def run_ee_hold(mission="ee_hold", model: RobotModel | None = None, plant: PlantConfig | None = None,
                rail: Rail | None = None, seed: int = 0, **kw) -> ExperimentMetrics:
    """Closed-loop EE hold plus window metrics.

    Scalars: mean EE speed over mean platform speed inside the task window,
    whether the base vertical velocity changes sign inside it, and the mean
    EE distance to its target.
    """
    mission = _mission(mission)
    metrics = run_closed_loop(mission, model, plant, rail=rail, seed=seed, **kw)
    t0, t1 = mission.sim.get("task_window", _task_window(mission))
    target = next(np.asarray(p.ee_position["target"], float) for p in mission.phases
                  if p.kind == "task" and p.ee_position)
    metrics.scalars.update(ee_window_scalars(metrics.series, t0, t1, target))
    return metrics


def _task_window(mission: MissionSpec) -> tuple[float, float]:
    t = 0.0
    for p in mission.phases:
        if p.kind == "task" and p.ee_position:
            return t, t + p.duration
        t += p.duration
    raise ValueError(f"mission '{mission.name}' has no EE task phase")


def ee_window_scalars(s: dict, t0: float, t1: float, target) -> dict:
    w = (s["t"] >= t0 - 1e-12) & (s["t"] <= t1 + 1e-12)
    vz = s["velocity"][w, 2]
    crossings = np.flatnonzero(np.sign(vz[1:]) * np.sign(vz[:-1]) < 0)
    ee_speed = float(s["ee_speed"][w].mean())
    base_speed = float(s["base_speed"][w].mean())
    return {
        "task_window": [t0, t1],
        "mean_ee_speed": ee_speed,
        "mean_base_speed": base_speed,
        "ee_speed_ratio": ee_speed / base_speed if base_speed > 0 else math.inf,
        "apex_in_window": bool(crossings.size > 0),
        "apex_time": float(s["t"][w][crossings[0] + 1]) if crossings.size else None,
        "ee_hold_error": float(np.linalg.norm(s["ee"][w] - target, axis=1).mean()),
    }


# ---------------------------------------------------------------------------
# jump-and-fly on the rail
# ---------------------------------------------------------------------------

@njit(cache=True)
def _rail_step(M, x, thrust_total, tau, foot_body, foot_offset, carriage, k, c, mu, visc, dt):
    """One semi-implicit Euler step of the rail-constrained leg; returns (x, contact force)."""
    nj = M[0].shape[0] - 1
    nv = 6 + nj
    g = M[7]
    zero_f = np.zeros((nj + 1, 6))
    idx = np.empty(1 + nj, np.int64)
    idx[0] = 2
    for j in range(nj):
        idx[1 + j] = 6 + j

    p = D.body_poses(M, x)
    Rw, pw = p[0], p[1]
    foot = pw[foot_body] + Rw[foot_body] @ foot_offset
    vfoot = D.point_velocity(M, x, foot_body, foot_offset)
    f = np.zeros(3)
    if foot[2] < 0.0:
        fn = -k * foot[2] - c * vfoot[2]
        if fn > 0.0:
            f[2] = fn
            vt = math.sqrt(vfoot[0] ** 2 + vfoot[1] ** 2)
            if vt > 0.0:
                ft = min(mu * fn, visc * vt)
                f[0] = -ft * vfoot[0] / vt
                f[1] = -ft * vfoot[1] / vt

    h = D.rnea(M, x, np.zeros(nv), 1.0, 1.0, zero_f)
    J = D.point_jacobian(M, x, foot_body, foot_offset)
    gen = J.T @ f
    n = 1 + nj
    H = np.empty((n, n))
    for a in range(n):
        e = np.zeros(nv)
        e[idx[a]] = 1.0
        col = D.rnea(M, x, e, 0.0, 0.0, zero_f)
        for b in range(n):
            H[b, a] = col[idx[b]]
    H[0, 0] += carriage
    rhs = np.empty(n)
    rhs[0] = thrust_total + gen[2] - h[2] - carriage * g
    for j in range(nj):
        rhs[1 + j] = tau[j] + gen[6 + j] - h[6 + j]
    acc = np.linalg.solve(H, rhs)

    out = x.copy()
    out[9 + nj] += dt * acc[0]
    out[2] += dt * out[9 + nj]
    for j in range(nj):
        out[13 + nj + j] += dt * acc[1 + j]
        out[7 + j] += dt * out[13 + nj + j]
    return out, f


@dataclass(frozen=True)
class JumpConfig:
    crouch: float = 0.8
    refold: float = 0.6
    settle: float = 0.3
    hold_stiffness: float = 20.0
    hold_damping: float = 0.5
    air_stiffness: float = 1.5
    air_damping: float = 0.02
    stretch_tolerance: float = 0.05
    after_landing: float = 0.2
    max_time: float = 8.0
    voltage: float = V_FULL
    ground_effect: bool = False
    rotor_radius: float = 0.127

    def crouch_angles(self, angle: float) -> np.ndarray:
        """Knee-forward fold with the foot straight below the hip."""
        return np.array([angle, -2.0 * angle])


def run_jump(beta: float, world: ContactWorld | None = None, model: RobotModel | None = None,
             config: JumpConfig | None = None) -> ExperimentMetrics:
    """Scripted jump-and-fly: crouch, full-torque push, airborne refold, compliant landing.

    The propellers carry a constant ``beta`` of the total weight (robot plus
    carriage) throughout.  The airborne deceleration is fitted to the height
    of the combined centre of mass, which is exactly ballistic under the
    residual weight.
    """
    if not 0.0 <= beta < 1.0:
        raise ValueError("beta must be in [0, 1)")
    world = world if world is not None else ContactWorld()
    model = model if model is not None else load_reference("borinot_leg")
    cfg = config if config is not None else JumpConfig()
    if model.n_joints != 2 or "ee" not in model.frames:
        raise ValueError("the jump needs a two-joint leg with an 'ee' foot frame")
    M = D.kernel_args(model)
    nj, npr = model.n_joints, model.n_props
    foot = model.frames["ee"]
    foot_body = model.link_index(foot.parent)
    effort = np.array([j.effort for j in model.joints])
    g = model.gravity
    m_total = model.total_mass + world.carriage_mass
    thrust_total = beta * m_total * g
    dt = world.dt

    q0 = cfg.crouch_angles(cfg.crouch)
    x = D.State.at_rest(model, q=q0).vector()
    x[2] = -D.frame_position(model, x)[2] + (1.0 - beta) * m_total * g / world.stiffness
    q_air = cfg.crouch_angles(cfg.refold)

    n_max = int(round(cfg.max_time / dt))
    X = np.empty((n_max + 1, model.nx))
    F = np.zeros((n_max + 1, 3))
    TAU = np.zeros((n_max + 1, nj))
    PH = np.zeros(n_max + 1, np.int64)
    phase, t_push = 0, None
    liftoff = touchdown = None
    k = 0
    for k in range(n_max + 1):
        t = k * dt
        q, qd = x[7:7 + nj], x[13 + nj:]
        if phase == 0 and t >= cfg.settle:
            phase, t_push = 1, t
        if phase == 1 and np.all(np.abs(q) < cfg.stretch_tolerance):
            phase = 2
        if phase == 0:
            tau = cfg.hold_stiffness * (q0 - q) - cfg.hold_damping * qd
        elif phase == 1:
            tau = -effort * np.sign(q)
        else:
            tau = cfg.air_stiffness * (q_air - q) - cfg.air_damping * qd
        tau = np.clip(tau, -effort, effort)
        factor = ground_effect_factor(x[2], cfg.rotor_radius) if cfg.ground_effect else 1.0
        xn, f = _rail_step(M, x, thrust_total * factor, tau, foot_body, foot.offset, world.carriage_mass,
                           world.stiffness, world.damping, world.friction, world.friction_viscosity, dt)
        X[k], F[k], TAU[k], PH[k] = x, f, tau, phase
        if phase >= 1 and liftoff is None and f[2] == 0.0 and k > 0 and F[k - 1, 2] > 0.0:
            liftoff = k
        if liftoff is not None and touchdown is None and f[2] > 0.0:
            touchdown = k
            phase = 3
        if touchdown is not None and t >= touchdown * dt + cfg.after_landing:
            break
        x = xn
    m = k + 1
    X, F, TAU, PH = X[:m], F[:m], TAU[:m], PH[:m]
    t = np.arange(m) * dt
    com = np.array([D.com_position(model, xi) for xi in X])
    com_z = (model.total_mass * com[:, 2] + world.carriage_mass * X[:, 2]) / m_total
    thrusts = np.full((m, npr), thrust_total / npr)
    qd = X[:, 13 + nj:]
    curve = _actuation().current_curve
    power = power_series(curve, thrusts, cfg.voltage, TAU, qd)
    series = {"t": t, "phase": PH.astype(float), "base_z": X[:, 2], "base_vz": X[:, 9 + nj],
              "com_z": com_z, "q": X[:, 7:7 + nj], "qd": qd, "torque": TAU, "contact": F,
              "thrust": thrusts, "power": power, "base_xy": X[:, 0:2], "quat": X[:, 3:7]}
    metrics = ExperimentMetrics(f"jump_beta{beta:g}", series)
    metrics.scalars.update(jump_scalars(series, beta, m_total, g, dt, curve, cfg.voltage, npr,
                                        t_push, liftoff, touchdown))
    return metrics


def jump_scalars(s, beta, m_total, g, dt, curve, voltage, npr, t_push, liftoff, touchdown,
                 margin: float = 0.02) -> dict:
    out = {"beta": beta, "lifted": liftoff is not None, "landed": touchdown is not None,
           "apex_height": float(s["base_z"].max() - s["base_z"][0]),
           "expected_deceleration": (1.0 - beta) * g}
    if liftoff is None:
        out.update(airtime=0.0, airborne_deceleration=None, step_energy=None, hover_energy=None)
        return out
    end = touchdown if touchdown is not None else len(s["t"]) - 1
    out["liftoff_time"] = liftoff * dt
    out["airtime"] = (end - liftoff) * dt
    k = int(round(margin / dt))
    a, b = liftoff + k, end - k
    if b - a > 10:
        tt = s["t"][a:b] - s["t"][a]
        coef = np.polyfit(tt, s["com_z"][a:b], 2)
        out["airborne_deceleration"] = float(-2.0 * coef[0])
        out["base_deceleration"] = float(-np.polyfit(tt, s["base_vz"][a:b], 1)[0])
    else:
        out["airborne_deceleration"] = None
    i0 = int(round(t_push / dt))
    out["step_duration"] = (end - i0) * dt
    out["step_energy"] = energy(s["power"][i0:end + 1], dt)
    hover = float(power_series(curve, np.full((1, npr), m_total * g / npr), voltage)[0])
    out["hover_power"] = hover
    out["hover_energy"] = hover * out["step_duration"]
    return out


def jump_sweep(betas=(0.5, 0.7, 0.9), world: ContactWorld | None = None, model: RobotModel | None = None,
               config: JumpConfig | None = None) -> list[ExperimentMetrics]:
    return [run_jump(b, world, model, config) for b in betas]
