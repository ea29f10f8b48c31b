"""Motor identification: thrust surface, current curve, inversion, power.

The thrust surface is a full bivariate cubic in (command, voltage) fitted by
least squares.  Voltage enters the basis normalized by ``v_ref`` so the
design matrix stays well conditioned.  The bundled bench data set is
synthetic, generated from ``ground_truth_thrust``/``ground_truth_current``.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

V_FULL = 25.2
V_EMPTY = 19.8
MAX_THRUST = 16.1
# monomial exponents (i, j) of c^i (V / v_ref)^j with i + j <= 3
CUBIC_BASIS = tuple((i, t - i) for t in range(4) for i in range(t, -1, -1))


@dataclass(frozen=True)
class BenchSample:
    command: float
    voltage: float
    thrust: float
    current: float
    speed: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.command <= 1.0:
            raise ValueError(f"command {self.command} outside [0, 1]")
        if not V_EMPTY - 1e-9 <= self.voltage <= V_FULL + 1e-9:
            raise ValueError(f"voltage {self.voltage} outside the 6S range [{V_EMPTY}, {V_FULL}]")
        if self.thrust < 0.0:
            raise ValueError(f"negative thrust {self.thrust}")


def _design(c, v, basis, v_ref):
    c = np.asarray(c, float)
    vn = np.asarray(v, float) / v_ref
    return np.stack([c ** i * vn ** j for i, j in basis], axis=-1)


@dataclass(frozen=True, eq=False)
class ThrustMap:
    coefficients: np.ndarray
    rmse: float
    command_range: tuple[float, float]
    voltage_range: tuple[float, float]
    v_ref: float = V_FULL
    basis: tuple = CUBIC_BASIS

    def thrust(self, command, voltage):
        return _design(command, voltage, self.basis, self.v_ref) @ self.coefficients

    def max_thrust(self, voltage) -> float:
        return float(self.thrust(1.0, voltage))

    def scaled(self, c: float) -> ThrustMap:
        return ThrustMap(self.coefficients * c, self.rmse * abs(c), self.command_range,
                         self.voltage_range, self.v_ref, self.basis)

    def to_dict(self) -> dict:
        return {"kind": "thrust_surface", "basis": [list(b) for b in self.basis], "v_ref": self.v_ref,
                "coefficients": [float(x) for x in self.coefficients], "rmse": self.rmse,
                "command_range": list(self.command_range), "voltage_range": list(self.voltage_range)}

    @classmethod
    def from_dict(cls, d: dict) -> ThrustMap:
        return cls(np.asarray(d["coefficients"], float), float(d["rmse"]), tuple(d["command_range"]),
                   tuple(d["voltage_range"]), float(d["v_ref"]), tuple(tuple(b) for b in d["basis"]))


@dataclass(frozen=True, eq=False)
class CurrentCurve:
    """Current (A) as a polynomial in thrust (N) at ``v_ref``; ascending coefficients."""

    coefficients: np.ndarray
    rmse: float
    thrust_range: tuple[float, float]
    v_ref: float = V_FULL

    def current(self, thrust):
        return np.polynomial.polynomial.polyval(np.asarray(thrust, float), self.coefficients)

    def to_dict(self) -> dict:
        return {"kind": "current_curve", "v_ref": self.v_ref, "rmse": self.rmse,
                "coefficients": [float(x) for x in self.coefficients],
                "thrust_range": list(self.thrust_range)}

    @classmethod
    def from_dict(cls, d: dict) -> CurrentCurve:
        return cls(np.asarray(d["coefficients"], float), float(d["rmse"]), tuple(d["thrust_range"]),
                   float(d["v_ref"]))


def _columns(samples):
    c = np.array([s.command for s in samples], float)
    v = np.array([s.voltage for s in samples], float)
    t = np.array([s.thrust for s in samples], float)
    i = np.array([s.current for s in samples], float)
    return c, v, t, i


def fit_thrust_surface(samples, v_ref: float = V_FULL, basis=CUBIC_BASIS, grid: int = 50) -> ThrustMap:
    """Least-squares cubic surface thrust(command, voltage)."""
    samples = list(samples)
    if len(samples) < len(basis):
        raise ValueError(f"need at least {len(basis)} samples, got {len(samples)}")
    c, v, t, _ = _columns(samples)
    A = _design(c, v, basis, v_ref)
    rank = np.linalg.matrix_rank(A)
    if rank < len(basis):
        n_v, n_c = len(np.unique(v)), len(np.unique(c))
        missing = []
        if n_v < 4:
            missing.append(f"only {n_v} distinct voltage(s), need samples at >= 4 voltages for a cubic in V")
        if n_c < 4:
            missing.append(f"only {n_c} distinct command(s), need >= 4")
        detail = "; ".join(missing) or "samples do not span the basis"
        raise ValueError(f"rank-deficient bench data (rank {rank} < {len(basis)}): {detail}")
    coef, *_ = np.linalg.lstsq(A, t, rcond=None)
    rmse = float(np.sqrt(np.mean((A @ coef - t) ** 2)))
    tmap = ThrustMap(coef, rmse, (float(c.min()), float(c.max())), (float(v.min()), float(v.max())),
                     v_ref, tuple(basis))
    cc, vv = np.meshgrid(np.linspace(*tmap.command_range, grid), np.linspace(*tmap.voltage_range, grid))
    slope = np.diff(tmap.thrust(cc, vv), axis=1)
    if slope.min() < -1e-9 * max(1.0, float(np.abs(t).max())):
        raise ValueError("fitted thrust surface is not monotone in command over the fitted range")
    return tmap


def fit_current_curve(samples, v_ref: float = V_FULL, degree: int = 2) -> CurrentCurve:
    """Current-vs-thrust polynomial from the samples taken at ``v_ref``."""
    samples = [s for s in samples if abs(s.voltage - v_ref) < 1e-9]
    if len(samples) <= degree:
        raise ValueError(f"need more than {degree} samples at {v_ref} V to fit the current curve")
    _, _, t, i = _columns(samples)
    coef = np.polynomial.polynomial.polyfit(t, i, degree)
    rmse = float(np.sqrt(np.mean((np.polynomial.polynomial.polyval(t, coef) - i) ** 2)))
    curve = CurrentCurve(coef, rmse, (float(t.min()), float(t.max())), v_ref)
    if curve.current(np.linspace(*curve.thrust_range, 200)).min() < -1e-9:
        raise ValueError("fitted current curve is negative inside the fitted thrust range")
    return curve


def command_for_thrust(tmap: ThrustMap, thrust: float, voltage: float, tol: float = 1e-12) -> tuple[float, bool]:
    """Command producing ``thrust`` at ``voltage`` by bisection; returns (command, saturated).

    Thrust below the surface value at the lowest fitted command returns that
    command (the zero-thrust offset); thrust above the maximum at this
    voltage returns (1.0, True).
    """
    lo, hi = tmap.command_range[0], 1.0
    t_max = float(tmap.thrust(hi, voltage))
    if thrust >= t_max:
        return 1.0, bool(thrust > t_max)
    if thrust <= tmap.thrust(lo, voltage):
        return lo, False
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if tmap.thrust(mid, voltage) < thrust:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi), False


def power_series(curve: CurrentCurve, thrusts, voltage, torques=None, joint_rates=None) -> np.ndarray:
    """Electrical motor power V * I(thrust) plus joint mechanical power |tau * omega| (W)."""
    thrusts = np.atleast_2d(np.asarray(thrusts, float))
    v = np.broadcast_to(np.asarray(voltage, float), (thrusts.shape[0],))
    p = v * np.clip(curve.current(thrusts), 0.0, None).sum(axis=1)
    if torques is not None:
        p = p + np.abs(np.asarray(torques, float) * np.asarray(joint_rates, float)).reshape(len(p), -1).sum(axis=1)
    return p


def energy(power, dt: float) -> float:
    """Trapezoidal integral of a uniformly sampled power series (J)."""
    power = np.asarray(power, float)
    if power.size < 2:
        return 0.0
    return float(dt * (power.sum() - 0.5 * (power[0] + power[-1])))


def power_energy(curve: CurrentCurve, thrusts, voltage, dt: float, torques=None, joint_rates=None):
    p = power_series(curve, thrusts, voltage, torques, joint_rates)
    return p, energy(p, dt)


def battery_voltage(charge: float, v_full: float = V_FULL, v_empty: float = V_EMPTY) -> float:
    """Linear voltage-vs-charge model, ``charge`` in [0, 1]."""
    return v_empty + (v_full - v_empty) * min(max(charge, 0.0), 1.0)


def hover_autonomy_minutes(capacity_ah: float, current_a: float, usable_fraction: float = 1.0) -> float:
    return 60.0 * capacity_ah * usable_fraction / current_a


# ---------------------------------------------------------------------------
# synthetic bench data
# ---------------------------------------------------------------------------

DEADBAND = 0.05
# I(T) = a T + b T^2 through 5 A at the 4.67 N hover thrust and 35 A at 16.1 N
CURRENT_A = 0.6202
CURRENT_B = 0.09651


def ground_truth_thrust(command, voltage):
    """Synthetic motor: 16.1 N at full command and 25.2 V, 5% deadband."""
    u = np.clip((np.asarray(command, float) - DEADBAND) / (1.0 - DEADBAND), 0.0, None)
    return MAX_THRUST * (np.asarray(voltage, float) / V_FULL) * u * (0.3 + 0.7 * u)


def ground_truth_current(thrust, voltage):
    t = np.asarray(thrust, float)
    return (CURRENT_A * t + CURRENT_B * t * t) * V_FULL / np.asarray(voltage, float)


def synthetic_bench(voltages=(19.8, 21.0, 22.2, 23.4, 24.6, 25.2), n_commands: int = 20) -> list[BenchSample]:
    out = []
    for v in voltages:
        for c in np.linspace(DEADBAND, 1.0, n_commands):
            t = float(ground_truth_thrust(c, v))
            out.append(BenchSample(float(c), float(v), t, float(ground_truth_current(t, v))))
    return out


def bench_path() -> Path:
    return Path(str(resources.files("borinot") / "data" / "bench_synthetic.csv"))


def read_bench_csv(path) -> list[BenchSample]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ValueError(f"{path}: no bench samples")
    required = {"command", "voltage", "thrust", "current"}
    if not required <= set(rows[0]):
        raise ValueError(f"{path}: header must contain {sorted(required)}")
    return [BenchSample(float(r["command"]), float(r["voltage"]), float(r["thrust"]), float(r["current"]),
                        float(r["speed"]) if r.get("speed") not in (None, "") else None) for r in rows]


def write_bench_csv(path, samples) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["command", "voltage", "thrust", "current"])
        for s in samples:
            w.writerow([repr(s.command), repr(s.voltage), repr(s.thrust), repr(s.current)])


@dataclass(frozen=True, eq=False)
class Actuation:
    """Fitted thrust map and current curve, plus the battery voltage used in experiments."""

    thrust_map: ThrustMap
    current_curve: CurrentCurve
    voltage: float = V_FULL

    def save(self, path) -> None:
        doc = {"thrust_map": self.thrust_map.to_dict(), "current_curve": self.current_curve.to_dict(),
               "voltage": self.voltage}
        Path(path).write_text(json.dumps(doc, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> Actuation:
        d = json.loads(Path(path).read_text())
        return cls(ThrustMap.from_dict(d["thrust_map"]), CurrentCurve.from_dict(d["current_curve"]),
                   float(d.get("voltage", V_FULL)))


def default_actuation() -> Actuation:
    samples = read_bench_csv(bench_path())
    return Actuation(fit_thrust_surface(samples), fit_current_curve(samples))
