"""High-rate tracking of the MPC solution.

Feed-forward controls u* plus PD feedback on the whole-body state error.  The
base correction is a body-frame wrench built from the SE(3) error x* (-) x_hat
and the twist error, distributed to the propellers through the allocation
pseudo-inverse.  The limb receives u* torques and impedance targets from x*.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import state_diff
from .liegroup import quat_to_matrix
from .model import RobotModel, allocation_map


def _diag(v, n, name):
    v = np.broadcast_to(np.asarray(v, float), (n,)).copy()
    if np.any(v < 0.0):
        raise ValueError(f"{name} gains must be non-negative")
    return v


@dataclass(frozen=True, eq=False)
class TrackingGains:
    kp_pose: np.ndarray = field(default_factory=lambda: np.array([8.0, 8.0, 8.0, 6.0, 6.0, 3.0]))
    kd_twist: np.ndarray = field(default_factory=lambda: np.array([4.0, 4.0, 4.0, 2.0, 2.0, 1.0]))
    joint_stiffness: float = 3.0
    joint_damping: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "kp_pose", _diag(self.kp_pose, 6, "pose"))
        object.__setattr__(self, "kd_twist", _diag(self.kd_twist, 6, "twist"))
        if self.joint_stiffness < 0.0 or self.joint_damping < 0.0:
            raise ValueError("joint impedance gains must be non-negative")

    @classmethod
    def zero(cls) -> TrackingGains:
        return cls(np.zeros(6), np.zeros(6), 0.0, 0.0)

    @classmethod
    def from_dict(cls, d: dict) -> TrackingGains:
        base = cls()
        return cls(d.get("kp_pose", base.kp_pose), d.get("kd_twist", base.kd_twist),
                   float(d.get("joint_stiffness", base.joint_stiffness)),
                   float(d.get("joint_damping", base.joint_damping)))


@dataclass(frozen=True, eq=False)
class ActuatorCommand:
    thrusts: np.ndarray
    torque_ff: np.ndarray
    q_des: np.ndarray
    qd_des: np.ndarray
    stiffness: float
    damping: float

    def __post_init__(self):
        if np.any(self.thrusts < 0.0):
            raise ValueError("thrust commands must be non-negative")

    def joint_torque(self, q, qd) -> np.ndarray:
        """Torque the limb actuators apply under the impedance law."""
        return self.torque_ff + self.stiffness * (self.q_des - q) + self.damping * (self.qd_des - qd)


class Tracker:
    """Stateless tracking law bound to a model's allocation and thrust limits."""

    def __init__(self, model: RobotModel, gains: TrackingGains | None = None):
        self.model = model
        self.gains = gains or TrackingGains()
        self.pinv = allocation_map(model).pinv
        self.max_thrust = np.array([p.max_thrust for p in model.propellers])

    def wrench(self, x_hat, x_ref) -> np.ndarray:
        """Body-frame (force, torque) correction."""
        nj = self.model.n_joints
        e_pose = state_diff(x_hat, x_ref, nj)[0:6]
        r_rel = quat_to_matrix(x_hat[3:7]).T @ quat_to_matrix(x_ref[3:7])
        v = 7 + nj
        e_twist = np.concatenate([r_rel @ x_ref[v:v + 3] - x_hat[v:v + 3],
                                  r_rel @ x_ref[v + 3:v + 6] - x_hat[v + 3:v + 6]])
        return self.gains.kp_pose * e_pose + self.gains.kd_twist * e_twist

    def __call__(self, x_hat, x_ref, u_ref) -> ActuatorCommand:
        x_hat = np.asarray(x_hat, float)
        x_ref = np.asarray(x_ref, float)
        u_ref = np.asarray(u_ref, float)
        nj, npr = self.model.n_joints, self.model.n_props
        thrusts = np.clip(u_ref[:npr] + self.pinv @ self.wrench(x_hat, x_ref), 0.0, self.max_thrust)
        v = 7 + nj
        return ActuatorCommand(thrusts, u_ref[npr:].copy(), x_ref[7:7 + nj].copy(),
                               x_ref[v + 6:v + 6 + nj].copy(), self.gains.joint_stiffness,
                               self.gains.joint_damping)


def track(model: RobotModel, x_hat, x_ref, u_ref, gains: TrackingGains | None = None) -> ActuatorCommand:
    return Tracker(model, gains)(x_hat, x_ref, u_ref)
