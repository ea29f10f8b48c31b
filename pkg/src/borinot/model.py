"""Robot description: links, revolute joints, propellers, actuation bounds.

Model files are JSON (see ``data/model.schema.json``).  A link is given
either directly (``mass``/``com``/``inertia``) or as a list of ``parts``
(point masses with optional local inertia) that are lumped with the parallel
axis theorem.  The canonical hexarotor + 2-DoF limb lives in
``data/borinot.json``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .liegroup import Pose, Rotation

GRAVITY = 9.81


class ModelError(ValueError):
    """Raised for malformed or physically invalid model documents."""


@dataclass(frozen=True, eq=False)
class Part:
    name: str
    mass: float
    position: np.ndarray
    inertia: np.ndarray
    group: str = ""


@dataclass(frozen=True, eq=False)
class Link:
    name: str
    mass: float
    com: np.ndarray
    inertia: np.ndarray  # about the CoM, link frame
    parts: tuple[Part, ...] = ()


@dataclass(frozen=True, eq=False)
class Joint:
    name: str
    parent: str
    child: str
    axis: np.ndarray
    origin: Pose
    lower: float
    upper: float
    effort: float


@dataclass(frozen=True, eq=False)
class Propeller:
    position: np.ndarray
    spin: int
    max_thrust: float
    torque_ratio: float


@dataclass(frozen=True, eq=False)
class Frame:
    name: str
    parent: str
    offset: np.ndarray


@dataclass(frozen=True, eq=False)
class RobotModel:
    """Kinematic tree rooted at a floating base (``links[0]``).

    ``joints[i]`` moves ``links[i + 1]``; links are stored in topological
    order so every parent precedes its children.
    """

    name: str
    links: tuple[Link, ...]
    joints: tuple[Joint, ...]
    propellers: tuple[Propeller, ...]
    frames: dict[str, Frame] = field(default_factory=dict)
    min_thrust: float = 0.0
    gravity: float = GRAVITY

    @property
    def n_props(self) -> int:
        return len(self.propellers)

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def nx(self) -> int:
        return 13 + 2 * self.n_joints

    @property
    def ndx(self) -> int:
        return 12 + 2 * self.n_joints

    @property
    def nu(self) -> int:
        return self.n_props + self.n_joints

    @property
    def total_mass(self) -> float:
        return float(sum(link.mass for link in self.links))

    @property
    def weight(self) -> float:
        return self.total_mass * self.gravity

    @property
    def control_lower(self) -> np.ndarray:
        return np.concatenate([np.full(self.n_props, self.min_thrust),
                               [-j.effort for j in self.joints]])

    @property
    def control_upper(self) -> np.ndarray:
        return np.concatenate([[p.max_thrust for p in self.propellers],
                               [j.effort for j in self.joints]])

    @property
    def joint_lower(self) -> np.ndarray:
        return np.array([j.lower for j in self.joints])

    @property
    def joint_upper(self) -> np.ndarray:
        return np.array([j.upper for j in self.joints])

    def link_index(self, name: str) -> int:
        for i, link in enumerate(self.links):
            if link.name == name:
                return i
        raise KeyError(name)

    def parent_index(self, body: int) -> int:
        if body == 0:
            return -1
        return self.link_index(self.joints[body - 1].parent)

    def hover_control(self) -> np.ndarray:
        """Equal thrusts carrying the full weight, zero joint torques."""
        return np.concatenate([np.full(self.n_props, self.weight / self.n_props),
                               np.zeros(self.n_joints)])

    def kernel(self) -> "ModelArrays":
        ka = self.__dict__.get("_kernel")
        if ka is None:
            ka = ModelArrays.from_model(self)
            object.__setattr__(self, "_kernel", ka)
        return ka

    # -- derived models -----------------------------------------------------

    def with_link_mass(self, index: int, mass: float, com=None) -> RobotModel:
        link = self.links[index]
        scale = mass / link.mass
        new = replace(link, mass=float(mass),
                      com=link.com if com is None else np.asarray(com, float),
                      inertia=link.inertia * scale, parts=())
        links = list(self.links)
        links[index] = new
        return _validated(replace(self, links=tuple(links)))

    def with_payload(self, mass: float) -> RobotModel:
        """Extra point mass rigidly attached at the base CoM."""
        base = self.links[0]
        return self.with_link_mass(0, base.mass + mass, base.com)

    def perturbed(self, mass_scale: float = 1.0, com_offset=(0.0, 0.0, 0.0)) -> RobotModel:
        links = []
        for i, link in enumerate(self.links):
            com = link.com + (np.asarray(com_offset, float) if i == 0 else 0.0)
            links.append(replace(link, mass=link.mass * mass_scale, com=com,
                                 inertia=link.inertia * mass_scale, parts=()))
        return _validated(replace(self, links=tuple(links)))

    def platform_only(self) -> RobotModel:
        """Drop the limb: its joints, links and the base parts tagged ``limb``."""
        base = self.links[0]
        parts = tuple(p for p in base.parts if p.group != "limb")
        if parts:
            base = _lump(base.name, parts)
        return _validated(replace(self, links=(base,), joints=(), frames={}))


@dataclass(frozen=True, eq=False)
class AllocationMap:
    """``wrench = matrix @ thrusts`` with wrench = (force, torque) in the base frame."""

    matrix: np.ndarray
    pinv: np.ndarray

    def wrench(self, thrusts) -> np.ndarray:
        return self.matrix @ np.asarray(thrusts, float)

    def thrusts_for(self, wrench) -> np.ndarray:
        return self.pinv @ np.asarray(wrench, float)


def allocation_map(model: RobotModel) -> AllocationMap:
    cols = []
    z = np.array([0.0, 0.0, 1.0])
    for p in model.propellers:
        # spin +1 turns counter-clockwise seen from above; drag torque on the body is clockwise
        torque = np.cross(p.position, z) - p.spin * p.torque_ratio * z
        cols.append(np.concatenate([z, torque]))
    A = np.array(cols).T
    return AllocationMap(A, np.linalg.pinv(A))


def twr(model: RobotModel) -> float:
    return sum(p.max_thrust for p in model.propellers) / model.weight


def hover_throttle(model: RobotModel) -> float:
    """Fraction of the thrust capacity used while hovering."""
    return 1.0 / twr(model)


# ---------------------------------------------------------------------------
# arrays consumed by the compiled dynamics
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ModelArrays:
    parent: np.ndarray        # (nb,) int, -1 for the base
    tree_E: np.ndarray        # (nb, 3, 3) parent->joint coordinate rotation
    tree_r: np.ndarray        # (nb, 3) joint origin in parent coordinates
    axis: np.ndarray          # (nb, 3) joint axis in the child frame
    inertia: np.ndarray       # (nb, 6, 6) spatial inertia, angular-first
    prop_pos: np.ndarray      # (np, 3)
    prop_yaw: np.ndarray      # (np,) signed yaw torque per newton
    gravity: float
    mass: np.ndarray          # (nb,)
    com: np.ndarray           # (nb, 3)

    @classmethod
    def from_model(cls, model: RobotModel) -> ModelArrays:
        nb = len(model.links)
        parent = np.full(nb, -1, dtype=np.int64)
        tree_E = np.zeros((nb, 3, 3))
        tree_r = np.zeros((nb, 3))
        axis = np.zeros((nb, 3))
        tree_E[0] = np.eye(3)
        for i, j in enumerate(model.joints, start=1):
            parent[i] = model.link_index(j.parent)
            tree_E[i] = j.origin.rotation.matrix().T
            tree_r[i] = j.origin.translation
            axis[i] = j.axis
        inertia = np.array([spatial_inertia(l.mass, l.com, l.inertia) for l in model.links])
        prop_pos = np.array([p.position for p in model.propellers]).reshape(-1, 3)
        prop_yaw = np.array([-p.spin * p.torque_ratio for p in model.propellers])
        return cls(parent, tree_E, tree_r, axis, inertia, prop_pos, prop_yaw,
                   float(model.gravity),
                   np.array([l.mass for l in model.links]),
                   np.array([l.com for l in model.links]))


def spatial_inertia(mass: float, com, inertia) -> np.ndarray:
    c = np.asarray(com, float)
    C = np.array([[0, -c[2], c[1]], [c[2], 0, -c[0]], [-c[1], c[0], 0]])
    out = np.zeros((6, 6))
    out[:3, :3] = np.asarray(inertia, float) + mass * C @ C.T
    out[:3, 3:] = mass * C
    out[3:, :3] = mass * C.T
    out[3:, 3:] = mass * np.eye(3)
    return out


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def _schema() -> dict:
    text = resources.files("borinot").joinpath("data/model.schema.json").read_text()
    return json.loads(text)


def reference_path(name: str = "borinot") -> Path:
    return Path(str(resources.files("borinot").joinpath(f"data/{name}.json")))


def load_reference(name: str = "borinot") -> RobotModel:
    return load_model(reference_path(name))


def load_model(source) -> RobotModel:
    """Load a model from a path, a JSON string, or an already-parsed dict."""
    if isinstance(source, dict):
        doc = source
    elif isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith("{")):
        with open(source) as fh:
            doc = json.load(fh)
    else:
        doc = json.loads(source)
    return parse_model(doc)


def parse_model(doc: dict) -> RobotModel:
    try:
        jsonschema.validate(doc, _schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ModelError(f"schema violation at '{where}': {exc.message}") from None

    links = {}
    for entry in doc["links"]:
        name = entry["name"]
        if name in links:
            raise ModelError(f"links: duplicate link name '{name}'")
        links[name] = _parse_link(entry)

    joints = [_parse_joint(j, links) for j in doc.get("joints", [])]
    order = _topological_order(links, joints)
    by_child = {j.child: j for j in joints}
    ordered_joints = tuple(by_child[name] for name in order[1:])

    props = tuple(
        Propeller(position=np.asarray(p["position"], float), spin=int(p["spin"]),
                  max_thrust=float(p["max_thrust"]),
                  torque_ratio=float(p.get("torque_ratio", 0.0165)))
        for p in doc["propellers"])
    prop_height = float(doc.get("limits", {}).get("propeller_height", 0.0))
    if prop_height:
        props = tuple(replace(p, position=p.position + [0.0, 0.0, prop_height]) for p in props)

    frames = {}
    for f in doc.get("frames", []):
        if f["parent"] not in links:
            raise ModelError(f"frames/{f['name']}: unknown parent link '{f['parent']}'")
        frames[f["name"]] = Frame(f["name"], f["parent"], np.asarray(f["offset"], float))

    limits = doc.get("limits", {})
    model = RobotModel(
        name=doc.get("name", "robot"),
        links=tuple(links[n] for n in order),
        joints=ordered_joints,
        propellers=props,
        frames=frames,
        min_thrust=float(limits.get("min_thrust", 0.0)),
        gravity=float(doc.get("gravity", GRAVITY)),
    )
    return _validated(model)


def _parse_link(entry: dict) -> Link:
    name = entry["name"]
    if "parts" in entry:
        parts = tuple(
            Part(p.get("name", f"{name}[{k}]"), float(p["mass"]),
                 np.asarray(p.get("position", [0, 0, 0]), float),
                 _inertia_matrix(p.get("inertia", [0, 0, 0])),
                 p.get("group", ""))
            for k, p in enumerate(entry["parts"]))
        for p in parts:
            if p.mass <= 0:
                raise ModelError(f"links/{name}/parts/{p.name}: mass must be > 0, got {p.mass}")
        return _lump(name, parts)
    if "mass" not in entry:
        raise ModelError(f"links/{name}: needs either 'mass' or 'parts'")
    return Link(name, float(entry["mass"]), np.asarray(entry.get("com", [0, 0, 0]), float),
                _inertia_matrix(entry.get("inertia", [0, 0, 0])))


def _inertia_matrix(value) -> np.ndarray:
    a = np.asarray(value, float)
    if a.shape == (3,):
        return np.diag(a)
    if a.shape == (6,):  # ixx, iyy, izz, ixy, ixz, iyz
        ixx, iyy, izz, ixy, ixz, iyz = a
        return np.array([[ixx, ixy, ixz], [ixy, iyy, iyz], [ixz, iyz, izz]])
    if a.shape == (3, 3):
        return a
    raise ModelError(f"inertia must have 3, 6 or 3x3 entries, got shape {a.shape}")


def _lump(name: str, parts) -> Link:
    mass = sum(p.mass for p in parts)
    com = sum(p.mass * p.position for p in parts) / mass
    inertia = np.zeros((3, 3))
    for p in parts:
        d = p.position - com
        inertia += p.inertia + p.mass * (d @ d * np.eye(3) - np.outer(d, d))
    return Link(name, float(mass), com, inertia, tuple(parts))


def _parse_joint(j: dict, links: dict) -> Joint:
    name = j["name"]
    for key in ("parent", "child"):
        if j[key] not in links:
            raise ModelError(f"joints/{name}/{key}: unknown link '{j[key]}'")
    axis = np.asarray(j["axis"], float)
    n = np.linalg.norm(axis)
    if n < 1e-12:
        raise ModelError(f"joints/{name}/axis: zero-length axis")
    origin = j.get("origin", {})
    rpy = origin.get("rpy", [0, 0, 0])
    pose = Pose(Rotation.from_rpy(*rpy), origin.get("xyz", [0, 0, 0]))
    lim = j["limits"]
    if not lim["lower"] < lim["upper"]:
        raise ModelError(f"joints/{name}/limits: lower must be < upper")
    return Joint(name, j["parent"], j["child"], axis / n, pose,
                 float(lim["lower"]), float(lim["upper"]), float(lim["effort"]))


def _topological_order(links: dict, joints: list[Joint]) -> list[str]:
    children: dict[str, list[str]] = {n: [] for n in links}
    parent_of: dict[str, str] = {}
    for j in joints:
        if j.child in parent_of:
            raise ModelError(f"joints/{j.name}: link '{j.child}' has two parents")
        parent_of[j.child] = j.parent
        children[j.parent].append(j.child)
    roots = [n for n in links if n not in parent_of]
    if len(roots) != 1:
        raise ModelError(f"joints: kinematic graph must have exactly one root, found {roots or 'none (cycle)'}")
    order, stack = [], [roots[0]]
    while stack:
        n = stack.pop(0)
        order.append(n)
        stack.extend(children[n])
    if len(order) != len(links):
        missing = sorted(set(links) - set(order))
        raise ModelError(f"joints: cycle or disconnected links {missing}")
    return order


def _validated(model: RobotModel) -> RobotModel:
    for link in model.links:
        if not link.mass > 0:
            raise ModelError(f"links/{link.name}/mass: must be > 0, got {link.mass}")
        I = link.inertia
        if not np.allclose(I, I.T, atol=1e-12):
            raise ModelError(f"links/{link.name}/inertia: not symmetric")
        if np.linalg.eigvalsh(I).min() <= 0:
            raise ModelError(f"links/{link.name}/inertia: not positive definite")
    for k, p in enumerate(model.propellers):
        if abs(p.spin) != 1:
            raise ModelError(f"propellers/{k}/spin: must be +1 or -1")
        if p.max_thrust <= model.min_thrust:
            raise ModelError(f"propellers/{k}/max_thrust: must exceed min_thrust")
    for j in model.joints:
        if j.effort <= 0:
            raise ModelError(f"joints/{j.name}/limits/effort: must be > 0")
    if not math.isfinite(model.gravity) or model.gravity <= 0:
        raise ModelError("gravity: must be positive")
    return model
