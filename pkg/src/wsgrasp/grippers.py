"""Parametric gripper kinematics.

A gripper is a set of actuated joints (the joint-space coordinates), a set of
serial finger chains whose joint values are affine couplings of actuators, and
optionally a planar five-bar palm whose two distal links carry finger bases.
Serial tree formats cannot express the palm loop, hence the custom model.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DomainError, FormatError, SingularityError, UsageError
from .geom3d import RigidTransform, rotation_about

__all__ = [
    "JointSpec",
    "ChainJoint",
    "Finger",
    "FiveBarPalm",
    "FiveBarSolution",
    "GripperModel",
    "solve_five_bar",
    "forward_kinematics",
    "builtin_grippers",
    "get_gripper",
    "load_gripper",
    "dumps_gripper",
    "parse_gripper",
]

BRANCH_UP = 1
BRANCH_DOWN = -1


@dataclass(frozen=True)
class JointSpec:
    """An actuated joint: one coordinate of the gripper's configuration."""
    name: str
    kind: str
    limits: tuple[float, float]

    def __post_init__(self):
        if self.kind not in ("revolute", "prismatic"):
            raise DomainError(f"joint kind must be revolute or prismatic, got {self.kind!r}")
        lo, hi = self.limits
        if not lo < hi:
            raise DomainError(f"joint {self.name}: limits must satisfy lo < hi")
        object.__setattr__(self, "limits", (float(lo), float(hi)))


@dataclass(frozen=True)
class ChainJoint:
    """A joint inside a finger chain, driven as ratio * q[actuator] + offset."""
    kind: str
    axis: tuple[float, float, float]
    origin: RigidTransform
    actuator: int
    ratio: float = 1.0
    offset: float = 0.0

    def __post_init__(self):
        if self.kind not in ("revolute", "prismatic"):
            raise DomainError(f"joint kind must be revolute or prismatic, got {self.kind!r}")
        a = np.asarray(self.axis, dtype=float)
        if abs(np.linalg.norm(a) - 1.0) > 1e-9:
            raise DomainError("joint axis must be unit length")
        object.__setattr__(self, "axis", tuple(float(x) for x in a))

    def motion(self, value: float) -> RigidTransform:
        if self.kind == "revolute":
            return RigidTransform._trusted(rotation_about(self.axis, value), np.zeros(3))
        return RigidTransform._trusted(np.eye(3), np.asarray(self.axis, dtype=float) * value)


@dataclass(frozen=True)
class Finger:
    """Serial chain from `base` (in the mount frame) to the fingertip offset.

    mount 0 is the gripper base frame; mounts 1 and 2 are the frames of the
    five-bar distal links (origin at the link's base joint, x along the link).
    """
    base: RigidTransform
    joints: tuple[ChainJoint, ...]
    tip: tuple[float, float, float]
    mount: int = 0


@dataclass(frozen=True)
class FiveBarPalm:
    """Planar five-bar loop A-B-C-D-E in the palm frame's x-y plane.

    links = (l1, l2, l3, l4, l0): crank A-B, distal B-C, distal D-C, crank E-D,
    ground A-E. The cranks are driven by actuators `actuators[0]`, `actuators[1]`,
    measured from the palm x axis.
    """
    links: tuple[float, float, float, float, float]
    actuators: tuple[int, int]
    frame: RigidTransform = field(default_factory=RigidTransform)
    branch: int = BRANCH_UP
    singular_tol: float = 1e-9

    def __post_init__(self):
        if len(self.links) != 5 or min(self.links) <= 0:
            raise DomainError("five-bar needs five positive link lengths")
        if self.branch not in (BRANCH_UP, BRANCH_DOWN):
            raise DomainError("branch must be +1 (elbow-up) or -1 (elbow-down)")
        object.__setattr__(self, "links", tuple(float(x) for x in self.links))


@dataclass(frozen=True)
class FiveBarSolution:
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray
    e: np.ndarray
    phi_bc: float
    phi_dc: float
    near_singular: bool

    def residual(self, palm: FiveBarPalm) -> float:
        """Norm of the vector loop A + l1 + l2 - l3 - l4 - E."""
        l1, l2, l3, l4, _ = palm.links
        th1 = math.atan2(self.b[1] - self.a[1], self.b[0] - self.a[0])
        th2 = math.atan2(self.d[1] - self.e[1], self.d[0] - self.e[0])
        loop = (self.a + l1 * _unit(th1) + l2 * _unit(self.phi_bc)
                - l3 * _unit(self.phi_dc) - l4 * _unit(th2) - self.e)
        return float(np.linalg.norm(loop))

    def link_frames(self) -> tuple[RigidTransform, RigidTransform]:
        """Planar frames of the distal links: origin at B (resp. D), x along the link."""
        f1 = RigidTransform._trusted(rotation_about((0, 0, 1), self.phi_bc), np.r_[self.b, 0.0])
        f2 = RigidTransform._trusted(rotation_about((0, 0, 1), self.phi_dc), np.r_[self.d, 0.0])
        return f1, f2


def _unit(angle: float) -> np.ndarray:
    return np.array([math.cos(angle), math.sin(angle)])


def solve_five_bar(palm: FiveBarPalm, theta1: float, theta2: float) -> FiveBarSolution:
    """Closed-form loop closure by intersecting the two distal-link circles."""
    l1, l2, l3, l4, l0 = palm.links
    a = np.array([-l0 / 2, 0.0])
    e = np.array([l0 / 2, 0.0])
    b = a + l1 * _unit(theta1)
    d = e + l4 * _unit(theta2)
    bd = d - b
    dist = float(np.hypot(bd[0], bd[1]))
    scale = l2 + l3
    if dist < 1e-15:
        raise SingularityError("distal link bases coincide")
    along = (l2 * l2 - l3 * l3 + dist * dist) / (2.0 * dist)
    h2 = l2 * l2 - along * along
    tol = palm.singular_tol * scale * scale
    if h2 < -tol:
        raise SingularityError(
            f"five-bar cannot close at theta=({theta1:.6g}, {theta2:.6g}): "
            f"|BD|={dist:.6g} outside [{abs(l2 - l3):.6g}, {scale:.6g}]")
    near = h2 <= tol
    h = math.sqrt(max(h2, 0.0))
    u = bd / dist
    perp = np.array([-u[1], u[0]])
    c = b + along * u + palm.branch * h * perp
    phi_bc = math.atan2(c[1] - b[1], c[0] - b[0])
    phi_dc = math.atan2(c[1] - d[1], c[0] - d[0])
    return FiveBarSolution(a, b, c, d, e, phi_bc, phi_dc, near)


@dataclass(frozen=True)
class GripperModel:
    name: str
    actuators: tuple[JointSpec, ...]
    fingers: tuple[Finger, ...]
    palm: FiveBarPalm | None = None
    arm_roll: tuple[float, float] | None = None

    def __post_init__(self):
        if len(self.fingers) < 2:
            raise DomainError("a gripper needs at least two fingers")
        if len(self.actuators) < 1:
            raise DomainError("a gripper needs at least one actuator")
        used = set()
        for f in self.fingers:
            if f.mount not in (0, 1, 2):
                raise DomainError("finger mount must be 0, 1 or 2")
            if f.mount and self.palm is None:
                raise DomainError("finger mounted on a palm link but no palm defined")
            for j in f.joints:
                if not 0 <= j.actuator < len(self.actuators):
                    raise DomainError(f"chain joint references unknown actuator {j.actuator}")
                used.add(j.actuator)
        if self.palm is not None:
            for i in self.palm.actuators:
                if not 0 <= i < len(self.actuators):
                    raise DomainError(f"palm references unknown actuator {i}")
                used.add(i)
        unused = set(range(len(self.actuators))) - used
        if unused:
            names = [self.actuators[i].name for i in sorted(unused)]
            raise DomainError(f"actuators not referenced by any chain or the palm: {names}")
        if self.palm is not None:
            _validate_palm(self)

    @property
    def n_fingers(self) -> int:
        return len(self.fingers)

    @property
    def n_actuators(self) -> int:
        return len(self.actuators)

    @property
    def lower(self) -> np.ndarray:
        return np.array([j.limits[0] for j in self.actuators])

    @property
    def upper(self) -> np.ndarray:
        return np.array([j.limits[1] for j in self.actuators])

    def check_config(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float).reshape(-1)
        if q.shape != (self.n_actuators,):
            raise DomainError(f"{self.name}: expected {self.n_actuators} joint values, got {q.size}")
        if not np.all(np.isfinite(q)):
            raise DomainError(f"{self.name}: non-finite joint value")
        bad = (q < self.lower) | (q > self.upper)
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise DomainError(
                f"{self.name}: joint {self.actuators[i].name}={q[i]:.6g} outside {self.actuators[i].limits}")
        return q

    def fk(self, q) -> np.ndarray:
        return forward_kinematics(self, q)


def _validate_palm(model: GripperModel) -> None:
    # at least some of the crank box must be assemblable; singular draws are
    # rejected downstream rather than clamped
    rng = np.random.default_rng(0)
    i1, i2 = model.palm.actuators
    lo, hi = model.lower, model.upper
    ok = 0
    for _ in range(256):
        t1 = rng.uniform(lo[i1], hi[i1])
        t2 = rng.uniform(lo[i2], hi[i2])
        try:
            solve_five_bar(model.palm, t1, t2)
            ok += 1
        except SingularityError:
            pass
    if ok < 64:
        raise DomainError(f"{model.name}: five-bar closes for only {ok}/256 sampled crank angles")


def forward_kinematics(model: GripperModel, q, *, return_palm: bool = False):
    """Fingertip positions (N x 3, gripper base frame) at joint values `q`."""
    q = model.check_config(q)
    mounts = [RigidTransform()]
    sol = None
    if model.palm is not None:
        i1, i2 = model.palm.actuators
        sol = solve_five_bar(model.palm, q[i1], q[i2])
        f1, f2 = sol.link_frames()
        mounts += [model.palm.frame @ f1, model.palm.frame @ f2]
    tips = np.empty((model.n_fingers, 3))
    for k, finger in enumerate(model.fingers):
        t = mounts[finger.mount] @ finger.base
        for j in finger.joints:
            t = t @ j.origin @ j.motion(j.ratio * q[j.actuator] + j.offset)
        tips[k] = t.apply(finger.tip)
    if return_palm:
        return tips, sol
    return tips


# ---------------------------------------------------------------- builtins

def _jaw2() -> GripperModel:
    gap0 = 0.02
    fingers = []
    for side in (-1.0, 1.0):
        fingers.append(Finger(
            base=RigidTransform.from_translation((side * gap0 / 2, 0.0, 0.10)),
            joints=(ChainJoint("prismatic", (side, 0.0, 0.0), RigidTransform(), 0),),
            tip=(0.0, 0.0, 0.05),
        ))
    return GripperModel("jaw2", (JointSpec("stroke", "prismatic", (0.0, 0.04)),), tuple(fingers))


def _curl_finger(base: RigidTransform, act: int, lengths=(0.06, 0.05), distal_ratio=0.5,
                 spread: int | None = None, spread_sign: float = 1.0, mount: int = 0) -> Finger:
    """Planar two-link finger that curls its +z toward local +y."""
    joints = []
    if spread is not None:
        joints.append(ChainJoint("revolute", (0.0, 0.0, 1.0), RigidTransform(), spread, spread_sign))
    joints.append(ChainJoint("revolute", (-1.0, 0.0, 0.0), RigidTransform(), act))
    joints.append(ChainJoint("revolute", (-1.0, 0.0, 0.0),
                             RigidTransform.from_translation((0, 0, lengths[0])), act, distal_ratio))
    return Finger(base, tuple(joints), (0.0, 0.0, lengths[1]), mount)


def _yaw_frame(xyz, inward_xy) -> RigidTransform:
    # local +y along the inward direction
    ang = math.atan2(inward_xy[1], inward_xy[0]) - math.pi / 2
    return RigidTransform(rotation_about((0, 0, 1), ang), xyz)


def _tri3() -> GripperModel:
    z0 = 0.07
    acts = (
        JointSpec("spread", "revolute", (0.0, math.pi / 2)),
        JointSpec("flex1", "revolute", (0.0, 1.3)),
        JointSpec("flex2", "revolute", (0.0, 1.3)),
        JointSpec("flex3", "revolute", (0.0, 1.3)),
    )
    fingers = (
        _curl_finger(_yaw_frame((0.035, 0.025, z0), (-1, 0)), 1, spread=0, spread_sign=1.0),
        _curl_finger(_yaw_frame((0.035, -0.025, z0), (-1, 0)), 2, spread=0, spread_sign=-1.0),
        _curl_finger(_yaw_frame((-0.035, 0.0, z0), (1, 0)), 3),
    )
    return GripperModel("tri3", acts, fingers)


def _fivebar3() -> GripperModel:
    acts = (
        JointSpec("crank1", "revolute", (0.4 * math.pi, 0.8 * math.pi)),
        JointSpec("crank2", "revolute", (0.2 * math.pi, 0.6 * math.pi)),
        JointSpec("flex", "revolute", (0.0, 1.2)),
    )
    palm = FiveBarPalm((0.04, 0.05, 0.05, 0.04, 0.05), (0, 1),
                       frame=RigidTransform.from_translation((0.0, -0.04, 0.07)))
    # distal-link frames have x along B->C (resp. D->C); the fingers sit at the
    # link midpoints and curl toward the fixed thumb
    mid = 0.025
    f1 = _curl_finger(RigidTransform(rotation_about((0, 0, 1), math.pi), (mid, 0.0, 0.0)), 2,
                      lengths=(0.05, 0.05), mount=1)
    f2 = _curl_finger(RigidTransform(np.eye(3), (mid, 0.0, 0.0)), 2, lengths=(0.05, 0.05), mount=2)
    thumb = _curl_finger(_yaw_frame((0.0, -0.06, 0.07), (0, 1)), 2, lengths=(0.05, 0.05))
    return GripperModel("fivebar3", acts, (f1, f2, thumb), palm=palm,
                        arm_roll=(-math.pi / 6, math.pi / 6))


_BUILTINS = {"jaw2": _jaw2, "tri3": _tri3, "fivebar3": _fivebar3}
_CACHE: dict[str, GripperModel] = {}


def builtin_grippers() -> list[GripperModel]:
    return [get_gripper(name) for name in _BUILTINS]


def get_gripper(name_or_path: str) -> GripperModel:
    """Builtin by name, otherwise a gripper definition file."""
    if name_or_path in _BUILTINS:
        if name_or_path not in _CACHE:
            _CACHE[name_or_path] = _BUILTINS[name_or_path]()
        return _CACHE[name_or_path]
    try:
        return load_gripper(name_or_path)
    except FileNotFoundError:
        raise UsageError(f"unknown gripper {name_or_path!r} (builtins: {sorted(_BUILTINS)})") from None


# ---------------------------------------------------------------- text format
#
#   name = jaw2
#   actuator = stroke prismatic 0 0.04
#   arm_roll = -0.5 0.5
#   palm = l1 l2 l3 l4 l0 | crank1 crank2 | up | x y z roll pitch yaw
#   finger = mount | x y z roll pitch yaw
#   joint = kind | ax ay az | x y z roll pitch yaw | actuator ratio offset
#   tip = x y z
#
# `joint` and `tip` lines apply to the most recent `finger`.

def _pose_fields(t: RigidTransform) -> str:
    r = t.rotation
    pitch = math.asin(max(-1.0, min(1.0, -r[2, 0])))
    roll = math.atan2(r[2, 1], r[2, 2])
    yaw = math.atan2(r[1, 0], r[0, 0])
    return " ".join(repr(float(v)) for v in (*t.translation, roll, pitch, yaw))


def dumps_gripper(model: GripperModel) -> str:
    names = [a.name for a in model.actuators]
    out = [f"name = {model.name}"]
    for a in model.actuators:
        out.append(f"actuator = {a.name} {a.kind} {a.limits[0]!r} {a.limits[1]!r}")
    if model.arm_roll is not None:
        out.append(f"arm_roll = {model.arm_roll[0]!r} {model.arm_roll[1]!r}")
    if model.palm is not None:
        p = model.palm
        branch = "up" if p.branch == BRANCH_UP else "down"
        out.append("palm = " + " ".join(repr(x) for x in p.links)
                   + f" | {names[p.actuators[0]]} {names[p.actuators[1]]} | {branch} | "
                   + _pose_fields(p.frame))
    for f in model.fingers:
        out.append(f"finger = {f.mount} | {_pose_fields(f.base)}")
        for j in f.joints:
            out.append(f"joint = {j.kind} | {' '.join(repr(x) for x in j.axis)} | "
                       f"{_pose_fields(j.origin)} | {names[j.actuator]} {j.ratio!r} {j.offset!r}")
        out.append("tip = " + " ".join(repr(float(x)) for x in f.tip))
    return "\n".join(out) + "\n"


def _floats(s: str, n: int, lineno: int) -> list[float]:
    parts = s.split()
    if len(parts) != n:
        raise FormatError(f"line {lineno}: expected {n} numbers, got {len(parts)}")
    try:
        return [float(x) for x in parts]
    except ValueError:
        raise FormatError(f"line {lineno}: bad number in {s!r}") from None


def _pose(s: str, lineno: int) -> RigidTransform:
    v = _floats(s, 6, lineno)
    return RigidTransform.from_xyz_rpy(v[:3], v[3:])


def parse_gripper(text: str) -> GripperModel:
    name = None
    acts: list[JointSpec] = []
    arm_roll = None
    palm_raw = None
    fingers: list[dict] = []

    def act_index(nm: str, lineno: int) -> int:
        for i, a in enumerate(acts):
            if a.name == nm:
                return i
        raise FormatError(f"line {lineno}: unknown actuator {nm!r}")

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        fields = [s.strip() for s in value.split("|")]
        if key == "name":
            name = value
        elif key == "actuator":
            parts = value.split()
            if len(parts) != 4:
                raise FormatError(f"line {lineno}: actuator = name kind lo hi")
            lo, hi = _floats(" ".join(parts[2:]), 2, lineno)
            acts.append(JointSpec(parts[0], parts[1], (lo, hi)))
        elif key == "arm_roll":
            arm_roll = tuple(_floats(value, 2, lineno))
        elif key == "palm":
            if len(fields) != 4:
                raise FormatError(f"line {lineno}: palm needs 4 |-separated fields")
            cranks = fields[1].split()
            if len(cranks) != 2 or fields[2] not in ("up", "down"):
                raise FormatError(f"line {lineno}: malformed palm record")
            palm_raw = (_floats(fields[0], 5, lineno),
                        (act_index(cranks[0], lineno), act_index(cranks[1], lineno)),
                        BRANCH_UP if fields[2] == "up" else BRANCH_DOWN,
                        _pose(fields[3], lineno))
        elif key == "finger":
            if len(fields) != 2:
                raise FormatError(f"line {lineno}: finger = mount | pose")
            try:
                mount = int(fields[0])
            except ValueError:
                raise FormatError(f"line {lineno}: bad mount {fields[0]!r}") from None
            fingers.append({"mount": mount, "base": _pose(fields[1], lineno), "joints": [], "tip": None})
        elif key in ("joint", "tip"):
            if not fingers:
                raise FormatError(f"line {lineno}: {key} before any finger")
            if key == "tip":
                fingers[-1]["tip"] = tuple(_floats(value, 3, lineno))
                continue
            if len(fields) != 4:
                raise FormatError(f"line {lineno}: joint needs 4 |-separated fields")
            drive = fields[3].split()
            if len(drive) != 3:
                raise FormatError(f"line {lineno}: joint drive = actuator ratio offset")
            ratio, offset = _floats(" ".join(drive[1:]), 2, lineno)
            fingers[-1]["joints"].append(ChainJoint(
                fields[0], tuple(_floats(fields[1], 3, lineno)), _pose(fields[2], lineno),
                act_index(drive[0], lineno), ratio, offset))
        else:
            raise FormatError(f"line {lineno}: unknown key {key!r}")
    if name is None:
        raise FormatError("gripper file has no name")
    for i, f in enumerate(fingers):
        if f["tip"] is None:
            raise FormatError(f"finger {i} has no tip")
    palm = None
    if palm_raw is not None:
        links, cranks, branch, frame = palm_raw
        palm = FiveBarPalm(tuple(links), cranks, frame, branch)
    return GripperModel(
        name, tuple(acts),
        tuple(Finger(f["base"], tuple(f["joints"]), f["tip"], f["mount"]) for f in fingers),
        palm=palm, arm_roll=arm_roll)


def load_gripper(path) -> GripperModel:
    with open(path) as fh:
        return parse_gripper(fh.read())


def sample_config(model: GripperModel, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(model.lower, model.upper)


def is_singular(model: GripperModel, q: Sequence[float]) -> bool:
    if model.palm is None:
        return False
    i1, i2 = model.palm.actuators
    try:
        return solve_five_bar(model.palm, q[i1], q[i2]).near_singular
    except SingularityError:
        return True
