"""End-to-end orchestration: objects, datasets, model bundles, grasp planning,
randomized trials and the input-footprint report."""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from .encoder import extract_gripper_feature, load_autoencoder
from .errors import DomainError, FormatError, SingularityError, UsageError
from .geom3d import PointCloud, RigidTransform, TriangleMesh, load_obj, random_rotation, sample_surface
from .grippers import GripperModel, get_gripper
from .ik import (ActionSpace, IkEnv, SacAgent, SacConfig, TargetSampler, ik_oracle, load_agent, rollout, sac_train,
                 save_agent, to_ee_frame)
from .primitives import make_primitive
from .pssn import ContactPointSet, Pssn, PssnDataset, select_contacts
from .quality import FrictionModel, force_closure_oracle, generate_ground_truth, gqs
from .reach import Reachability, approach_frame
from .workspace import WorkspaceMatrix, sample_workspace

log = logging.getLogger(__name__)

__all__ = [
    "PipelineConfig",
    "DATASET_PRIMITIVES",
    "TRIAL_PRIMITIVES",
    "random_pose",
    "object_cloud",
    "cull_hemisphere",
    "build_dataset",
    "gripper_feature",
    "PlannerModels",
    "GraspPlan",
    "plan_grasp",
    "refine_placement",
    "run_trials",
    "write_trials_csv",
    "FootprintReport",
    "footprint_report",
    "train_policy",
    "save_policy",
    "workspace_targets",
]

# (kind, dims) stand-ins for household objects, sized for the desk grippers
DATASET_PRIMITIVES = (
    ("box", (0.05, 0.04, 0.06)),
    ("sphere", (0.03,)),
    ("cylinder", (0.025, 0.08)),
    ("box", (0.08, 0.03, 0.03)),
)
TRIAL_PRIMITIVES = DATASET_PRIMITIVES + (
    ("box", (0.045, 0.045, 0.045)),
    ("sphere", (0.025,)),
    ("cylinder", (0.02, 0.06)),
    ("box", (0.06, 0.05, 0.035)),
)


@dataclass
class PipelineConfig:
    gripper: str = "tri3"
    object: str = "box"
    object_dims: tuple[float, ...] = (0.05, 0.04, 0.06)
    M: int = 512
    L: int = 4096
    ae_L: int = 512
    k1: int = 128
    k2: int = 64
    k3: int = 64
    beam: int = 1
    tol: float = 0.005
    reach_tol: float = 0.01
    success_tol: float = 0.005
    plan_tol: float = 0.002
    max_candidates: int = 256
    eps: float = 0.01
    mu: float = 0.5
    n_sets: int = 40
    poses: int = 25
    trials: int = 5
    seed: int = 0
    ae_epochs: int = 200
    pssn_epochs: tuple[int, ...] = (60, 60, 60)
    sac_epochs: int = 300
    sac_train_steps: int = 10
    sac_her: int = 2
    pose_r_min: float = 0.4
    pose_r_max: float = 0.6
    cull: bool = False
    out: str = "runs"
    encoder_ckpt: str = ""
    pssn_ckpt: str = ""
    sac_ckpt: str = ""

    def validate(self) -> "PipelineConfig":
        for name in ("M", "L", "ae_L", "k1", "k2", "k3", "beam", "n_sets", "poses", "trials", "max_candidates"):
            if getattr(self, name) < 1:
                raise DomainError(f"config {name} must be positive")
        for name in ("tol", "reach_tol", "success_tol", "plan_tol", "eps", "mu"):
            if not getattr(self, name) > 0:
                raise DomainError(f"config {name} must be positive")
        if max(self.k1, self.k2, self.k3) > self.M:
            raise DomainError("k values may not exceed M")
        if not 0 <= self.pose_r_min <= self.pose_r_max:
            raise DomainError("pose annulus needs 0 <= r_min <= r_max")
        if self.object not in ("box", "cylinder", "sphere") and not os.path.isfile(self.object):
            raise UsageError(f"object {self.object!r} is neither a primitive nor an existing OBJ file")
        for name in ("encoder_ckpt", "pssn_ckpt", "sac_ckpt"):
            path = getattr(self, name)
            if path and not os.path.isfile(path):
                raise UsageError(f"config {name}: {path} does not exist")
        return self

    @property
    def k(self) -> tuple[int, int, int]:
        return (self.k1, self.k2, self.k3)

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = " ".join(repr(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str, base: "PipelineConfig | None" = None) -> "PipelineConfig":
        cfg = base or cls()
        values = {f.name: getattr(cfg, f.name) for f in fields(cls)}
        types = {f.name: type(getattr(cls(), f.name)) for f in fields(cls)}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = (s.strip() for s in line.partition("="))
            if not sep or key not in types:
                raise FormatError(f"config line {lineno}: unknown or malformed entry {raw.strip()!r}")
            try:
                values[key] = _parse_value(types[key], value, key)
            except ValueError as exc:
                raise FormatError(f"config line {lineno}: {exc}") from None
        return cls(**values)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            with open(path) as fh:
                return cls.loads(fh.read())
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None


def _parse_value(kind: type, value: str, key: str):
    if kind is bool:
        if value.lower() not in ("true", "false", "1", "0"):
            raise ValueError(f"{key} expects true/false, got {value!r}")
        return value.lower() in ("true", "1")
    if kind is tuple:
        elem = int if key == "pssn_epochs" else float
        return tuple(elem(x) for x in value.replace(",", " ").split())
    if kind is str:
        return value
    return kind(value)


# ---------------------------------------------------------------- objects

def random_pose(rng: np.random.Generator, r_min: float, r_max: float, height: float = 0.0) -> RigidTransform:
    """Random orientation; position uniform by area in a horizontal annulus."""
    r = math.sqrt(rng.uniform(r_min ** 2, r_max ** 2))
    a = rng.uniform(0.0, 2 * math.pi)
    return RigidTransform(random_rotation(rng), np.array([r * math.cos(a), r * math.sin(a), height]))


def cull_hemisphere(cloud: PointCloud, viewpoint) -> PointCloud:
    """Keep points whose normal faces the viewpoint, a single-camera partial view."""
    if cloud.normals is None:
        raise DomainError("hemisphere culling needs normals")
    v = np.asarray(viewpoint, dtype=float) - cloud.points
    keep = np.flatnonzero(np.sum(v * cloud.normals, axis=1) > 0)
    return cloud.take(keep)


def object_cloud(mesh: TriangleMesh, M: int, pose: RigidTransform, seed: int, cull: bool = False) -> PointCloud:
    local = sample_surface(mesh, M, seed)
    cloud = PointCloud(pose.apply(local.points), pose.apply_vectors(local.normals))
    if cull:
        cloud = cull_hemisphere(cloud, pose.translation + np.array([0.0, 0.0, 1.0]))
    return cloud


def load_object(cfg: PipelineConfig) -> TriangleMesh:
    if cfg.object in ("box", "cylinder", "sphere"):
        return make_primitive(cfg.object, cfg.object_dims, cfg.seed)
    return load_obj(cfg.object)


def build_dataset(gripper: GripperModel, workspace: WorkspaceMatrix, primitives=DATASET_PRIMITIVES,
                  poses: int = 25, M: int = 512, n_sets: int = 40, seed: int = 0,
                  friction: FrictionModel | None = None, reach_tol: float = 0.01) -> PssnDataset:
    """Ground-truth records for every (primitive, pose) pair."""
    rng = np.random.default_rng(seed)
    reach = Reachability(workspace, tol=reach_tol)
    records = []
    for kind, dims in primitives:
        mesh = make_primitive(kind, dims)
        for _ in range(poses):
            pose = RigidTransform(random_rotation(rng), np.zeros(3))
            s = int(rng.integers(2 ** 31))
            cloud = object_cloud(mesh, M, pose, s)
            records.append(generate_ground_truth(cloud, gripper, workspace, n_sets, s, friction,
                                                 reach_tol, reach=reach))
    return PssnDataset(records)


def gripper_feature(encoder, gripper: GripperModel, L: int = 512, seed: int = 0) -> np.ndarray:
    """Encoder feature of a freshly sampled (deterministic) workspace."""
    return extract_gripper_feature(encoder, sample_workspace(gripper, L, seed))


# ---------------------------------------------------------------- planning

@dataclass
class PlannerModels:
    gripper: GripperModel
    feature: np.ndarray
    pssn: Pssn
    agent: SacAgent
    sampler: TargetSampler
    reach: Reachability

    @classmethod
    def load(cls, cfg: PipelineConfig) -> "PlannerModels":
        for name in ("encoder_ckpt", "pssn_ckpt", "sac_ckpt"):
            path = getattr(cfg, name)
            if not path or not os.path.isfile(path):
                raise UsageError(f"missing checkpoint for {name}: {path!r}")
        gripper = get_gripper(cfg.gripper)
        enc, _ = load_autoencoder(cfg.encoder_ckpt)
        model, _ = Pssn.load(cfg.pssn_ckpt)
        agent, meta = load_agent(cfg.sac_ckpt)
        if meta.get("gripper") != gripper.name:
            raise UsageError(f"policy was trained for {meta.get('gripper')!r}, not {gripper.name!r}")
        sampler = TargetSampler(gripper, int(meta.get("ws_L", cfg.L)), int(meta.get("ws_seed", 0)))
        return cls(gripper, gripper_feature(enc, gripper, cfg.ae_L, cfg.seed), model, agent, sampler,
                   Reachability(sampler.ws, tol=cfg.reach_tol))


@dataclass
class GraspPlan:
    contacts: ContactPointSet | None
    gqs: float = math.nan
    oracle: bool = False
    joints: np.ndarray | None = None
    oracle_joints: np.ndarray | None = None
    residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    oracle_residual: float = math.nan
    ee_pose: RigidTransform | None = None
    success: bool = False
    reason: str = ""
    tried: int = 0

    @property
    def residual_max(self) -> float:
        return float(self.residuals.max()) if self.residuals.size else math.nan


def refine_placement(gripper: GripperModel, targets, ee: RigidTransform, init,
                     max_nfev: int = 200) -> tuple[np.ndarray, RigidTransform, float]:
    """Adjust joints and end-effector pose together so the fingertips land on
    world `targets` (finger order). Returns joints, pose and max residual (m)."""
    space = ActionSpace(gripper)
    targets = np.asarray(targets, dtype=float).reshape(-1, 3)
    init = np.asarray(init, dtype=float)
    a0 = space.normalize(np.r_[init, 0.0] if init.size == space.dim - 1 else init)
    d = space.dim

    def unpack(x):
        r = Rotation.from_rotvec(x[d:d + 3]).as_matrix() @ ee.rotation
        return np.clip(x[:d], -1.0, 1.0), RigidTransform(r, ee.translation + x[d + 3:])

    def resid(x):
        a, pose = unpack(x)
        try:
            return (pose.apply(space.fingertips(space.denormalize(a))) - targets).ravel()
        except SingularityError:
            return np.ones(targets.size)

    lo = np.r_[-np.ones(d), np.full(6, -np.inf)]
    sol = least_squares(resid, np.r_[a0, np.zeros(6)], bounds=(lo, -lo), xtol=1e-12, ftol=1e-14,
                        gtol=1e-14, max_nfev=max_nfev)
    a, pose = unpack(sol.x)
    err = float(np.linalg.norm(resid(sol.x).reshape(-1, 3), axis=1).max())
    return space.denormalize(a), pose, err


def plan_grasp(models: PlannerModels, cloud: PointCloud, cfg: PipelineConfig) -> GraspPlan:
    """Contacts by rank; the first set that is inside the sampled workspace,
    force closure and certified by the IK oracle is handed to the policy.
    The end-effector pose from the workspace match is refined before the
    oracle runs, since the matched row is only within reach_tol."""
    g = models.gripper
    if len(cloud) < max(cfg.k[:g.n_fingers]):
        return GraspPlan(None, reason="cloud smaller than k")
    fused = models.pssn.fused(cloud, models.feature)
    ranked = select_contacts(models.pssn.stages, fused, cloud, cfg.k[:g.n_fingers], beam=cfg.beam)
    friction = FrictionModel(mu=cfg.mu)
    center = cloud.centroid()
    reasons = {"oracle": 0, "reach": 0, "ik": 0}
    for tried, cand in enumerate(ranked[:cfg.max_candidates], start=1):
        plane = approach_frame(cand.points, center)
        m = models.reach.match(plane.inverse().apply(cand.points))
        if not m.ok:
            reasons["reach"] += 1
            continue
        if not force_closure_oracle(cand.points, cand.normals, friction, center):
            reasons["oracle"] += 1
            continue
        world = cand.points[list(m.perm)]
        # the matched row sits within reach_tol; close the gap with the pose free
        q_fit, ee, _ = refine_placement(g, world, m.ee_pose(plane), models.sampler.ws.configs[m.row])
        targets = to_ee_frame(ee, world)
        q_or, resid = ik_oracle(g, targets, restarts=1, init=q_fit)
        if resid > cfg.plan_tol:
            reasons["ik"] += 1
            continue
        cand.gqs = gqs(cand.points, center, cfg.eps)
        env = IkEnv(g, models.sampler, success_tol=1e-3)
        out = rollout(models.agent, env, targets)
        residuals = out["errors"]
        ok = bool(residuals.max() < cfg.success_tol)
        return GraspPlan(cand, cand.gqs, True, out["joints"], q_or, residuals, resid, ee, ok,
                         "" if ok else "policy residual above tolerance", tried)
    why = max(reasons, key=reasons.get) if any(reasons.values()) else "no candidates"
    return GraspPlan(None, reason=f"no candidate passed ({why} rejected most)", tried=min(len(ranked), cfg.max_candidates))


def run_trials(models: PlannerModels, cfg: PipelineConfig, objects=TRIAL_PRIMITIVES,
               trials: int | None = None) -> list[dict]:
    """Randomized-pose trials; rows ordered by (object, trial)."""
    rng = np.random.default_rng(cfg.seed)
    rows = []
    for kind, dims in objects:
        mesh = make_primitive(kind, dims)
        name = f"{kind}_" + "x".join(f"{d:g}" for d in dims)
        for t in range(cfg.trials if trials is None else trials):
            pose = random_pose(rng, cfg.pose_r_min, cfg.pose_r_max)
            cloud = object_cloud(mesh, cfg.M, pose, int(rng.integers(2 ** 31)), cfg.cull)
            plan = plan_grasp(models, cloud, cfg)
            rows.append({"object": name, "trial": t, "gqs": plan.gqs, "oracle": plan.oracle,
                         "residual_max_m": plan.residual_max, "success": plan.success})
    return rows


def trial_summary(rows: list[dict]) -> dict:
    g = [r["gqs"] for r in rows if not math.isnan(r["gqs"])]
    return {"n": len(rows),
            "success_rate": float(np.mean([r["success"] for r in rows])) if rows else math.nan,
            "mean_gqs": float(np.mean(g)) if g else math.nan}


def write_trials_csv(rows: list[dict], path) -> dict:
    """Per-trial rows plus a closing summary row (success rate, mean GQS)."""
    summary = trial_summary(rows)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["object", "trial", "gqs", "oracle", "residual_max_m", "success"])
        for r in rows:
            w.writerow([r["object"], r["trial"], repr(float(r["gqs"])), int(r["oracle"]),
                        repr(float(r["residual_max_m"])), int(r["success"])])
        w.writerow(["summary", summary["n"], repr(summary["mean_gqs"]), "", "", repr(summary["success_rate"])])
    return summary


# ---------------------------------------------------------------- footprint

REFERENCE_MULTIMODE_MB = 4777.0
REFERENCE_WORKSPACE_MB = 873.0


@dataclass(frozen=True)
class FootprintReport:
    workspace_bytes: int
    multimode_bytes: int
    reduction: float
    reference_reduction: float

    def lines(self) -> list[str]:
        return [
            f"workspace input bytes: {self.workspace_bytes}",
            f"multi-mode input bytes: {self.multimode_bytes}",
            f"reduction: {100 * self.reduction:.1f}%",
            f"reference ({REFERENCE_MULTIMODE_MB:g} MB vs {REFERENCE_WORKSPACE_MB:g} MB): {100 * self.reference_reduction:.1f}%",
        ]


def footprint_report(n_fingers: int, L: int, modes: int, points_per_mode: int) -> FootprintReport:
    """One L x 3N float64 workspace vs `modes` float64 gripper clouds."""
    if min(n_fingers, L, modes, points_per_mode) < 1:
        raise DomainError("footprint inputs must be positive")
    ws = L * 3 * n_fingers * 8
    mm = modes * points_per_mode * 3 * 8
    return FootprintReport(ws, mm, (mm - ws) / mm,
                           (REFERENCE_MULTIMODE_MB - REFERENCE_WORKSPACE_MB) / REFERENCE_MULTIMODE_MB)


# ---------------------------------------------------------------- training helpers

def train_policy(gripper: GripperModel, epochs: int, seed: int = 0, L: int = 4096, her: int = 0,
                 train_steps: int = 10, sampler: TargetSampler | None = None):
    """SAC on workspace targets; returns (agent, run, sampler)."""
    sampler = sampler or TargetSampler(gripper, L, seed)
    cfg = SacConfig(train_steps=train_steps, her=her)
    run = sac_train(lambda: IkEnv(gripper, sampler, seed=seed + 1), epochs, seed=seed, config=cfg)
    return run.agent, run, sampler


def save_policy(path, agent: SacAgent, gripper: GripperModel, sampler: TargetSampler, seed: int) -> None:
    save_agent(path, agent, gripper.name, {"ws_L": str(sampler.ws.L), "ws_seed": str(seed)})


def workspace_targets(sampler: TargetSampler, n: int, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [sampler.draw(rng)[0] for _ in range(n)]
