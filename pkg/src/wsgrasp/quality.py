"""Grasp quality score, LP force-closure oracle and ground-truth contact sets."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .errors import DomainError
from .geom3d import PointCloud
from .grippers import GripperModel
from .reach import Reachability, approach_frame
from .workspace import WorkspaceMatrix

log = logging.getLogger(__name__)

__all__ = [
    "GQS_THRESHOLD",
    "skew",
    "GraspMatrix",
    "grasp_matrix",
    "gqs",
    "gqs_details",
    "FrictionModel",
    "contact_wrenches",
    "force_closure_oracle",
    "GroundTruthRecord",
    "generate_ground_truth",
    "ThresholdReport",
    "calibrate_threshold",
]

GQS_THRESHOLD = 0.75


def skew(v) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass(frozen=True, eq=False)
class GraspMatrix:
    G: np.ndarray
    contacts: np.ndarray
    origin: np.ndarray
    eps: float = 0.01


def grasp_matrix(contacts, origin, torque_scale: float | None = None, eps: float = 0.01) -> GraspMatrix:
    """6 x 3k map from stacked contact forces to the net wrench about `origin`.

    Block i is [I3 ; skew(p_i - origin) / torque_scale].
    """
    p = np.asarray(contacts, dtype=float).reshape(-1, 3)
    if len(p) < 1:
        raise DomainError("need at least one contact")
    o = np.asarray(origin, dtype=float).reshape(3)
    rho = 1.0 if torque_scale is None else float(torque_scale)
    blocks = [np.vstack([np.eye(3), skew(pi - o) / rho]) for pi in p]
    return GraspMatrix(np.hstack(blocks), p, o, eps)


@dataclass(frozen=True)
class GqsDetails:
    lambda0: float
    raw: float
    score: float


def gqs_details(contacts, origin, eps: float = 0.01, torque_scale: float | None = None) -> GqsDetails:
    G = grasp_matrix(contacts, origin, torque_scale, eps).G
    lam0 = float(np.linalg.eigvalsh(G @ G.T - eps * np.eye(6))[0])
    raw = 2.0 - 2.0 / (1.0 + math.exp(-lam0))
    return GqsDetails(lam0, raw, min(1.0, max(0.0, raw)))


def gqs(contacts, origin, eps: float = 0.01, torque_scale: float | None = None) -> float:
    """2 - 2*sigmoid(lambda_min(G G^T - eps I)), clamped to [0, 1]."""
    return gqs_details(contacts, origin, eps, torque_scale).score


@dataclass(frozen=True)
class FrictionModel:
    """Linearized Coulomb cone with `edges` generators per contact.

    `torsion` is the soft-finger torsional friction radius (m): a contact can
    also exert a moment about its normal of up to mu * torsion * normal force. It is
    what lets two opposing fingertips resist a twist about the line joining them.
    """
    mu: float = 0.5
    edges: int = 8
    torsion: float = 0.005

    def __post_init__(self):
        if self.mu <= 0:
            raise DomainError("friction coefficient must be positive")
        if self.edges < 3:
            raise DomainError("friction cone needs at least 3 edges")
        if self.torsion < 0:
            raise DomainError("torsional radius must be non-negative")


def _tangent_basis(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(n, a)
    u /= np.linalg.norm(u)
    return u, np.cross(n, u)


def contact_wrenches(contacts, normals, friction: FrictionModel, origin) -> np.ndarray:
    """6 x K generators of the grasp wrench cone. Normals point out of the object."""
    p = np.asarray(contacts, dtype=float).reshape(-1, 3)
    nrm = np.asarray(normals, dtype=float).reshape(-1, 3)
    if nrm.shape != p.shape:
        raise DomainError("one normal per contact required")
    lens = np.linalg.norm(nrm, axis=1)
    if np.any(lens < 1e-12):
        raise DomainError("degenerate (zero) contact normal")
    o = np.asarray(origin, dtype=float).reshape(3)
    cols = []
    angles = 2 * np.pi * np.arange(friction.edges) / friction.edges
    for pi, ni in zip(p, nrm / lens[:, None]):
        inward = -ni
        u, v = _tangent_basis(inward)
        r = pi - o
        for a in angles:
            f = inward + friction.mu * (np.cos(a) * u + np.sin(a) * v)
            cols.append(np.r_[f, np.cross(r, f)])
        if friction.torsion > 0:
            for s in (1.0, -1.0):
                cols.append(np.r_[inward, np.cross(r, inward) + s * friction.mu * friction.torsion * inward])
    return np.array(cols).T


def force_closure_oracle(contacts, normals, friction: FrictionModel | None = None, origin=None,
                         margin: float = 1e-9) -> bool:
    """True iff the origin is strictly inside the convex hull of the wrench generators.

    Decided by the LP  max t  s.t.  W lam = 0, sum(lam) = 1, lam_j >= t, together
    with rank(W) = 6: a strictly positive null combination of a spanning set
    means the generated cone is all of R^6.
    """
    friction = friction or FrictionModel()
    p = np.asarray(contacts, dtype=float).reshape(-1, 3)
    if len(p) < 2:
        raise DomainError("force closure needs at least two contacts")
    o = p.mean(axis=0) if origin is None else np.asarray(origin, dtype=float)
    W = contact_wrenches(p, normals, friction, o)
    # torque columns in units of the grasp size keep the LP well scaled
    scale = max(float(np.max(np.linalg.norm(p - o, axis=1))), 1e-9)
    W = W.copy()
    W[3:] /= scale
    sv = np.linalg.svd(W, compute_uv=False)
    if sv[-1] <= 1e-9 * sv[0] or len(sv) < 6:
        return False
    K = W.shape[1]
    c = np.zeros(K + 1)
    c[-1] = -1.0
    A_eq = np.zeros((7, K + 1))
    A_eq[:6, :K] = W
    A_eq[6, :K] = 1.0
    b_eq = np.r_[np.zeros(6), 1.0]
    A_ub = np.hstack([-np.eye(K), np.ones((K, 1))])
    b_ub = np.zeros(K)
    bounds = [(0, None)] * K + [(None, 1.0)]
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds, method="highs")
    if res.status != 0:
        return False
    return bool(-res.fun > margin)


# ---------------------------------------------------------------- datasets

@dataclass
class GroundTruthRecord:
    cloud: PointCloud
    gripper: str
    sets: np.ndarray                     # n_sets x N cloud indices, finger order
    draws: int = 0
    reach_errors: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def n_contacts(self) -> int:
        return self.sets.shape[1] if self.sets.size else 0

    def stage_indices(self) -> list[np.ndarray]:
        """Flat per-stage valid lists: every member of a valid set qualifies for
        any stage; stage-conditional structure lives in `sets`."""
        u = np.unique(self.sets) if self.sets.size else np.zeros(0, dtype=np.int64)
        return [u for _ in range(self.sets.shape[1] if self.sets.ndim == 2 else 0)]


def generate_ground_truth(cloud: PointCloud, gripper: GripperModel, workspace: WorkspaceMatrix,
                          n_sets: int, seed: int, friction: FrictionModel | None = None,
                          reach_tol: float = 0.01, max_draws: int = 1_000_000,
                          batch: int = 4096, reach: Reachability | None = None) -> GroundTruthRecord:
    """Rejection-sample contact sets that are force closure and reachable."""
    if cloud.normals is None:
        raise DomainError("ground-truth generation needs cloud normals")
    friction = friction or FrictionModel()
    N = gripper.n_fingers
    reach = reach or Reachability(workspace, tol=reach_tol)
    rng = np.random.default_rng(seed)
    M = len(cloud)
    center = cloud.centroid()
    found: list[tuple[int, ...]] = []
    errors: list[float] = []
    seen: set[tuple[int, ...]] = set()
    draws = 0
    while len(found) < n_sets and draws < max_draws:
        n = min(batch, max_draws - draws)
        cand = np.stack([rng.integers(0, M, size=n) for _ in range(N)], axis=1)
        draws += n
        distinct = np.all(np.diff(np.sort(cand, axis=1), axis=1) > 0, axis=1)
        cand = cand[distinct]
        if not len(cand):
            continue
        cand = cand[reach.prescreen(cloud.points[cand])]
        for idx in cand:
            key = tuple(sorted(int(i) for i in idx))
            if key in seen:
                continue
            seen.add(key)
            pts = cloud.points[idx]
            plane = approach_frame(pts, center)
            m = reach.match(plane.inverse().apply(pts))
            if not m.ok:
                continue
            if not force_closure_oracle(pts, cloud.normals[idx], friction, center):
                continue
            found.append(tuple(int(idx[j]) for j in m.perm))
            errors.append(m.error)
            if len(found) >= n_sets:
                break
    if len(found) < n_sets:
        warnings.warn(f"{gripper.name}: found {len(found)}/{n_sets} valid contact sets in {draws} draws")
    sets = np.array(found, dtype=np.int64).reshape(-1, N)
    return GroundTruthRecord(cloud, gripper.name, sets, draws, np.array(errors))


@dataclass(frozen=True)
class ThresholdReport:
    threshold: float          # calibrated: best agreement with the oracle
    agreement: float          # fraction of sets classified alike at `threshold`
    fixed_agreement: float    # same, at GQS_THRESHOLD
    n: int
    positives: int            # sets the oracle calls force closure
    inverted_agreement: float = math.nan  # best agreement of the reversed rule, score < t


    def lines(self) -> list[str]:
        return [f"sets: {self.n} ({self.positives} force closure by the oracle)",
                f"calibrated threshold {self.threshold:.4f}: agreement {100 * self.agreement:.1f}%",
                f"fixed threshold {GQS_THRESHOLD}: agreement {100 * self.fixed_agreement:.1f}%",
                f"reversed rule (score < t): best agreement {100 * self.inverted_agreement:.1f}%"]


def calibrate_threshold(scores, verdicts) -> ThresholdReport:
    """Threshold on GQS that best reproduces the oracle verdicts (score >= t
    means valid). Ties go to the lowest threshold."""
    s = np.asarray(scores, dtype=float).ravel()
    v = np.asarray(verdicts, dtype=bool).ravel()
    if s.size == 0 or s.size != v.size:
        raise DomainError("need one verdict per score")
    u = np.unique(s)
    # every distinct split of the sorted scores, plus 'nothing is valid'
    cands = np.r_[u, np.nextafter(u[-1], np.inf)]
    agree = np.array([np.mean((s >= t) == v) for t in cands])
    best = int(np.argmax(agree))
    # the reversed rule's splits are the complements of the forward ones
    return ThresholdReport(float(cands[best]), float(agree[best]),
                           float(np.mean((s >= GQS_THRESHOLD) == v)), int(s.size), int(v.sum()),
                           float(np.max(1.0 - agree)))
