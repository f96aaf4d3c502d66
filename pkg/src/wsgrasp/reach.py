"""Contact-plane frames and workspace reachability of contact sets.

A contact set is expressed in an approach frame whose z axis points into the
object, perpendicular to the plane of the contacts, with the contacts at
z = 0. A workspace row matches when, after shifting it along z by its mean
fingertip height, some finger-to-contact assignment and some rotation about z
brings every fingertip within `tol` of its contact. The matched mean height is
the approach distance d.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geom3d import RigidTransform, rotation_about
from .workspace import WorkspaceMatrix

__all__ = ["approach_frame", "ReachMatch", "Reachability"]


def _orthogonal_to(v: np.ndarray, ref: np.ndarray) -> np.ndarray | None:
    w = ref - np.dot(ref, v) * v
    n = np.linalg.norm(w)
    return w / n if n > 1e-9 else None


def approach_frame(contacts: np.ndarray, object_center: np.ndarray) -> RigidTransform:
    """World pose of the contact-plane frame (origin at the contact centroid).

    z is the plane normal oriented toward the object center (top-down when the
    plane passes through the center); x points at the first contact.
    """
    contacts = np.asarray(contacts, dtype=float)
    centroid = contacts.mean(axis=0)
    to_center = np.asarray(object_center, dtype=float) - centroid
    down = np.array([0.0, 0.0, -1.0])
    if len(contacts) >= 3:
        n = np.cross(contacts[1] - contacts[0], contacts[2] - contacts[0])
        if np.linalg.norm(n) < 1e-12:
            # collinear contacts: fall back to the two-contact rule
            return approach_frame(contacts[[0, int(np.argmax(np.linalg.norm(contacts - contacts[0], axis=1)))]],
                                  object_center)
        n /= np.linalg.norm(n)
        ref = to_center if abs(np.dot(n, to_center)) > 1e-6 else down
        if np.dot(n, ref) < 0:
            n = -n
        if abs(np.dot(n, ref)) < 1e-12:
            alt = np.array([1.0, 0.0, 0.0])
            n = n if np.dot(n, alt) >= 0 else -n
    else:
        line = contacts[1] - contacts[0]
        line /= np.linalg.norm(line)
        n = None
        for ref in (to_center, down, np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])):
            if np.linalg.norm(ref) > 1e-9:
                n = _orthogonal_to(line, ref / np.linalg.norm(ref))
                if n is not None:
                    break
    x = _orthogonal_to(n, contacts[0] - centroid)
    if x is None:
        x = _orthogonal_to(n, np.array([1.0, 0.0, 0.0]))
        if x is None:
            x = _orthogonal_to(n, np.array([0.0, 1.0, 0.0]))
    y = np.cross(n, x)
    return RigidTransform(np.column_stack([x, y, n]), centroid)


@dataclass(frozen=True)
class ReachMatch:
    ok: bool
    error: float           # max per-finger distance of the best match (m)
    row: int
    perm: tuple[int, ...]  # perm[i] = contact index served by finger i
    roll: float            # rotation about z applied to the contacts
    depth: float           # approach distance d (mean fingertip height of the row)

    def ee_pose(self, plane: RigidTransform) -> RigidTransform:
        """World pose of the gripper base frame for this match."""
        # gripper frame = plane frame rotated by -roll and backed off by depth along z
        r = plane.rotation @ rotation_about((0, 0, 1), -self.roll)
        return RigidTransform(r, plane.translation - self.depth * plane.rotation[:, 2])


class Reachability:
    def __init__(self, workspace: WorkspaceMatrix, tol: float = 0.01, n_roll: int = 72, k: int = 8):
        self.ws = workspace
        self.tol = tol
        self.N = workspace.N
        S = workspace.S.reshape(workspace.L, self.N, 3)
        self.depths = S[:, :, 2].mean(axis=1)
        centered = S.copy()
        centered[:, :, 2] -= self.depths[:, None]
        self.rows = centered.reshape(workspace.L, -1)
        self.tree = cKDTree(self.rows)
        self.k = min(k, workspace.L)
        self.rolls = np.linspace(0.0, 2 * math.pi, n_roll, endpoint=False)
        self.perms = list(itertools.permutations(range(self.N)))
        self._rot = np.stack([rotation_about((0, 0, 1), r) for r in self.rolls])
        # sorted pairwise fingertip distances per row, for cheap pre-screening
        self.pair_tree = cKDTree(_pair_dists(S))

    def prescreen(self, contact_sets: np.ndarray) -> np.ndarray:
        """Necessary condition on many candidate sets at once (M x N x 3 -> bool)."""
        d = _pair_dists(contact_sets)
        dist, _ = self.pair_tree.query(d, k=1)
        return dist <= 2.0 * self.tol * math.sqrt(d.shape[1])

    def match(self, local_contacts: np.ndarray) -> ReachMatch:
        """Best match of contacts given in the approach frame (z ~ 0)."""
        c = np.asarray(local_contacts, dtype=float)
        # queries: rotations x permutations
        rot_c = np.einsum("rij,nj->rni", self._rot, c)               # R x N x 3
        queries = np.stack([rot_c[:, list(p), :] for p in self.perms], axis=1)  # R x P x N x 3
        flat = queries.reshape(-1, self.N * 3)
        dist, idx = self.tree.query(flat, k=self.k)
        if self.k == 1:
            dist, idx = dist[:, None], idx[:, None]
        cand_rows = self.rows[idx]                                   # Q x k x 3N
        diff = (cand_rows - flat[:, None, :]).reshape(len(flat), self.k, self.N, 3)
        per_finger = np.sqrt(np.sum(diff ** 2, axis=-1)).max(axis=-1)  # Q x k
        best = np.unravel_index(np.argmin(per_finger), per_finger.shape)
        err = float(per_finger[best])
        q_i, k_i = best
        r_i, p_i = divmod(q_i, len(self.perms))
        row = int(idx[q_i, k_i])
        # queries place finger i at contact perm[i]
        return ReachMatch(err <= self.tol, err, row, tuple(self.perms[p_i]),
                          float(self.rolls[r_i]), float(self.depths[row]))


def _pair_dists(S: np.ndarray) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    n = S.shape[1]
    cols = [np.linalg.norm(S[:, i] - S[:, j], axis=-1) for i, j in itertools.combinations(range(n), 2)]
    return np.sort(np.stack(cols, axis=1), axis=1)
