"""Fingertip workspace matrices and the coupled Chamfer distance.

A workspace matrix has one row per sampled joint configuration; row m holds
the N fingertip positions side by side (L x 3N). The coupled Chamfer distance
compares two such matrices finger slot by finger slot.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DomainError, FormatError, SamplingError, SingularityError
from .grippers import GripperModel, forward_kinematics

__all__ = [
    "WorkspaceMatrix",
    "sample_workspace",
    "coupled_chamfer",
    "coupled_chamfer_grad",
    "save_workspace",
    "load_workspace",
]

MAGIC = b"WSM1"


@dataclass(frozen=True, eq=False)
class WorkspaceMatrix:
    S: np.ndarray
    n_fingers: int
    configs: np.ndarray | None = None

    def __post_init__(self):
        s = np.array(self.S, dtype=float)
        if s.ndim != 2 or s.shape[0] < 1:
            raise DomainError("workspace matrix must be a non-empty 2-D array")
        if s.shape[1] != 3 * self.n_fingers:
            raise DomainError(f"row width {s.shape[1]} != 3 * {self.n_fingers}")
        s.flags.writeable = False
        object.__setattr__(self, "S", s)
        if self.configs is not None:
            c = np.array(self.configs, dtype=float)
            if c.ndim != 2 or c.shape[0] != s.shape[0]:
                raise DomainError("one generating config per row required")
            c.flags.writeable = False
            object.__setattr__(self, "configs", c)

    @property
    def L(self) -> int:
        return self.S.shape[0]

    @property
    def N(self) -> int:
        return self.n_fingers

    def finger(self, i: int) -> np.ndarray:
        return self.S[:, 3 * i:3 * i + 3]

    def points(self) -> np.ndarray:
        """All fingertip positions as an (L*N) x 3 cloud."""
        return self.S.reshape(-1, 3)


def _grid_configs(model: GripperModel, L: int) -> list[np.ndarray]:
    lo, hi = model.lower, model.upper
    A = model.n_actuators
    n = max(1, math.ceil(L ** (1.0 / A) - 1e-9))
    while True:
        axes = [np.linspace(lo[a], hi[a], n) if n > 1 else np.array([(lo[a] + hi[a]) / 2]) for a in range(A)]
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, A)
        valid = [q for q in mesh if not _singular(model, q)]
        if len(valid) >= L:
            pick = np.round(np.linspace(0, len(valid) - 1, L)).astype(int)
            return [valid[i] for i in pick]
        if n > 4 * L:
            raise SamplingError(f"{model.name}: grid has too few assemblable nodes")
        n += 1


def _singular(model: GripperModel, q) -> bool:
    try:
        forward_kinematics(model, q)
    except SingularityError:
        return True
    return False


def sample_workspace(model: GripperModel, L: int, seed: int = 0,
                     strategy: str = "uniform-joint") -> WorkspaceMatrix:
    """Sample L joint configurations within limits and stack their fingertips."""
    if L < 1:
        raise DomainError("L must be >= 1")
    rows, configs = [], []
    if strategy == "grid":
        for q in _grid_configs(model, L):
            rows.append(forward_kinematics(model, q).reshape(-1))
            configs.append(q)
    elif strategy == "uniform-joint":
        rng = np.random.default_rng(seed)
        attempts = 0
        while len(rows) < L:
            if attempts >= 100 * L:
                raise SamplingError(f"{model.name}: only {len(rows)}/{L} valid rows in {attempts} draws")
            attempts += 1
            q = rng.uniform(model.lower, model.upper)
            try:
                tips, sol = forward_kinematics(model, q, return_palm=True)
            except SingularityError:
                continue
            if sol is not None and sol.near_singular:
                continue
            rows.append(tips.reshape(-1))
            configs.append(q)
    else:
        raise DomainError(f"unknown sampling strategy {strategy!r}")
    return WorkspaceMatrix(np.array(rows), model.n_fingers, np.array(configs))


def _as_matrix(S) -> tuple[np.ndarray, int | None]:
    if isinstance(S, WorkspaceMatrix):
        return S.S, S.N
    return np.asarray(S, dtype=float), None


def _slot_terms(P: np.ndarray, Q: np.ndarray):
    """Nearest Q row for every P row: squared distances and indices."""
    _, idx = cKDTree(Q).query(P)
    d2 = np.sum((P - Q[idx]) ** 2, axis=1)
    return d2, idx


def coupled_chamfer(S1, S2, n_fingers: int | None = None) -> float:
    """Sum over finger slots of the symmetric squared Chamfer distance."""
    a, na = _as_matrix(S1)
    b, nb = _as_matrix(S2)
    if na is not None and nb is not None and na != nb:
        raise DomainError(f"finger count mismatch: {na} vs {nb}")
    n = n_fingers or na or nb
    if n is None:
        raise DomainError("finger count unknown for raw arrays")
    if a.shape[1] != 3 * n or b.shape[1] != 3 * n:
        raise DomainError("row width does not match finger count")
    total = 0.0
    for i in range(n):
        P = a[:, 3 * i:3 * i + 3]
        Q = b[:, 3 * i:3 * i + 3]
        total += float(np.sum(_slot_terms(P, Q)[0])) + float(np.sum(_slot_terms(Q, P)[0]))
    return total


def coupled_chamfer_grad(target: np.ndarray, pred: np.ndarray, n_fingers: int) -> tuple[float, np.ndarray]:
    """Loss coupled_chamfer(target, pred) and its gradient with respect to `pred`."""
    target = np.asarray(target, dtype=float)
    pred = np.asarray(pred, dtype=float)
    grad = np.zeros_like(pred)
    total = 0.0
    for i in range(n_fingers):
        sl = slice(3 * i, 3 * i + 3)
        P, Q = target[:, sl], pred[:, sl]
        d_pq, i_pq = _slot_terms(P, Q)
        d_qp, i_qp = _slot_terms(Q, P)
        total += float(np.sum(d_pq)) + float(np.sum(d_qp))
        g = np.zeros_like(Q)
        np.add.at(g, i_pq, 2.0 * (Q[i_pq] - P))
        g += 2.0 * (Q - P[i_qp])
        grad[:, sl] = g
    return total, grad


# ---------------------------------------------------------------- file format
# magic "WSM1" | L u64 | N u64 | L*3N f64 (row-major) | L*A f64 configs, all little-endian

def save_workspace(ws: WorkspaceMatrix, path) -> None:
    configs = ws.configs if ws.configs is not None else np.zeros((ws.L, 0))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<QQ", ws.L, ws.N))
        fh.write(np.ascontiguousarray(ws.S, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(configs, dtype="<f8").tobytes())


def load_workspace(path, expect: GripperModel | None = None) -> WorkspaceMatrix:
    """Read a WSM1 file. The format does not store A, so a header N that
    still leaves a whole number of trailing config columns can only be
    caught against a known gripper (`expect`)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20 or blob[:4] != MAGIC:
        raise FormatError(f"{path}: not a WSM1 workspace file")
    L, N = struct.unpack_from("<QQ", blob, 4)
    if L < 1 or N < 1:
        raise FormatError(f"{path}: header declares L={L}, N={N}")
    body = len(blob) - 20
    s_bytes = L * 3 * N * 8
    if body < s_bytes:
        raise FormatError(f"{path}: truncated ({body} bytes of workspace data, need {s_bytes})")
    rest = body - s_bytes
    if rest % (8 * L):
        raise FormatError(f"{path}: trailing config block is not L x A doubles")
    A = rest // (8 * L)
    if expect is not None and (N != expect.n_fingers or A not in (0, expect.n_actuators)):
        raise FormatError(f"{path}: N={N}, A={A} do not match gripper {expect.name} "
                          f"(N={expect.n_fingers}, A={expect.n_actuators})")
    S = np.frombuffer(blob, dtype="<f8", count=L * 3 * N, offset=20).reshape(L, 3 * N)
    configs = np.frombuffer(blob, dtype="<f8", count=L * A, offset=20 + s_bytes).reshape(L, A)
    return WorkspaceMatrix(S.astype(float), int(N), configs.astype(float) if A else None)
