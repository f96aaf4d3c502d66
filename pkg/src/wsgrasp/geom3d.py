"""Points, rigid transforms, triangle meshes and point clouds.

Units are meters throughout. All containers are treated as immutable values.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import TextIO

import numpy as np
from scipy.spatial import cKDTree

from .errors import FormatError, StructuralError, DomainError

__all__ = [
    "RigidTransform",
    "TriangleMesh",
    "PointCloud",
    "parse_obj",
    "load_obj",
    "serialize_obj",
    "sample_surface",
    "transform_points",
    "nearest_neighbor",
    "rotation_about",
    "random_rotation",
    "save_cloud_csv",
    "load_cloud_csv",
]


def rotation_about(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for a rotation of `angle` about `axis`."""
    x, y, z = (float(v) for v in axis)
    n = math.sqrt(x * x + y * y + z * z)
    x, y, z = x / n, y / n, z / n
    c, s = math.cos(angle), math.sin(angle)
    C = 1.0 - c
    # I + s K + C K^2 written out; scalar math is much cheaper than 3x3 numpy ops here
    return np.array([[c + x * x * C, x * y * C - z * s, x * z * C + y * s],
                     [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
                     [z * x * C - y * s, z * y * C + x * s, c + z * z * C]])


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    # uniform on SO(3) via a random unit quaternion
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise DomainError("rigid transform has non-finite entries")
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9 or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise DomainError("rotation is not orthonormal with det +1")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def _trusted(cls, r: np.ndarray, t: np.ndarray) -> "RigidTransform":
        # products and inverses of valid transforms skip re-validation
        obj = object.__new__(cls)
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(obj, "rotation", r)
        object.__setattr__(obj, "translation", t)
        return obj

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_translation(cls, t) -> "RigidTransform":
        return cls(np.eye(3), t)

    @classmethod
    def from_xyz_rpy(cls, xyz, rpy) -> "RigidTransform":
        roll, pitch, yaw = rpy
        r = rotation_about((0, 0, 1), yaw) @ rotation_about((0, 1, 0), pitch) @ rotation_about((1, 0, 0), roll)
        return cls(r, xyz)

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T.copy()
        return RigidTransform._trusted(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self * other: apply `other` first."""
        return RigidTransform._trusted(self.rotation @ other.rotation,
                                       self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def apply(self, pts) -> np.ndarray:
        p = np.asarray(pts, dtype=float)
        return p @ self.rotation.T + self.translation

    def apply_vectors(self, v) -> np.ndarray:
        return np.asarray(v, dtype=float) @ self.rotation.T


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float).reshape(-1, 3)
        f = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise StructuralError("mesh has non-finite vertex coordinates")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise StructuralError("face index out of range")
        v.flags.writeable = False
        f.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        t = self.triangles
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    def face_normals(self) -> np.ndarray:
        t = self.triangles
        n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def volume(self) -> float:
        """Signed volume by the divergence theorem (positive for outward winding)."""
        t = self.triangles
        return float(np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() / 6.0)

    def without_degenerate(self, tol: float = 0.0) -> "TriangleMesh":
        keep = self.face_areas() > tol
        return TriangleMesh(self.vertices, self.faces[keep])


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        p = np.array(self.points, dtype=float).reshape(-1, 3)
        if len(p) < 1:
            raise StructuralError("point cloud must contain at least one point")
        if not np.all(np.isfinite(p)):
            raise DomainError("point cloud has non-finite coordinates")
        p.flags.writeable = False
        object.__setattr__(self, "points", p)
        if self.normals is not None:
            n = np.array(self.normals, dtype=float).reshape(-1, 3)
            if n.shape != p.shape:
                raise StructuralError("normals shape does not match points")
            if np.max(np.abs(np.linalg.norm(n, axis=1) - 1.0)) > 1e-6:
                raise DomainError("normals must be unit length")
            n.flags.writeable = False
            object.__setattr__(self, "normals", n)

    def __len__(self) -> int:
        return len(self.points)

    @cached_property
    def tree(self) -> cKDTree:
        return cKDTree(self.points)

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def take(self, idx) -> "PointCloud":
        idx = np.asarray(idx)
        return PointCloud(self.points[idx], None if self.normals is None else self.normals[idx])


# ---------------------------------------------------------------- OBJ

def parse_obj(text: str | TextIO) -> TriangleMesh:
    """Parse the `v`/`f` subset of Wavefront OBJ.

    Polygons are fan-triangulated, face tokens of the form ``i/j/k`` use the
    vertex index only, and negative indices count back from the last vertex.
    Every other record type is ignored.
    """
    stream = io.StringIO(text) if isinstance(text, str) else text
    verts: list[tuple[float, float, float]] = []
    faces: list[tuple[int, int, int]] = []
    for lineno, raw in enumerate(stream, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if tok[0] == "v":
            if len(tok) < 4:
                raise FormatError(f"line {lineno}: vertex record needs 3 coordinates")
            try:
                xyz = tuple(float(t) for t in tok[1:4])
            except ValueError:
                raise FormatError(f"line {lineno}: bad vertex coordinate") from None
            verts.append(xyz)
        elif tok[0] == "f":
            if len(tok) < 4:
                raise FormatError(f"line {lineno}: face needs at least 3 vertices")
            idx = []
            for t in tok[1:]:
                try:
                    i = int(t.split("/", 1)[0])
                except ValueError:
                    raise FormatError(f"line {lineno}: bad face index {t!r}") from None
                if i == 0:
                    raise FormatError(f"line {lineno}: face index 0 is invalid")
                i = i - 1 if i > 0 else len(verts) + i
                if i < 0 or i >= len(verts):
                    raise StructuralError(f"line {lineno}: face index {t} out of range")
                idx.append(i)
            for k in range(1, len(idx) - 1):
                faces.append((idx[0], idx[k], idx[k + 1]))
    if not verts:
        raise StructuralError("OBJ contains no vertices")
    mesh = TriangleMesh(np.array(verts), np.array(faces, dtype=np.int64).reshape(-1, 3))
    return mesh.without_degenerate()


def load_obj(path) -> TriangleMesh:
    with open(path) as fh:
        return parse_obj(fh)


def serialize_obj(mesh: TriangleMesh) -> str:
    out = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    out += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------- sampling

def sample_surface(mesh: TriangleMesh, m: int, seed: int, return_faces: bool = False):
    """Area-weighted barycentric sampling of `m` surface points."""
    if m < 1:
        raise DomainError("m must be >= 1")
    areas = mesh.face_areas()
    if len(mesh.faces) == 0 or areas.sum() <= 0:
        raise StructuralError("mesh has no faces with positive area")
    rng = np.random.default_rng(seed)
    face = rng.choice(len(areas), size=m, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(m))
    r2 = rng.random(m)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    tri = mesh.triangles[face]
    pts = np.einsum("ij,ijk->ik", bary, tri)
    cloud = PointCloud(pts, mesh.face_normals()[face])
    if return_faces:
        return cloud, face, bary
    return cloud


def transform_points(T: RigidTransform, pts: PointCloud) -> PointCloud:
    normals = None if pts.normals is None else T.apply_vectors(pts.normals)
    return PointCloud(T.apply(pts.points), normals)


def nearest_neighbor(query, cloud: PointCloud) -> tuple[int, float]:
    """Exact nearest point of `cloud` to `query`; ties go to the lowest index."""
    if cloud is None or len(cloud) == 0:
        raise StructuralError("empty cloud")
    q = np.asarray(query, dtype=float).reshape(3)
    _, i = cloud.tree.query(q)
    best = float(np.sum((cloud.points[i] - q) ** 2))
    # the tree can miss equal-distance points with a lower index
    cand = cloud.tree.query_ball_point(q, np.sqrt(best) * (1 + 1e-9) + 1e-300)
    cand = np.sort(np.asarray(cand, dtype=np.int64))
    d2 = np.sum((cloud.points[cand] - q) ** 2, axis=1)
    j = int(np.argmin(d2))
    return int(cand[j]), float(d2[j])


# ---------------------------------------------------------------- CSV

def save_cloud_csv(cloud: PointCloud, path) -> None:
    cols = cloud.points if cloud.normals is None else np.hstack([cloud.points, cloud.normals])
    header = "x,y,z" if cloud.normals is None else "x,y,z,nx,ny,nz"
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in cols:
            fh.write(",".join(f"{v:.9g}" for v in row) + "\n")


def load_cloud_csv(path) -> PointCloud:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header not in (["x", "y", "z"], ["x", "y", "z", "nx", "ny", "nz"]):
            raise FormatError(f"{path}: unexpected CSV header {header}")
        try:
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from None
    if data.shape[1] != len(header):
        raise FormatError(f"{path}: row width does not match header")
    normals = None
    if len(header) == 6:
        n = data[:, 3:]
        # 9 significant digits are not exactly unit length
        normals = n / np.linalg.norm(n, axis=1, keepdims=True)
    return PointCloud(data[:, :3], normals)

