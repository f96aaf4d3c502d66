"""Watertight triangulated primitives used as synthetic objects."""
from __future__ import annotations

import numpy as np

from .errors import DomainError
from .geom3d import TriangleMesh

__all__ = ["make_primitive", "box", "sphere", "cylinder", "PRIMITIVE_KINDS"]

PRIMITIVE_KINDS = ("box", "cylinder", "sphere")


def box(sx: float, sy: float, sz: float) -> TriangleMesh:
    v = np.array([[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)]) * [sx, sy, sz]
    # outward winding, two triangles per face
    f = [
        (0, 1, 3), (0, 3, 2),  # -x
        (4, 6, 7), (4, 7, 5),  # +x
        (0, 4, 5), (0, 5, 1),  # -y
        (2, 3, 7), (2, 7, 6),  # +y
        (0, 2, 6), (0, 6, 4),  # -z
        (1, 5, 7), (1, 7, 3),  # +z
    ]
    return TriangleMesh(v, np.array(f))


def sphere(radius: float, subdivisions: int = 3) -> TriangleMesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
         (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    verts = [np.array(p, dtype=float) / np.linalg.norm(p) for p in v]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(a: int, b: int) -> int:
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return TriangleMesh(np.array(verts) * radius, np.array(faces))


def cylinder(radius: float, height: float, segments: int = 48) -> TriangleMesh:
    ang = 2 * np.pi * np.arange(segments) / segments
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    lo = np.c_[ring, np.full(segments, -height / 2)]
    hi = np.c_[ring, np.full(segments, height / 2)]
    verts = np.vstack([lo, hi, [[0, 0, -height / 2], [0, 0, height / 2]]])
    c_lo, c_hi = 2 * segments, 2 * segments + 1
    faces = []
    for i in range(segments):
        j = (i + 1) % segments
        faces += [(i, j, segments + j), (i, segments + j, segments + i)]
        faces.append((c_lo, j, i))
        faces.append((c_hi, segments + i, segments + j))
    return TriangleMesh(verts, np.array(faces))


def make_primitive(kind: str, dims, seed: int = 0) -> TriangleMesh:
    """box: (sx, sy, sz); cylinder: (radius, height); sphere: (radius,) or (radius, subdivisions)."""
    dims = [float(d) for d in np.atleast_1d(dims)]
    if kind == "box":
        if len(dims) != 3:
            raise DomainError("box needs 3 dimensions")
    elif kind == "cylinder":
        if len(dims) != 2:
            raise DomainError("cylinder needs radius and height")
    elif kind == "sphere":
        if len(dims) not in (1, 2):
            raise DomainError("sphere needs a radius")
    else:
        raise DomainError(f"unknown primitive {kind!r}")
    if kind == "sphere":
        if dims[0] <= 0:
            raise DomainError("primitive dimensions must be positive")
        return sphere(dims[0], int(dims[1]) if len(dims) > 1 else 3)
    if min(dims) <= 0:
        raise DomainError("primitive dimensions must be positive")
    return box(*dims) if kind == "box" else cylinder(*dims)
