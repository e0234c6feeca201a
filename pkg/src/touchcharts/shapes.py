"""Procedural object classes: closed, outward-oriented triangle meshes."""
from __future__ import annotations

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import TriMesh, icosphere

SHAPE_CLASSES = ("sphere", "box", "pyramid", "cylinder", "blend")


def _grid_square(n: int):
    """(n+1)^2 points on [-1, 1]^2 and the 2 n^2 triangles of the grid."""
    s = np.linspace(-1.0, 1.0, n + 1)
    u, v = np.meshgrid(s, s, indexing="ij")
    faces = []
    for i in range(n):
        for j in range(n):
            a, b, c, d = i * (n + 1) + j, i * (n + 1) + j + 1, (i + 1) * (n + 1) + j, (i + 1) * (n + 1) + j + 1
            faces += [(a, c, d), (a, d, b)]
    return np.column_stack([u.ravel(), v.ravel()]), np.array(faces, dtype=np.int64)


def _weld(vertices: np.ndarray, faces: np.ndarray, tol: float = 1e-9) -> TriMesh:
    key = np.round(vertices / tol).astype(np.int64)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    return TriMesh(vertices[first], inverse.reshape(-1)[faces])


def _orient_outward(mesh: TriMesh) -> TriMesh:
    """Flip faces whose normal points toward the centroid (convex shapes)."""
    c = mesh.vertices.mean(axis=0)
    tri = mesh.triangles()
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    flip = np.einsum("ij,ij->i", n, tri.mean(axis=1) - c) < 0
    faces = mesh.faces.copy()
    faces[flip] = faces[flip][:, ::-1]
    return TriMesh(mesh.vertices, faces)


def box_mesh(n: int = 4) -> TriMesh:
    """Cube [-1, 1]^3 with an n x n grid on every side."""
    uv, f = _grid_square(n)
    verts, faces = [], []
    for axis in range(3):
        for sign in (-1.0, 1.0):
            p = np.insert(uv, axis, sign, axis=1)
            faces.append(f + sum(len(v) for v in verts))
            verts.append(p)
    return _orient_outward(_weld(np.concatenate(verts), np.concatenate(faces)))


def pyramid_mesh() -> TriMesh:
    """Square pyramid with base z=-1 and apex (0, 0, 1)."""
    v = np.array([[-1, -1, -1], [1, -1, -1], [1, 1, -1], [-1, 1, -1], [0, 0, 1]], dtype=np.float64)
    f = np.array([[0, 2, 1], [0, 3, 2], [0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]])
    return _orient_outward(TriMesh(v, f))


def cylinder_mesh(segments: int = 32) -> TriMesh:
    """Capped cylinder of radius 1 between z=-1 and z=1."""
    t = 2 * np.pi * np.arange(segments) / segments
    ring = np.column_stack([np.cos(t), np.sin(t)])
    v = np.concatenate([np.column_stack([ring, -np.ones(segments)]),
                        np.column_stack([ring, np.ones(segments)]),
                        [[0.0, 0.0, -1.0], [0.0, 0.0, 1.0]]])
    bot, top = 2 * segments, 2 * segments + 1
    faces = []
    for i in range(segments):
        j = (i + 1) % segments
        faces += [(i, j, segments + j), (i, segments + j, segments + i),
                  (bot, j, i), (top, segments + i, segments + j)]
    return _orient_outward(TriMesh(v, np.array(faces)))


def blend_mesh(power: float = 4.0, level: int = 3) -> TriMesh:
    """Rounded cube: icosphere directions scaled to the unit p-norm ball."""
    s = icosphere(level)
    d = s.vertices
    scale = (np.abs(d) ** power).sum(axis=1) ** (-1.0 / power)
    return TriMesh(d * scale[:, None], s.faces)


def base_mesh(kind: str) -> TriMesh:
    if kind == "sphere":
        return icosphere(3)
    if kind == "box":
        return box_mesh()
    if kind == "pyramid":
        return pyramid_mesh()
    if kind == "cylinder":
        return cylinder_mesh()
    if kind == "blend":
        return blend_mesh()
    raise ValueError(f"unknown shape class {kind!r}")


def normalize_to_unit_box(mesh: TriMesh) -> TriMesh:
    """Centre the bounding box at the origin and scale its longest side to 1."""
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    return TriMesh((mesh.vertices - 0.5 * (lo + hi)) / (hi - lo).max(), mesh.faces)


def random_object(kind: str, rng: np.random.Generator, aspect_range=(0.55, 1.0),
                  scale_range=(0.6, 1.0), depth_shift: float = 0.0, view_dir=None) -> tuple[TriMesh, dict]:
    """A randomly stretched, rotated and scaled instance of ``kind``.

    The shape is normalised to a unit bounding box, shrunk by a factor from
    ``scale_range`` and shifted along ``view_dir`` by up to ``depth_shift``.
    Returns the mesh and the sampled parameters.
    """
    m = base_mesh(kind)
    aspect = rng.uniform(*aspect_range, size=3)
    aspect /= aspect.max()
    rot = Rotation.random(random_state=rng).as_matrix()
    m = TriMesh(m.vertices * aspect, m.faces)
    m = normalize_to_unit_box(TriMesh(m.vertices @ rot.T, m.faces))
    scale = rng.uniform(*scale_range)
    shift = rng.uniform(-depth_shift, depth_shift) if depth_shift > 0 else 0.0
    offset = np.zeros(3) if view_dir is None else shift * np.asarray(view_dir, dtype=np.float64)
    m = TriMesh(m.vertices * scale + offset, m.faces)
    params = {"kind": kind, "aspect": aspect.tolist(), "rotation": rot.tolist(),
              "scale": float(scale), "offset": offset.tolist()}
    return m, params
