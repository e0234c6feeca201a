"""Charts, the sphere-initialised atlas and its communication graph."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geometry import TriMesh, fibonacci_sphere, orthonormal_frame
from .tactile import SensorPose

VISION_VERTS, VISION_FACES = 19, 24
TOUCH_GRID = 9
TOUCH_VERTS, TOUCH_FACES = TOUCH_GRID ** 2, 2 * (TOUCH_GRID - 1) ** 2
MAX_PARTNERS = 8


@dataclass(frozen=True)
class Chart:
    kind: str
    vertices: np.ndarray
    faces: np.ndarray
    boundary: np.ndarray
    center_ref: int | None = None
    success: bool | None = None
    pose: SensorPose | None = field(default=None, compare=False)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def with_vertices(self, vertices) -> "Chart":
        v = np.asarray(vertices, dtype=np.float64).reshape(self.vertices.shape)
        return replace(self, vertices=v)

    def area(self) -> float:
        t = self.vertices[self.faces]
        return float(0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1).sum())


def boundary_vertices(faces: np.ndarray) -> np.ndarray:
    """Vertices incident to an edge used by exactly one face."""
    e = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    return np.unique(uniq[counts == 1])


def mesh_edges(faces: np.ndarray) -> np.ndarray:
    e = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)
    return np.unique(e, axis=0)


@lru_cache(maxsize=None)
def _hex_patch():
    """Planar hexagon of 19 lattice points (centre, 6 + 12 rings) with unit
    circumradius, and its 24 triangles."""
    a = [np.array([np.cos(k * np.pi / 3), np.sin(k * np.pi / 3)]) for k in range(6)]
    pts = [np.zeros(2)] + a
    ring2 = []
    for k in range(6):
        ring2 += [2 * a[k], a[k] + a[(k + 1) % 6]]
    pts += ring2
    faces = []
    for k in range(6):
        r1, r1n = 1 + k, 1 + (k + 1) % 6
        corner, midpoint, corner_n = 7 + 2 * k, 8 + 2 * k, 7 + (2 * k + 2) % 12
        faces.append((0, r1, r1n))
        faces += [(r1, corner, midpoint), (r1, midpoint, r1n), (r1n, midpoint, corner_n)]
    xy = np.array(pts) / 2.0
    return np.column_stack([xy, np.zeros(len(xy))]), np.array(faces, dtype=np.int64)


def make_vision_chart() -> Chart:
    v, f = _hex_patch()
    return Chart("vision", v.copy(), f.copy(), boundary_vertices(f))


@lru_cache(maxsize=None)
def _grid_faces(n: int) -> np.ndarray:
    faces = []
    for i in range(n - 1):
        for j in range(n - 1):
            a, b, c, d = i * n + j, i * n + j + 1, (i + 1) * n + j, (i + 1) * n + j + 1
            faces += [(a, c, d), (a, d, b)]
    return np.array(faces, dtype=np.int64)


def make_touch_chart(pose: SensorPose) -> Chart:
    """9 x 9 vertex sheet covering the sensor square in the pose plane."""
    n = TOUCH_GRID
    s = (np.arange(n) / (n - 1) - 0.5) * pose.width
    x, y = np.meshgrid(s, s, indexing="ij")
    v = pose.center + x.reshape(-1, 1) * pose.tangent_u + y.reshape(-1, 1) * pose.tangent_v
    f = _grid_faces(n)
    return Chart("touch", v, f.copy(), boundary_vertices(f), center_ref=(n * n) // 2,
                 success=True, pose=pose)


def init_unsuccessful_touch_chart(pose: SensorPose) -> Chart:
    """Fingertip chart: every vertex collapsed onto the sensor centre."""
    c = make_touch_chart(pose)
    return replace(c, vertices=np.tile(pose.center, (c.n_vertices, 1)), success=False)


# ------------------------------------------------------------------ atlas

@dataclass(frozen=True)
class Atlas:
    charts: tuple
    comm_edges: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "charts", tuple(self.charts))

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum([c.n_vertices for c in self.charts])])

    @property
    def n_vertices(self) -> int:
        return int(self.offsets[-1])

    @property
    def vision_charts(self) -> list[int]:
        return [i for i, c in enumerate(self.charts) if c.kind == "vision"]

    @property
    def touch_charts(self) -> list[int]:
        return [i for i, c in enumerate(self.charts) if c.kind == "touch"]

    def positions(self) -> np.ndarray:
        return np.concatenate([c.vertices for c in self.charts]) if self.charts else np.zeros((0, 3))

    def faces(self) -> np.ndarray:
        off = self.offsets
        return np.concatenate([c.faces + off[i] for i, c in enumerate(self.charts)])

    def chart_index(self) -> np.ndarray:
        """Chart id of every global vertex."""
        return np.repeat(np.arange(len(self.charts)), [c.n_vertices for c in self.charts])

    def face_chart_index(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.charts)), [len(c.faces) for c in self.charts])

    def success_mask(self) -> np.ndarray:
        """True for vertices of successful touch charts (the enforced ones)."""
        return np.concatenate([np.full(c.n_vertices, c.kind == "touch" and bool(c.success))
                               for c in self.charts])

    def vision_boundary_ids(self) -> np.ndarray:
        off = self.offsets
        ids = [c.boundary + off[i] for i, c in enumerate(self.charts) if c.kind == "vision"]
        return np.concatenate(ids) if ids else np.zeros(0, dtype=np.int64)

    def touch_center_ids(self) -> np.ndarray:
        off = self.offsets
        return np.array([off[i] + c.center_ref for i, c in enumerate(self.charts) if c.kind == "touch"],
                        dtype=np.int64)

    def with_positions(self, positions) -> "Atlas":
        p = np.asarray(positions, dtype=np.float64).reshape(self.n_vertices, 3)
        off = self.offsets
        charts = [c.with_vertices(p[off[i]:off[i + 1]]) for i, c in enumerate(self.charts)]
        return Atlas(charts, self.comm_edges)


def _segments_hit_triangles(p, q, tri) -> np.ndarray:
    """Does segment p->q cross triangle ``tri`` (all batched, shape (N, 3))?"""
    d = q - p
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    h = np.cross(d, e2)
    det = np.sum(e1 * h, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / det
        s = p - tri[:, 0]
        u = np.sum(s * h, axis=1) * inv
        qv = np.cross(s, e1)
        v = np.sum(d * qv, axis=1) * inv
        t = np.sum(e2 * qv, axis=1) * inv
        return (np.abs(det) > 1e-15) & (u >= 0) & (v >= 0) & (u + v <= 1) & (t >= 0) & (t <= 1)


def triangles_intersect(t1: np.ndarray, t2: np.ndarray) -> np.ndarray:
    """Pairwise test for batches of non-coplanar triangles (N, 3, 3)."""
    hit = np.zeros(len(t1), dtype=bool)
    for a, b in ((0, 1), (1, 2), (2, 0)):
        hit |= _segments_hit_triangles(t1[:, a], t1[:, b], t2)
        hit |= _segments_hit_triangles(t2[:, a], t2[:, b], t1)
    return hit


def _place_vision_charts(directions: np.ndarray, scale: float, radius: float) -> list[Chart]:
    base = make_vision_chart()
    charts = []
    for d in directions:
        u, v = orthonormal_frame(d)
        verts = radius * d + scale * (base.vertices[:, :1] * u + base.vertices[:, 1:2] * v)
        charts.append(replace(base, vertices=verts))
    return charts


def _any_overlap(charts: list[Chart], pairs: np.ndarray) -> bool:
    tris = np.stack([c.vertices[c.faces] for c in charts])       # (C, 24, 3, 3)
    nf = tris.shape[1]
    ii, jj = np.meshgrid(np.arange(nf), np.arange(nf), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    for a, b in pairs:
        if triangles_intersect(tris[a][ii], tris[b][jj]).any():
            return True
    return False


@lru_cache(maxsize=None)
def no_overlap_scale(n_vision: int, radius: float = 1.0, iters: int = 30) -> float:
    """Largest chart circumradius (by bisection) at which no two tangent
    vision charts intersect."""
    dirs = fibonacci_sphere(n_vision)
    ang = np.arccos(np.clip(dirs @ dirs.T, -1, 1))
    np.fill_diagonal(ang, np.inf)

    def overlaps(scale):
        # tangent planes at angle t meet radius*tan(t/2) away from each
        # tangent point, so farther pairs cannot touch at this scale
        pairs = np.argwhere(np.triu(radius * np.tan(np.minimum(ang, 3.0) / 2) <= scale, 1))
        return _any_overlap(_place_vision_charts(dirs, scale, radius), pairs)

    lo, hi = 0.0, radius * np.tan(ang.min() / 2)
    while not overlaps(hi):
        lo, hi = hi, 1.5 * hi
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if overlaps(mid):
            hi = mid
        else:
            lo = mid
    return lo


def build_sphere_atlas(n_vision: int = 95, touch_charts=(), radius: float = 1.0,
                       shrink: float = 0.99) -> Atlas:
    """Vision charts tangent to a sphere at Fibonacci directions, scaled to
    ``shrink`` times the overlap bound, followed by the given touch charts.
    The communication graph is left unbuilt."""
    if n_vision < 4:
        raise ValueError("need at least 4 vision charts")
    scale = shrink * no_overlap_scale(n_vision, radius)
    charts = _place_vision_charts(fibonacci_sphere(n_vision), scale, radius)
    return Atlas(list(charts) + list(touch_charts))


def default_pairing_tol(atlas: Atlas, factor: float = 0.35) -> float:
    """``factor`` times the mean nearest-neighbour distance between vision
    chart centres."""
    centers = np.array([atlas.charts[i].vertices[0] for i in atlas.vision_charts])
    d, _ = cKDTree(centers).query(centers, k=2)
    return factor * float(d[:, 1].mean())


def build_comm_graph(atlas: Atlas, pairing_tol: float | None = None, vision_links: bool = True,
                     touch_links: bool = True) -> Atlas:
    """Attach the communication edges.

    Within-chart mesh edges are always present. ``vision_links`` pairs
    boundary vertices of different vision charts lying within
    ``pairing_tol``; ``touch_links`` joins each touch chart's reference
    vertex to every vision boundary vertex.
    """
    if pairing_tol is None:
        pairing_tol = default_pairing_tol(atlas)
    if pairing_tol <= 0:
        raise ValueError("pairing tolerance must be positive")
    off = atlas.offsets
    edges = [mesh_edges(c.faces) + off[i] for i, c in enumerate(atlas.charts)]
    vb = atlas.vision_boundary_ids()
    if vision_links and len(vb):
        pos = atlas.positions()[vb]
        owner = atlas.chart_index()[vb]
        pairs = cKDTree(pos).query_pairs(pairing_tol, output_type="ndarray")
        pairs = pairs[owner[pairs[:, 0]] != owner[pairs[:, 1]]]
        partners = np.bincount(pairs.ravel(), minlength=len(vb))
        if len(partners) and partners.max() > MAX_PARTNERS:
            raise ValueError(f"pairing tolerance too large: a boundary vertex has "
                             f"{partners.max()} partners (max {MAX_PARTNERS})")
        edges.append(vb[pairs])
    if touch_links and len(vb):
        for c in atlas.touch_center_ids():
            edges.append(np.column_stack([np.full(len(vb), c), vb]))
    e = np.sort(np.concatenate(edges), axis=1) if edges else np.zeros((0, 2), dtype=np.int64)
    e = np.unique(e[e[:, 0] != e[:, 1]], axis=0)
    return Atlas(atlas.charts, e)


def enforce_touch_positions(atlas: Atlas, fitted_touch_charts) -> Atlas:
    """Overwrite the vertices of successful touch charts, in atlas order, with
    the fitted ones. Unsuccessful touch charts are left as they are."""
    targets = [i for i in atlas.touch_charts if atlas.charts[i].success]
    fitted = list(fitted_touch_charts)
    if len(fitted) != len(targets):
        raise ValueError(f"expected {len(targets)} fitted charts, got {len(fitted)}")
    charts = list(atlas.charts)
    for i, f in zip(targets, fitted):
        verts = f.vertices if isinstance(f, Chart) else f
        charts[i] = charts[i].with_vertices(np.array(verts, dtype=np.float64))
    return Atlas(charts, atlas.comm_edges)


def atlas_to_mesh(atlas: Atlas) -> TriMesh:
    return TriMesh(atlas.positions(), atlas.faces(), strict=False)


def save_atlas(directory, atlas: Atlas) -> None:
    """``atlas.json`` with chart metadata and edges, plus one little-endian
    float64 vertex file per chart."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = []
    for i, c in enumerate(atlas.charts):
        name = f"chart_{i:04d}.f64"
        (directory / name).write_bytes(np.ascontiguousarray(c.vertices, dtype="<f8").tobytes())
        meta.append({"kind": c.kind, "vertices": name, "n_vertices": c.n_vertices,
                     "faces": c.faces.tolist(), "boundary": c.boundary.tolist(),
                     "center_ref": c.center_ref, "success": c.success,
                     "pose": c.pose.to_dict() if c.pose is not None else None})
    doc = {"charts": meta,
           "comm_edges": None if atlas.comm_edges is None else atlas.comm_edges.tolist()}
    (directory / "atlas.json").write_text(json.dumps(doc))


def load_atlas(directory) -> Atlas:
    directory = Path(directory)
    doc = json.loads((directory / "atlas.json").read_text())
    charts = []
    for m in doc["charts"]:
        v = np.frombuffer((directory / m["vertices"]).read_bytes(), dtype="<f8").reshape(-1, 3).copy()
        pose = SensorPose.from_dict(m["pose"]) if m["pose"] else None
        charts.append(Chart(m["kind"], v, np.array(m["faces"], dtype=np.int64),
                            np.array(m["boundary"], dtype=np.int64), m["center_ref"], m["success"], pose))
    edges = None if doc["comm_edges"] is None else np.array(doc["comm_edges"], dtype=np.int64).reshape(-1, 2)
    return Atlas(charts, edges)
