"""Mesh and point-cloud primitives: sampling, nearest neighbours, Chamfer
distance, exact ray casting and sphere tracing against triangle meshes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

DEGENERATE_AREA = 1e-12


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class TriMesh:
    """Indexed triangle surface.

    With ``strict=True`` (the default) every face must have area above
    ``DEGENERATE_AREA``. Predicted atlases may contain collapsed fingertip
    charts, so they are built with ``strict=False``; index ranges are always
    checked.
    """

    vertices: np.ndarray
    faces: np.ndarray
    strict: bool = field(default=True, compare=False)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise MeshError("face index out of range")
        if self.strict and len(f):
            bad = np.flatnonzero(self.face_areas() <= DEGENERATE_AREA)
            if len(bad):
                raise MeshError(
                    f"{len(bad)} degenerate face(s), first is face {bad[0]} "
                    f"with vertices {f[bad[0]].tolist()}")

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        t = self.triangles()
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    def face_normals(self) -> np.ndarray:
        t = self.triangles()
        n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        length = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(length > 0, length, 1.0)

    def transformed(self, rotation=None, scale=1.0, translation=(0.0, 0.0, 0.0)) -> "TriMesh":
        v = self.vertices * scale
        if rotation is not None:
            v = v @ np.asarray(rotation).T
        return TriMesh(v + np.asarray(translation), self.faces, strict=self.strict)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be a unit vector")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)


def _as_cloud(points, name="cloud") -> np.ndarray:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0:
        raise ValueError(f"empty {name}")
    return p


# ---------------------------------------------------------------- sampling

def sample_barycentric(areas: np.ndarray, n: int, rng: np.random.Generator):
    """Area-proportional face choice plus uniform barycentric weights.

    Returns ``(face_index, weights)`` with weights of shape (n, 3). Shared by
    the plain surface sampler and the differentiable atlas sampler.
    """
    total = areas.sum()
    if total <= 0:
        raise ValueError("surface has zero area")
    face_idx = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    weights = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    return face_idx, weights


def sample_surface(mesh: TriMesh, n: int, seed: int, return_faces: bool = False):
    """Sample ``n`` points uniformly by area from the surface of ``mesh``."""
    if mesh.n_faces == 0:
        raise MeshError("empty mesh")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    face_idx, w = sample_barycentric(mesh.face_areas(), n, rng)
    tri = mesh.triangles()[face_idx]
    pts = np.einsum("nk,nkd->nd", w, tri)
    if return_faces:
        return pts, face_idx
    return pts


# ------------------------------------------------------- nearest neighbours

def nearest(query, cloud) -> tuple[int, float]:
    """Exact nearest neighbour of one point; ties go to the lowest index."""
    c = _as_cloud(cloud)
    d2 = np.sum((c - np.asarray(query, dtype=np.float64)) ** 2, axis=1)
    i = int(np.argmin(d2))
    return i, float(d2[i])


class NearestIndex:
    """KD-tree over a cloud answering exact batched nearest-neighbour queries.

    Ties are resolved toward the lowest index among the ``tie_k`` closest
    candidates returned by the tree.
    """

    def __init__(self, cloud, tie_k: int = 4):
        self.points = _as_cloud(cloud)
        self.tree = cKDTree(self.points)
        self.tie_k = min(tie_k, len(self.points))

    def query(self, queries) -> tuple[np.ndarray, np.ndarray]:
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        k = min(2, self.tie_k)
        dist, idx = self.tree.query(q, k=k)
        if k == 1:
            idx = np.asarray(idx, dtype=np.int64).reshape(-1)
        else:
            # only near-ties need the exact lowest-index resolution
            close = dist[:, 1] <= dist[:, 0] * (1.0 + 1e-9) + 1e-300
            idx = np.asarray(idx[:, 0], dtype=np.int64)
            if close.any():
                idx[close] = self._resolve_ties(q[close])
        d2 = np.sum((self.points[idx] - q) ** 2, axis=1)
        return idx, d2

    def _resolve_ties(self, q: np.ndarray) -> np.ndarray:
        _, cand = self.tree.query(q, k=self.tie_k)
        cand = cand.reshape(len(q), -1)
        # recompute squared distances exactly so equal points compare equal
        d2 = np.sum((self.points[cand] - q[:, None, :]) ** 2, axis=2)
        best = d2.min(axis=1, keepdims=True)
        return np.where(d2 == best, cand, np.iinfo(np.int64).max).min(axis=1)


def scatter_rows(index: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """Row-wise ``out[index[i]] += values[i]`` for (m, d) values."""
    values = np.asarray(values, dtype=np.float64)
    return np.stack([np.bincount(index, weights=values[:, j], minlength=n)
                     for j in range(values.shape[1])], axis=1)


def chamfer(a, b) -> float:
    """Mean-form symmetric Chamfer distance with squared Euclidean terms."""
    a = _as_cloud(a, "cloud a")
    b = _as_cloud(b, "cloud b")
    _, d_ab = NearestIndex(b).query(a)
    _, d_ba = NearestIndex(a).query(b)
    return float(d_ab.mean() + d_ba.mean())


def chamfer_with_grad(a, b) -> tuple[float, np.ndarray]:
    """Chamfer distance and its gradient w.r.t. the points of ``a``.

    Nearest-neighbour assignments are held fixed, which gives the usual
    subgradient where assignments tie.
    """
    a = _as_cloud(a, "cloud a")
    b = _as_cloud(b, "cloud b")
    nn_ab, d_ab = NearestIndex(b).query(a)
    nn_ba, d_ba = NearestIndex(a).query(b)
    grad = 2.0 * (a - b[nn_ab]) / len(a)
    grad += scatter_rows(nn_ba, 2.0 * (a[nn_ba] - b) / len(b), len(a))
    return float(d_ab.mean() + d_ba.mean()), grad


def chamfer_grad(a, b) -> np.ndarray:
    return chamfer_with_grad(a, b)[1]


# ------------------------------------------------------------- ray casting

def ray_triangle_hits(origins, directions, triangles, eps: float = 1e-14) -> np.ndarray:
    """Moller-Trumbore for every (ray, triangle) pair.

    Returns an (R, F) array of hit distances, ``inf`` where the ray misses or
    the hit lies behind the origin.
    """
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)[:, None, :]
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)[:, None, :]
    t0 = triangles[None, :, 0]
    e1 = (triangles[:, 1] - triangles[:, 0])[None]
    e2 = (triangles[:, 2] - triangles[:, 0])[None]
    p = np.cross(d, e2)
    det = np.sum(e1 * p, axis=2)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / det
        s = o - t0
        u = np.sum(s * p, axis=2) * inv
        q = np.cross(s, e1)
        v = np.sum(d * q, axis=2) * inv
        t = np.sum(e2 * q, axis=2) * inv
        ok = (np.abs(det) > eps) & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
    return np.where(ok, t, np.inf)


def raycast_batch(origins, directions, mesh: TriMesh, chunk: int = 2_000_000) -> np.ndarray:
    """Smallest positive hit distance per ray (``inf`` on a miss)."""
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    out = np.full(len(o), np.inf)
    if mesh.n_faces == 0:
        return out
    tris = mesh.triangles()
    step = max(1, chunk // mesh.n_faces)
    for s in range(0, len(o), step):
        out[s:s + step] = ray_triangle_hits(o[s:s + step], d[s:s + step], tris).min(axis=1)
    return out


def raycast_exact(ray: Ray, mesh: TriMesh):
    t = raycast_batch(ray.origin[None], ray.direction[None], mesh)[0]
    return None if np.isinf(t) else float(t)


# -------------------------------------------------- point-triangle distance

def closest_point_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Closest points on triangles (a, b, c) to points p (all broadcastable
    to (..., 3)), by Voronoi-region classification."""
    p, a, b, c = np.broadcast_arrays(p, a, b, c)
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("...i,...i", ab, ap)
    d2 = np.einsum("...i,...i", ac, ap)
    bp = p - b
    d3 = np.einsum("...i,...i", ab, bp)
    d4 = np.einsum("...i,...i", ac, bp)
    cp = p - c
    d5 = np.einsum("...i,...i", ab, cp)
    d6 = np.einsum("...i,...i", ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = 1.0 / (va + vb + vc)
        v_in = vb * denom
        w_in = vc * denom
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
    res = a + ab * v_in[..., None] + ac * w_in[..., None]

    # assign regions in reverse priority so that vertex regions win
    m = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
    res = np.where(m[..., None], b + (c - b) * t_bc[..., None], res)
    m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    res = np.where(m[..., None], a + ac * t_ac[..., None], res)
    m = (d6 >= 0) & (d5 <= d6)
    res = np.where(m[..., None], c, res)
    m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    res = np.where(m[..., None], a + ab * t_ab[..., None], res)
    m = (d3 >= 0) & (d4 <= d3)
    res = np.where(m[..., None], b, res)
    m = (d1 <= 0) & (d2 <= 0)
    res = np.where(m[..., None], a, res)
    return res


def point_mesh_distance(points, mesh: TriMesh, faces: np.ndarray | None = None,
                        chunk: int = 1_000_000) -> np.ndarray:
    """Unsigned Euclidean distance from each point to the mesh surface.

    Brute force over all faces, or over the subset ``faces`` (an empty subset
    yields ``inf``). See :class:`MeshDistance` for the accelerated query.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tris = mesh.triangles() if faces is None else mesh.triangles()[faces]
    out = np.full(len(p), np.inf)
    if len(tris) == 0:
        return out
    step = max(1, chunk // len(tris))
    a, b, c = tris[None, :, 0], tris[None, :, 1], tris[None, :, 2]
    for s in range(0, len(p), step):
        q = p[s:s + step, None, :]
        cp = closest_point_on_triangles(q, a, b, c)
        out[s:s + step] = np.sqrt(np.min(np.sum((cp - q) ** 2, axis=2), axis=1))
    return out


class MeshDistance:
    """Exact unsigned point-to-mesh distance with KD-tree culling.

    The nearest vertex bounds the true distance from above; only faces whose
    centroid lies within that bound plus the largest centroid-to-corner radius
    can beat it, so the result equals the brute-force scan.
    """

    def __init__(self, mesh: TriMesh):
        if mesh.n_faces == 0:
            raise MeshError("empty mesh")
        self.tris = mesh.triangles()
        centroids = self.tris.mean(axis=1)
        self.radius = float(np.max(np.linalg.norm(self.tris - centroids[:, None], axis=2)))
        self.centroid_tree = cKDTree(centroids)
        used = np.unique(mesh.faces)
        self.vertex_tree = cKDTree(mesh.vertices[used])

    def __call__(self, points, chunk: int = 4096) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        out = np.empty(len(p))
        for s in range(0, len(p), chunk):
            q = p[s:s + chunk]
            bound, _ = self.vertex_tree.query(q)
            lists = self.centroid_tree.query_ball_point(q, bound + self.radius + 1e-12)
            counts = np.fromiter((len(l) for l in lists), dtype=np.int64, count=len(q))
            face = np.fromiter((f for l in lists for f in l), dtype=np.int64, count=counts.sum())
            row = np.repeat(np.arange(len(q)), counts)
            t = self.tris[face]
            cp = closest_point_on_triangles(q[row], t[:, 0], t[:, 1], t[:, 2])
            d2 = np.sum((cp - q[row]) ** 2, axis=1)
            best = bound ** 2
            np.minimum.at(best, row, d2)
            out[s:s + chunk] = np.sqrt(best)
        return out


# ---------------------------------------------------------- sphere tracing

def faces_near_region(mesh: TriMesh, center, radius: float) -> np.ndarray:
    """Indices of faces whose distance to ``center`` is at most ``radius``."""
    if mesh.n_faces == 0:
        return np.zeros(0, dtype=np.int64)
    t = mesh.triangles()
    cp = closest_point_on_triangles(np.asarray(center, dtype=np.float64), t[:, 0], t[:, 1], t[:, 2])
    d = np.linalg.norm(cp - center, axis=1)
    return np.flatnonzero(d <= radius)


def sphere_trace_batch(origins, directions, mesh: TriMesh, max_t: float, eps: float = 1e-5,
                       max_steps: int = 10_000, distance=None,
                       distance_cap: float = np.inf) -> np.ndarray:
    """March rays by the unsigned distance to the mesh.

    Returns hit distances, ``inf`` for rays that travel past ``max_t``.
    ``distance`` overrides the distance function (default: exact
    :class:`MeshDistance` over the whole mesh). When it only covers a culled
    subset of faces, ``distance_cap`` must be a lower bound on the distance
    from any sample point to the omitted faces; ``min(d, cap)`` then remains a
    safe step and hits are unchanged.
    """
    if eps <= 0 or max_t <= 0:
        raise ValueError("eps and max_t must be positive")
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    hit = np.full(len(o), np.inf)
    if distance is None:
        if mesh.n_faces == 0:
            return hit
        distance = MeshDistance(mesh)
    t = np.zeros(len(o))
    active = np.arange(len(o))
    for _ in range(max_steps):
        if len(active) == 0:
            break
        pts = o[active] + t[active, None] * d[active]
        dist = np.minimum(distance(pts), distance_cap)
        done = dist < eps
        hit[active[done]] = t[active[done]]
        t[active] += np.where(done, 0.0, dist)
        keep = ~done & (t[active] <= max_t)
        active = active[keep]
    return hit


def sphere_trace(ray: Ray, mesh: TriMesh, max_t: float, eps: float = 1e-5):
    t = sphere_trace_batch(ray.origin[None], ray.direction[None], mesh, max_t, eps)[0]
    return None if np.isinf(t) else float(t)


def submesh(mesh: TriMesh, faces: np.ndarray) -> TriMesh:
    return TriMesh(mesh.vertices, mesh.faces[faces], strict=False)


# ------------------------------------------------------------ constructors

def icosphere(level: int = 3, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriMesh:
    """Subdivided icosahedron with outward-facing triangles."""
    phi = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
             (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
             (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    v = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in verts]
    for _ in range(level):
        cache = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = v[i] + v[j]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return TriMesh(np.array(v) * radius + np.asarray(center, dtype=np.float64), np.array(faces))


def fibonacci_sphere(n: int) -> np.ndarray:
    """``n`` near-uniform unit directions on a golden-angle spiral."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    theta = np.pi * (1.0 + 5 ** 0.5) * i
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def orthonormal_frame(normal) -> tuple[np.ndarray, np.ndarray]:
    """Two unit tangents completing ``normal`` to a right-handed frame."""
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(helper, n)
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    return u, v
