"""Vision-based touch sensor simulation and a small vision renderer.

A sensor is a square plane (the pose plane) looking along ``normal`` toward
the object. The untouched gel surface sits ``gel_depth`` in front of it, so a
pixel whose orthographic depth ``D`` is below ``gel_depth`` is pressed in by
``D' = max(0, gel_depth - D)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (MeshDistance, TriMesh, faces_near_region, orthonormal_frame,
                       sample_surface, sphere_trace_batch, submesh)

DEFAULT_WIDTH = 0.03
DEFAULT_GEL_DEPTH = 0.004
SENSOR_RES = 100


@dataclass(frozen=True)
class SensorPose:
    center: np.ndarray
    normal: np.ndarray
    tangent_u: np.ndarray
    tangent_v: np.ndarray
    width: float = DEFAULT_WIDTH
    gel_depth: float = DEFAULT_GEL_DEPTH

    def __post_init__(self):
        for name in ("center", "normal", "tangent_u", "tangent_v"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(3))
        frame = np.stack([self.tangent_u, self.tangent_v, self.normal])
        if np.abs(frame @ frame.T - np.eye(3)).max() > 1e-9:
            raise ValueError("sensor frame is not orthonormal")
        if self.width <= 0 or self.gel_depth <= 0:
            raise ValueError("sensor width and gel depth must be positive")

    @classmethod
    def facing(cls, center, normal, angle: float = 0.0, width: float = DEFAULT_WIDTH,
               gel_depth: float = DEFAULT_GEL_DEPTH) -> "SensorPose":
        """Pose at ``center`` looking along ``normal``, rotated ``angle``
        radians in its own plane."""
        n = np.asarray(normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        u, v = orthonormal_frame(n)
        c, s = np.cos(angle), np.sin(angle)
        return cls(center, n, c * u + s * v, -s * u + c * v, width, gel_depth)

    def to_dict(self) -> dict:
        return {"center": self.center.tolist(), "normal": self.normal.tolist(),
                "tangent_u": self.tangent_u.tolist(), "tangent_v": self.tangent_v.tolist(),
                "width": self.width, "gel_depth": self.gel_depth}

    @classmethod
    def from_dict(cls, d: dict) -> "SensorPose":
        return cls(d["center"], d["normal"], d["tangent_u"], d["tangent_v"], d["width"], d["gel_depth"])


@dataclass(frozen=True)
class LightRig:
    """Light positions in normalised sensor coordinates (sensor side = 1)."""

    positions: np.ndarray
    diffuse: float = 0.8

    def __post_init__(self):
        object.__setattr__(self, "positions", np.asarray(self.positions, dtype=np.float64).reshape(3, 3))
        if self.diffuse <= 0:
            raise ValueError("diffuse constant must be positive")


def default_rig(res: int = SENSOR_RES, circumradius: float = 0.8, height: float = 0.6,
                diffuse: float = 0.8) -> LightRig:
    """Red, green and blue lights on an equilateral triangle centred over the
    middle of the pixel grid."""
    c = (res - 1) / (2.0 * res)
    ang = np.deg2rad([90.0, 210.0, 330.0])
    pos = np.stack([c + circumradius * np.cos(ang), c + circumradius * np.sin(ang),
                    np.full(3, height)], axis=1)
    return LightRig(pos, diffuse)


@dataclass
class TouchSample:
    pose: SensorPose
    depth: np.ndarray
    impression: np.ndarray
    reading: np.ndarray
    success: bool
    local_cloud: np.ndarray = field(repr=False)


# ------------------------------------------------------------------ touch

def make_sensor_grid(pose: SensorPose, res: int = SENSOR_RES) -> np.ndarray:
    """``res * res`` points on the pose plane, row-major over (x, y)."""
    if res < 2:
        raise ValueError("grid resolution must be >= 2")
    s = ((np.arange(res) + 0.5) / res - 0.5) * pose.width
    x, y = np.meshgrid(s, s, indexing="ij")
    return (pose.center + x.reshape(-1, 1) * pose.tangent_u
            + y.reshape(-1, 1) * pose.tangent_v)


def gel_grid(pose: SensorPose, res: int = SENSOR_RES) -> np.ndarray:
    """Grid on the untouched gel surface, ``gel_depth`` in front of the pose
    plane. Impressions displace these points back toward the sensor."""
    return make_sensor_grid(pose, res) + pose.gel_depth * pose.normal


def render_depth(mesh: TriMesh, pose: SensorPose, res: int = SENSOR_RES, eps: float = 1e-5,
                 max_depth: float | None = None) -> np.ndarray:
    """Orthographic depth map by sphere tracing from the pose plane along the
    sensing direction; misses are clamped to ``max_depth`` (default 2w)."""
    max_depth = 2.0 * pose.gel_depth if max_depth is None else max_depth
    grid = make_sensor_grid(pose, res)
    depth = np.full(res * res, max_depth)
    if mesh.n_faces:
        # every march position lies in the prism footprint x [0, max_depth];
        # faces farther than `cap` from that prism never limit a step
        cap = max_depth
        mid = pose.center + 0.5 * max_depth * pose.normal
        half_diag = np.sqrt(0.5 * pose.width ** 2 + 0.25 * max_depth ** 2)
        near = faces_near_region(mesh, mid, half_diag + cap)
        if len(near):
            dist = MeshDistance(submesh(mesh, near))
            hit = sphere_trace_batch(grid, np.broadcast_to(pose.normal, grid.shape), mesh,
                                     max_depth, eps, distance=dist, distance_cap=cap)
            depth = np.minimum(hit, max_depth)
    return depth.reshape(res, res)


def impression(depth: np.ndarray, gel_depth: float) -> np.ndarray:
    if gel_depth <= 0:
        raise ValueError("gel depth must be positive")
    return np.maximum(0.0, gel_depth - depth)


def impression_to_local_cloud(imp: np.ndarray, pose: SensorPose) -> np.ndarray:
    """World-frame points of the pressed-in pixels (``D' > 0``)."""
    res = imp.shape[0]
    pts = gel_grid(pose, res) - imp.reshape(-1, 1) * pose.normal
    return pts[imp.reshape(-1) > 0]


def phong_diffuse(points: np.ndarray, normals: np.ndarray, rig: LightRig) -> np.ndarray:
    """Diffuse-only Phong response of each light at sensor-frame points.

    ``points``/``normals`` are (..., 3); returns (..., 3) with one channel
    per light, clamped to [0, 1].
    """
    out = []
    for light in rig.positions:
        l = light - points
        l = l / np.linalg.norm(l, axis=-1, keepdims=True)
        out.append(np.sum(normals * l, axis=-1))
    return np.clip(rig.diffuse * np.stack(out, axis=-1), 0.0, 1.0)


def shade(imp: np.ndarray, rig: LightRig, width: float = DEFAULT_WIDTH) -> np.ndarray:
    """Simulated RGB reading of an impression map.

    Impression depths are divided by ``width`` so that they share units with
    the (x/res, y/res) pixel coordinates. Normals come from central
    differences (one-sided at the border).
    """
    res = imp.shape[0]
    z = imp / width
    dzdx, dzdy = np.gradient(z, 1.0 / res)
    n = np.stack([-dzdx, -dzdy, np.ones_like(z)], axis=-1)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    coords = np.arange(res) / res
    x, y = np.meshgrid(coords, coords, indexing="ij")
    pts = np.stack([x, y, z], axis=-1)
    return phong_diffuse(pts, n, rig)


def untouched_reading(rig: LightRig, res: int = SENSOR_RES, width: float = DEFAULT_WIDTH) -> np.ndarray:
    return shade(np.zeros((res, res)), rig, width)


def simulate_touch(mesh: TriMesh, pose: SensorPose, rig: LightRig | None = None,
                   res: int = SENSOR_RES, eps: float = 1e-5) -> TouchSample:
    rig = default_rig(res) if rig is None else rig
    depth = render_depth(mesh, pose, res, eps)
    imp = impression(depth, pose.gel_depth)
    cloud = impression_to_local_cloud(imp, pose)
    reading = shade(imp, rig, pose.width)
    return TouchSample(pose, depth, imp, reading, bool(np.any(imp > 0)), cloud)


def place_sensors_on_surface(mesh: TriMesh, n_sensors: int, seed: int,
                             width: float = DEFAULT_WIDTH, gel_depth: float = DEFAULT_GEL_DEPTH,
                             failure_fraction: float = 0.0) -> list[SensorPose]:
    """Sensor poses tangent to random surface points of an outward-oriented
    mesh, looking inward with the pose plane ``gel_depth / 2`` outside the
    surface. With probability ``failure_fraction`` a sensor is instead backed
    off 3w to 5w so that it cannot reach the surface."""
    if mesh.n_faces == 0:
        raise ValueError("empty mesh")
    if n_sensors < 1:
        raise ValueError("n_sensors must be >= 1")
    rng = np.random.default_rng(seed)
    pts, face = sample_surface(mesh, n_sensors, int(rng.integers(2 ** 32)), return_faces=True)
    inward = -mesh.face_normals()[face]
    poses = []
    for p, n in zip(pts, inward):
        angle = rng.uniform(0.0, 2.0 * np.pi)
        if rng.random() < failure_fraction:
            offset = gel_depth * (3.0 + 2.0 * rng.random())
        else:
            offset = 0.5 * gel_depth
        poses.append(SensorPose.facing(p - offset * n, n, angle, width, gel_depth))
    return poses


# ----------------------------------------------------------------- vision

@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera. Rows of ``rotation`` are the camera right, down and
    forward axes in world coordinates; pixel (r, c) has its centre at
    (c + 0.5, r + 0.5) in image coordinates."""

    position: np.ndarray
    rotation: np.ndarray
    focal: float
    width: int = 64
    height: int = 64

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64).reshape(3))
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-9:
            raise ValueError("camera rotation is not orthonormal")
        object.__setattr__(self, "rotation", r)

    def to_camera(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.position) @ self.rotation.T

    def project(self, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Image-plane (u, v) in pixels and camera depth z."""
        pc = self.to_camera(points)
        z = pc[..., 2]
        u = self.focal * pc[..., 0] / z + 0.5 * self.width
        v = self.focal * pc[..., 1] / z + 0.5 * self.height
        return u, v, z

    def to_dict(self) -> dict:
        return {"position": self.position.tolist(), "rotation": self.rotation.tolist(),
                "focal": self.focal, "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(d["position"], d["rotation"], d["focal"], d["width"], d["height"])


def look_at(position, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0), fov_deg: float = 40.0,
            size: int = 64) -> CameraModel:
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    focal = 0.5 * size / np.tan(np.deg2rad(fov_deg) / 2.0)
    return CameraModel(position, np.stack([right, down, fwd]), focal, size, size)


BACKGROUND = np.array([1.0, 1.0, 1.0])
HAND_COLOR = np.array([0.45, 0.3, 0.25])
OBJECT_COLOR = np.array([0.55, 0.6, 0.8])


def rasterize(mesh: TriMesh, camera: CameraModel, near: float = 1e-6):
    """Z-buffer rasterisation. Returns (depth, face_id): camera-space depth
    per pixel (``inf`` for background) and the visible face (-1)."""
    h, w = camera.height, camera.width
    zbuf = np.full((h, w), np.inf)
    fid = np.full((h, w), -1, dtype=np.int64)
    if mesh.n_faces == 0:
        return zbuf, fid
    u, v, z = camera.project(mesh.vertices)
    for f, (a, b, c) in enumerate(mesh.faces):
        if min(z[a], z[b], z[c]) <= near:
            continue
        xs = np.array([u[a], u[b], u[c]])
        ys = np.array([v[a], v[b], v[c]])
        c0 = max(int(np.floor(xs.min() - 0.5)), 0)
        c1 = min(int(np.ceil(xs.max() - 0.5)), w - 1)
        r0 = max(int(np.floor(ys.min() - 0.5)), 0)
        r1 = min(int(np.ceil(ys.max() - 0.5)), h - 1)
        if c0 > c1 or r0 > r1:
            continue
        area = (xs[1] - xs[0]) * (ys[2] - ys[0]) - (xs[2] - xs[0]) * (ys[1] - ys[0])
        if abs(area) < 1e-14:
            continue
        px, py = np.meshgrid(np.arange(c0, c1 + 1) + 0.5, np.arange(r0, r1 + 1) + 0.5)
        w0 = ((xs[1] - px) * (ys[2] - py) - (xs[2] - px) * (ys[1] - py)) / area
        w1 = ((xs[2] - px) * (ys[0] - py) - (xs[0] - px) * (ys[2] - py)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        depth = 1.0 / (w0 / z[a] + w1 / z[b] + w2 / z[c])
        region = zbuf[r0:r1 + 1, c0:c1 + 1]
        closer = inside & (depth < region)
        region[closer] = depth[closer]
        fid[r0:r1 + 1, c0:c1 + 1][closer] = f
    return zbuf, fid


def render_vision(mesh: TriMesh, camera: CameraModel, occlusion_box=None,
                  light_dir=(-0.3, -0.5, 0.8)) -> np.ndarray:
    """Lambert-shaded H x W x 3 image in [0, 1].

    ``occlusion_box`` is ``(row0, col0, row1, col1)`` (half-open); those
    pixels are painted with the hand colour.
    """
    h, w = camera.height, camera.width
    img = np.broadcast_to(BACKGROUND, (h, w, 3)).copy()
    zbuf, fid = rasterize(mesh, camera)
    hit = fid >= 0
    if hit.any():
        normals = mesh.face_normals()[fid[hit]]
        centers = mesh.triangles()[fid[hit]].mean(axis=1)
        facing = np.sum(normals * (camera.position - centers), axis=1)
        normals = normals * np.where(facing < 0, -1.0, 1.0)[:, None]
        light = np.asarray(light_dir, dtype=np.float64)
        light = light / np.linalg.norm(light)
        lam = np.clip(normals @ light, 0.0, 1.0)
        img[hit] = OBJECT_COLOR * (0.25 + 0.75 * lam[:, None])
    if occlusion_box is not None:
        r0, c0, r1, c1 = occlusion_box
        img[r0:r1, c0:c1] = HAND_COLOR
    return img
