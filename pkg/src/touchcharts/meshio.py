"""Readers and writers for the on-disk formats: OBJ meshes, PLY/XYZ clouds,
binary PPM images and raw float grids with a JSON sidecar header."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .geometry import MeshError, TriMesh


def write_obj(path, mesh: TriMesh, digits: int = 17) -> None:
    """Vertices are written with ``digits`` significant digits; the default
    round-trips float64 exactly."""
    lines = [f"v {x:.{digits}g} {y:.{digits}g} {z:.{digits}g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path, strict: bool = True) -> TriMesh:
    """Read ``v``/``f`` records. Polygon faces are fan-triangulated, texture
    and normal indices (``f 1/2/3``) are ignored."""
    verts, faces = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = []
            for tok in parts[1:]:
                i = int(tok.split("/")[0])
                idx.append(i - 1 if i > 0 else len(verts) + i)
            if len(idx) < 3:
                raise MeshError(f"{path}:{lineno}: face with fewer than 3 vertices")
            faces += [[idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1)]
    return TriMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3),
                   strict=strict)


def write_ply(path, points) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    header = ("ply\nformat ascii 1.0\n"
              f"element vertex {len(pts)}\n"
              "property double x\nproperty double y\nproperty double z\nend_header\n")
    body = "".join(f"{x:.9g} {y:.9g} {z:.9g}\n" for x, y, z in pts)
    Path(path).write_text(header + body)


def write_xyz(path, points) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    Path(path).write_text("".join(f"{x:.9g} {y:.9g} {z:.9g}\n" for x, y, z in pts))


def read_xyz(path) -> np.ndarray:
    text = Path(path).read_text().strip()
    if not text:
        return np.zeros((0, 3))
    return np.loadtxt(path, dtype=np.float64).reshape(-1, 3)


def write_ppm(path, image) -> None:
    """Binary P6, maxval 255. ``image`` is H x W x 3 with values in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got {img.shape}")
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + data.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise ValueError(f"{path}: not a P6/255 image")
    w, h = int(fields[1]), int(fields[2])
    data = np.frombuffer(raw[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def write_grid(path, grid) -> None:
    """Little-endian float32, row-major, with ``<path>.json`` alongside."""
    g = np.ascontiguousarray(grid, dtype="<f4")
    path = Path(path)
    path.write_bytes(g.tobytes(order="C"))
    header = {"dtype": "float32", "endian": "little", "shape": list(g.shape), "order": "row-major"}
    Path(str(path) + ".json").write_text(json.dumps(header))


def read_grid(path) -> np.ndarray:
    path = Path(path)
    header = json.loads(Path(str(path) + ".json").read_text())
    if header.get("order") != "row-major" or header.get("dtype") != "float32":
        raise ValueError(f"{path}: unsupported grid header {header}")
    return np.frombuffer(path.read_bytes(), dtype="<f4").reshape(header["shape"]).copy()
