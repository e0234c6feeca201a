"""Dataset generation, training orchestration and the evaluation protocols.

A run directory holds everything derived from one configuration:

    dataset/            generated objects, grasps, touches and images
    depth/              touch depth predictor checkpoint
    fitted/             touch charts fitted to predicted local clouds
    models/<name>/      deformation model checkpoints
    reports/            JSON and CSV evaluation outputs

Every stage is skipped when its outputs already exist, so an interrupted
run resumes where it stopped.
"""
from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .charts import TOUCH_VERTS, atlas_to_mesh, init_unsuccessful_touch_chart, make_touch_chart
from .config import DATA_KEYS, ExperimentConfig, format_config, parse_config
from .geometry import MeshDistance, TriMesh, chamfer, raycast_batch, submesh
from .meshio import read_grid, read_obj, read_ppm, write_grid, write_obj, write_ppm
from .nn import load_checkpoint, save_checkpoint
from .reconstruct import (DeformConfig, DeformModel, DeformTrainConfig, DepthPredictor,
                          DepthTrainConfig, SceneInput, TouchInput, deform, depth_to_cloud,
                          fit_touch_chart, loss_faces, mesh_chamfer, predict_impression,
                          scene_atlas, touch_mask, train_depth_predictor, train_deform)
from .shapes import random_object
from .tactile import SensorPose, look_at, place_sensors_on_surface, render_vision, simulate_touch

VIEW_DIR = np.array([0.972, 0.461, 0.374]) / np.linalg.norm([0.972, 0.461, 0.374])

MODALITIES = {
    "touch": ("none", True),
    "occluded": ("occluded", False),
    "unoccluded": ("unoccluded", False),
    "occluded+touch": ("occluded", True),
    "unoccluded+touch": ("unoccluded", True),
}


def make_camera(cfg: ExperimentConfig):
    return look_at(cfg.camera_distance * VIEW_DIR, (0.0, 0.0, 0.0), (0.0, 0.0, 1.0),
                   cfg.fov_deg, cfg.image_size)


def failure_fraction_for(target: float, n_sensors: int) -> float:
    """Per-sensor failure probability f such that, over grasps with at least
    one success, the expected success fraction (1 - f) / (1 - f^n) equals
    ``target``."""
    if target >= 1.0:
        return 0.0
    lo = 1.0 / n_sensors
    if target <= lo:
        raise ValueError(f"success target {target} unreachable with {n_sensors} sensors")
    return brentq(lambda f: (1 - f) / (1 - f ** n_sensors) - target, 1e-12, 1 - 1e-12, xtol=1e-14)


def object_seed(master: int, index: int) -> int:
    return int(np.random.SeedSequence([master, index]).generate_state(1)[0])


def split_assignment(n: int, cfg: ExperimentConfig) -> list[str]:
    """Deterministic object-level split with class-balanced interleaving."""
    perm = np.random.default_rng([cfg.seed, 7]).permutation(n)
    n_test = max(1, int(round(cfg.split_test * n))) if n >= 3 else 0
    n_val = max(1, int(round(cfg.split_val * n))) if n >= 3 else 0
    out = ["train"] * n
    for i in perm[:n_test]:
        out[i] = "test"
    for i in perm[n_test:n_test + n_val]:
        out[i] = "val"
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_timing(directory: Path, seconds: float) -> None:
    # wall clock lives apart from the artifacts so they stay reproducible
    _write_json(Path(directory) / "timing.json", {"seconds": seconds})


def _recorded_seconds(directory: Path, measured: float) -> float:
    """Seconds spent building a stage, as recorded when it was built."""
    p = Path(directory) / "timing.json"
    return json.loads(p.read_text())["seconds"] if p.is_file() else measured


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))


# ===================================================================== data

def occlusion_box(camera, point, size: int):
    u, v, _ = camera.project(np.asarray(point)[None])
    cu, cv = int(np.floor(u[0])), int(np.floor(v[0]))
    h = size // 2
    r0, c0 = max(cv - h, 0), max(cu - h, 0)
    r1, c1 = min(cv - h + size, camera.height), min(cu - h + size, camera.width)
    return (r0, c0, max(r1, r0), max(c1, c0))


def generate_object(cfg: ExperimentConfig, index: int) -> dict:
    """All simulated data of one object, in memory."""
    rng = np.random.default_rng(object_seed(cfg.seed, index))
    kind = cfg.classes[index % len(cfg.classes)]
    mesh, params = random_object(kind, rng, (cfg.aspect_min, 1.0), (cfg.scale_min, cfg.scale_max),
                                 cfg.depth_shift, VIEW_DIR)
    camera = make_camera(cfg)
    fail = failure_fraction_for(cfg.success_target, cfg.sensors_per_grasp)
    grasps = []
    for g in range(cfg.grasps_per_object):
        attempts = 0
        while True:
            attempts += 1
            poses = place_sensors_on_surface(mesh, cfg.sensors_per_grasp, int(rng.integers(2 ** 31)),
                                             cfg.sensor_width, cfg.gel_depth, fail)
            touches = [simulate_touch(mesh, p, res=cfg.sensor_res, eps=cfg.trace_eps) for p in poses]
            if any(t.success for t in touches):
                break
        site = next(t for t in touches if t.success).pose.center
        box = occlusion_box(camera, site, cfg.occlusion_size)
        grasps.append({"touches": touches, "box": box, "attempts": attempts})
    image = render_vision(mesh, camera)
    occluded = [render_vision(mesh, camera, occlusion_box=gr["box"]) for gr in grasps]
    return {"kind": kind, "mesh": mesh, "params": params, "grasps": grasps, "image": image,
            "occluded": occluded}


def gen_dataset(cfg: ExperimentConfig, out_dir, log=None) -> Path:
    """Write the procedural dataset and a manifest with per-file checksums."""
    t0 = time.time()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = split_assignment(cfg.n_objects, cfg)
    objects = []
    for i in range(cfg.n_objects):
        oid = f"obj_{i:04d}"
        d = out / "objects" / oid
        d.mkdir(parents=True, exist_ok=True)
        rec = generate_object(cfg, i)
        write_obj(d / "mesh.obj", rec["mesh"])
        write_ppm(d / "vision.ppm", rec["image"])
        grasp_meta = []
        for g, gr in enumerate(rec["grasps"]):
            gd = d / f"grasp_{g}"
            gd.mkdir(exist_ok=True)
            write_ppm(gd / "occluded.ppm", rec["occluded"][g])
            tmeta = []
            for t, ts in enumerate(gr["touches"]):
                write_grid(gd / f"touch_{t}_depth.f32", ts.depth)
                write_grid(gd / f"touch_{t}_reading.f32", ts.reading)
                tmeta.append({"pose": ts.pose.to_dict(), "success": bool(ts.success)})
            grasp_meta.append({"touches": tmeta, "occlusion_box": list(gr["box"]),
                               "attempts": gr["attempts"]})
        _write_json(d / "meta.json", {"id": oid, "class": rec["kind"], "split": splits[i],
                                      "params": rec["params"], "grasps": grasp_meta})
        objects.append({"id": oid, "class": rec["kind"], "split": splits[i]})
        if log is not None and (i % 10 == 0 or i == cfg.n_objects - 1):
            log(f"generated {i + 1}/{cfg.n_objects} objects")
    (out / "config.txt").write_text(format_config(cfg))
    files = {str(p.relative_to(out)): _sha256(p) for p in sorted(out.rglob("*"))
             if p.is_file() and p.name not in ("manifest.json", "timing.json")}
    _write_json(out / "manifest.json", {"objects": objects, "files": files,
                                        "data_digest": cfg.digest(DATA_KEYS)})
    _write_timing(out, time.time() - t0)
    return out


def verify_manifest(dataset_dir) -> list[str]:
    """Paths whose checksum differs from the manifest (or that are missing)."""
    d = Path(dataset_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    bad = []
    for rel, digest in manifest["files"].items():
        p = d / rel
        if not p.is_file() or _sha256(p) != digest:
            bad.append(rel)
    return bad


@dataclass
class TouchRecord:
    pose: SensorPose
    success: bool
    depth: np.ndarray
    reading: np.ndarray

    def impression(self) -> np.ndarray:
        return np.maximum(0.0, self.pose.gel_depth - self.depth)

    def local_cloud(self) -> np.ndarray:
        imp = self.impression()
        return depth_to_cloud(imp, self.pose)[imp.reshape(-1) > 0]


class Dataset:
    """Read access to a generated dataset directory."""

    def __init__(self, directory):
        self.dir = Path(directory)
        if not (self.dir / "manifest.json").is_file():
            raise FileNotFoundError(f"{self.dir}: no dataset manifest")
        self.manifest = json.loads((self.dir / "manifest.json").read_text())
        self.config = parse_config((self.dir / "config.txt").read_text())
        self.objects = self.manifest["objects"]
        self._meta = {}

    def ids(self, split: str | None = None) -> list[str]:
        if split is not None and split not in ("train", "val", "test"):
            raise ValueError(f"unknown split {split!r}")
        ids = [o["id"] for o in self.objects if split is None or o["split"] == split]
        if split is not None and not ids:
            raise ValueError(f"split {split!r} is empty")
        return ids

    def meta(self, oid: str) -> dict:
        if oid not in self._meta:
            self._meta[oid] = json.loads((self.dir / "objects" / oid / "meta.json").read_text())
        return self._meta[oid]

    def mesh(self, oid: str) -> TriMesh:
        return read_obj(self.dir / "objects" / oid / "mesh.obj")

    def image(self, oid: str, occluded_grasp: int | None = None) -> np.ndarray:
        d = self.dir / "objects" / oid
        if occluded_grasp is None:
            return read_ppm(d / "vision.ppm")
        return read_ppm(d / f"grasp_{occluded_grasp}" / "occluded.ppm")

    def touches(self, oid: str, grasp: int, load_arrays: bool = True) -> list[TouchRecord]:
        gd = self.dir / "objects" / oid / f"grasp_{grasp}"
        out = []
        for t, m in enumerate(self.meta(oid)["grasps"][grasp]["touches"]):
            pose = SensorPose.from_dict(m["pose"])
            depth = reading = None
            if load_arrays:
                depth = read_grid(gd / f"touch_{t}_depth.f32").astype(np.float64)
                reading = read_grid(gd / f"touch_{t}_reading.f32").astype(np.float64)
            out.append(TouchRecord(pose, bool(m["success"]), depth, reading))
        return out

    @property
    def n_grasps(self) -> int:
        return self.config.grasps_per_object


def success_statistics(ds: Dataset) -> dict:
    n = s = 0
    per_grasp_min = []
    for oid in ds.ids():
        for g in ds.meta(oid)["grasps"]:
            flags = [t["success"] for t in g["touches"]]
            n += len(flags)
            s += sum(flags)
            per_grasp_min.append(sum(flags))
    return {"touches": n, "successful": s, "fraction": s / n if n else 0.0,
            "min_successes_per_grasp": int(min(per_grasp_min)) if per_grasp_min else 0}


# ============================================================ local stage

def depth_pairs(ds: Dataset, split: str, max_pairs: int, seed: int) -> list:
    recs = [(oid, g, t) for oid in ds.ids(split) for g, gm in enumerate(ds.meta(oid)["grasps"])
            for t, tm in enumerate(gm["touches"]) if tm["success"]]
    rng = np.random.default_rng([seed, 11])
    if len(recs) > max_pairs:
        recs = [recs[i] for i in np.sort(rng.choice(len(recs), max_pairs, replace=False))]
    pairs = []
    for oid, g, t in recs:
        tr = ds.touches(oid, g)[t]
        pairs.append((tr.reading, tr.impression()))
    return pairs


def train_depth_stage(ds: Dataset, cfg: ExperimentConfig, out_dir, log=None) -> DepthPredictor:
    out = Path(out_dir)
    if (out / "manifest.json").is_file():
        return load_depth_model(out)
    t0 = time.time()
    pairs = depth_pairs(ds, "train", cfg.depth_max_pairs, cfg.seed)
    tcfg = DepthTrainConfig(cfg.depth_steps, cfg.depth_batch, cfg.depth_lr, cfg.depth_channels, cfg.seed)
    model, hist = train_depth_predictor(pairs, tcfg, cfg.gel_depth, cfg.sensor_res, cfg.sensor_width, log)
    save_checkpoint(out, model.store, {"channels": cfg.depth_channels, "gel_depth": cfg.gel_depth,
                                       "res": cfg.sensor_res, "width": cfg.sensor_width,
                                       "history": hist})
    _write_timing(out, time.time() - t0)
    return model


def load_depth_model(directory) -> DepthPredictor:
    store, meta = load_checkpoint(directory)
    model = DepthPredictor(meta["channels"], meta["gel_depth"], meta["res"], meta["width"])
    model.store = store
    return model


def evaluate_depth(model: DepthPredictor, ds: Dataset, split: str, max_pairs: int = 200, seed: int = 0):
    """Masked mean absolute impression error and untouched response, both as
    fractions of the gel depth, plus per-class local Chamfer of the lifted
    clouds against the simulated ones."""
    errs, per_class = [], {}
    for oid in ds.ids(split):
        kind = ds.meta(oid)["class"]
        for g in range(ds.n_grasps):
            for tr in ds.touches(oid, g):
                if not tr.success:
                    continue
                pred = predict_impression(model, tr.reading)
                mask = touch_mask(tr.reading, model.untouched)
                if mask.any():
                    errs.append(np.abs(pred - tr.impression())[mask].mean())
                    cloud = depth_to_cloud(pred, tr.pose)[mask.reshape(-1)]
                    per_class.setdefault(kind, []).append(chamfer(cloud, tr.local_cloud()))
                if len(errs) >= max_pairs:
                    break
    untouched = predict_impression(model, model.untouched)
    return {"masked_mae_rel": float(np.mean(errs) / model.gel_depth) if errs else float("nan"),
            "untouched_mean_rel": float(np.abs(untouched).mean() / model.gel_depth),
            "local_chamfer_per_class": {k: float(np.mean(v)) for k, v in sorted(per_class.items())},
            "n": len(errs)}


def _fit_path(run_dir: Path, oid: str) -> Path:
    return Path(run_dir) / "fitted" / f"{oid}.f64"


def fit_object_charts(ds: Dataset, oid: str, depth_model: DepthPredictor, cfg: ExperimentConfig):
    """(G x S x 81 x 3) fitted chart vertices; NaN for touches without a
    chart (unsuccessful, or no detectable contact)."""
    G, S = ds.n_grasps, ds.config.sensors_per_grasp
    out = np.full((G, S, TOUCH_VERTS, 3), np.nan)
    stats = []
    for g in range(G):
        for t, tr in enumerate(ds.touches(oid, g)):
            if not tr.success:
                continue
            imp = predict_impression(depth_model, tr.reading)
            mask = touch_mask(tr.reading, depth_model.untouched).reshape(-1)
            cloud = depth_to_cloud(imp, tr.pose)[mask]
            if not len(cloud):
                continue
            seed = object_seed(cfg.seed, 1000 * g + t)
            res = fit_touch_chart(cloud, tr.pose, cfg.fit_lr, cfg.fit_halt, cfg.fit_max_iters,
                                  cfg.fit_samples, seed=seed)
            out[g, t] = res.chart.vertices
            stats.append((res.iterations, res.loss, res.converged))
    return out, stats


def fit_stage(ds: Dataset, depth_model: DepthPredictor, cfg: ExperimentConfig, run_dir, log=None) -> dict:
    run_dir = Path(run_dir)
    (run_dir / "fitted").mkdir(parents=True, exist_ok=True)
    summary_path = run_dir / "fitted" / "summary.json"
    if summary_path.is_file():
        return json.loads(summary_path.read_text())
    iters, losses, conv = [], [], []
    t0 = time.time()
    for k, oid in enumerate(ds.ids()):
        p = _fit_path(run_dir, oid)
        if p.is_file():
            continue
        arr, stats = fit_object_charts(ds, oid, depth_model, cfg)
        p.write_bytes(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        for it, loss, c in stats:
            iters.append(it)
            losses.append(loss)
            conv.append(c)
        if log is not None and (k % 20 == 0):
            log(f"fitted charts for {k + 1}/{len(ds.ids())} objects")
    summary = {"fits": len(iters), "mean_iterations": float(np.mean(iters)) if iters else 0.0,
               "converged_fraction": float(np.mean(conv)) if conv else 1.0,
               "mean_loss": float(np.mean(losses)) if losses else 0.0}
    _write_json(summary_path, summary)
    _write_timing(run_dir / "fitted", time.time() - t0)
    return summary


def load_fitted(ds: Dataset, run_dir, oid: str) -> np.ndarray:
    G, S = ds.n_grasps, ds.config.sensors_per_grasp
    raw = _fit_path(run_dir, oid).read_bytes()
    return np.frombuffer(raw, dtype="<f8").reshape(G, S, TOUCH_VERTS, 3).copy()


# =========================================================== global stage

def build_scene(ds: Dataset, fitted: np.ndarray, oid: str, grasps, modality: str, camera) -> SceneInput:
    """Scene for ``grasps`` (grasp indices); the occluded image shows the hand
    of the first grasp."""
    vision, use_touch = MODALITIES[modality]
    grasps = list(grasps)
    image = None
    if vision == "unoccluded":
        image = ds.image(oid)
    elif vision == "occluded":
        image = ds.image(oid, grasps[0])
    touches = []
    if use_touch:
        for g in grasps:
            for t, tr in enumerate(ds.touches(oid, g, load_arrays=False)):
                verts = fitted[g, t]
                if tr.success and np.isfinite(verts).all():
                    chart = make_touch_chart(tr.pose).with_vertices(verts)
                    touches.append(TouchInput(tr.pose, True, chart))
                else:
                    touches.append(TouchInput(tr.pose, False, init_unsuccessful_touch_chart(tr.pose)))
    return SceneInput(image, touches, camera)


def grasp_window(start: int, count: int, total: int) -> list[int]:
    return [(start + j) % total for j in range(count)]


def deform_config(cfg: ExperimentConfig, seed_offset: int = 0) -> DeformConfig:
    return DeformConfig(hidden=cfg.deform_hidden, gcn_layers=cfg.deform_gcn_layers,
                        zero_neighbor=cfg.zero_neighbor, self_loops=cfg.self_loops,
                        communication=cfg.communication, n_pred_samples=cfg.n_pred_samples, n_target_samples=cfg.n_target_samples,
                        image_size=cfg.image_size, seed=cfg.seed + seed_offset)


def model_name(modality: str, grasps: int) -> str:
    return f"{modality.replace('+', '-')}_g{grasps}"


def scenes_for(ds: Dataset, run_dir, split: str, modality: str, grasps: int, rotations: int,
               camera, meshes: dict | None = None):
    out = []
    for oid in ds.ids(split):
        fitted = load_fitted(ds, run_dir, oid)
        mesh = meshes[oid] if meshes is not None else ds.mesh(oid)
        for k in range(rotations):
            scene = build_scene(ds, fitted, oid, grasp_window(k, grasps, ds.n_grasps), modality, camera)
            out.append((oid, k, scene, mesh))
    return out


def train_deform_stage(ds: Dataset, cfg: ExperimentConfig, run_dir, modality: str, grasps: int,
                       log=None) -> DeformModel:
    out = Path(run_dir) / "models" / model_name(modality, grasps)
    if (out / "manifest.json").is_file():
        return load_deform_model(out)
    camera = make_camera(cfg)
    meshes = {oid: ds.mesh(oid) for oid in ds.ids("train") + ds.ids("val")}
    train = [(s, m) for _, _, s, m in scenes_for(ds, run_dir, "train", modality, grasps,
                                                 ds.n_grasps, camera, meshes)]
    val = [(s, m) for _, _, s, m in scenes_for(ds, run_dir, "val", modality, grasps, 1, camera, meshes)]
    model = DeformModel(deform_config(cfg))
    tcfg = DeformTrainConfig(epochs=cfg.deform_epochs, lr=cfg.deform_lr, patience=cfg.deform_patience,
                             seed=cfg.seed, steps_per_epoch=len(ds.ids("train")), schedule=cfg.deform_schedule)
    t0 = time.time()
    model, hist = train_deform(model, train, tcfg, val, log)
    seconds = time.time() - t0
    save_checkpoint(out, model.store, {"deform_config": model.config.to_dict(), "modality": modality,
                                       "grasps": grasps, "history": hist})
    _write_timing(out, seconds)
    return model


def load_deform_model(directory) -> DeformModel:
    store, meta = load_checkpoint(directory)
    model = DeformModel(DeformConfig.from_dict(meta["deform_config"]))
    model.store.load_state(store.state())
    return model


# ============================================================= evaluation

def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def eval_global(model: DeformModel, ds: Dataset, run_dir, split: str, modality: str, grasps: int,
                cfg: ExperimentConfig, out_prefix=None) -> dict:
    """Per-class and overall mean Chamfer on ``split``; optionally written
    as ``<prefix>.json`` and ``<prefix>.csv``."""
    camera = make_camera(cfg)
    per_class = {}
    for oid, k, scene, mesh in scenes_for(ds, run_dir, split, modality, grasps, cfg.eval_rotations, camera):
        atlas = scene_atlas(scene, model.config)
        pred = deform(model, atlas, scene)
        c = mesh_chamfer(pred, mesh, cfg.eval_samples, seed=k) * cfg.report_scale
        per_class.setdefault(ds.meta(oid)["class"], []).append(c)
    report = {"split": split, "modality": modality, "grasps": grasps,
              "per_class": {k: float(np.mean(v)) for k, v in sorted(per_class.items())},
              "mean": float(np.mean([x for v in per_class.values() for x in v])),
              "n": int(sum(len(v) for v in per_class.values()))}
    if out_prefix is not None:
        out_prefix = Path(out_prefix)
        out_prefix.parent.mkdir(parents=True, exist_ok=True)
        _write_json(out_prefix.with_suffix(".json"), report)
        rows = [[k, f"{v:.9g}"] for k, v in report["per_class"].items()] + [["mean", f"{report['mean']:.9g}"]]
        _write_csv(out_prefix.with_suffix(".csv"), ["class", "chamfer"], rows)
    return report


def oracle_chamfer(mesh: TriMesh, n: int = 4000, seed: int = 0) -> float:
    """Target against itself through the same sampling path as eval_global
    but with identical samples on both sides (must be 0)."""
    from .geometry import sample_surface
    pts = sample_surface(mesh, n, seed)
    return chamfer(pts, pts)


def ring_points(pose: SensorPose, multiplier: int, per_unit: int = 10) -> np.ndarray:
    """Perimeter of a square of side ``multiplier * width`` centred on the
    sensor, in its plane: 4 * per_unit * multiplier evenly spaced points
    starting at a corner."""
    n_side = per_unit * multiplier
    half = 0.5 * multiplier * pose.width
    s = np.linspace(-half, half, n_side + 1)[:-1]
    corners = [(s, np.full(n_side, -half)), (np.full(n_side, half), s),
               (-s, np.full(n_side, half)), (np.full(n_side, -half), -s)]
    uv = np.concatenate([np.column_stack(c) for c in corners])
    return pose.center + uv[:, :1] * pose.tangent_u + uv[:, 1:] * pose.tangent_v


def project_along_normal(points: np.ndarray, normal: np.ndarray, mesh: TriMesh):
    """First intersection of the rays from ``points`` along ``normal``.
    Ring points lie in the sensor plane, outside the object, so the forward
    ray reaches the surface the sensor faces. Returns (hits, valid mask)."""
    n = np.ascontiguousarray(np.broadcast_to(normal, points.shape))
    t = raycast_batch(points, n, mesh)
    valid = np.isfinite(t)
    return points + np.where(valid, t, 0.0)[:, None] * n, valid


def eval_local_rings(model: DeformModel, ds: Dataset, run_dir, split: str, modality: str, grasps: int,
                     cfg: ExperimentConfig, out_prefix=None) -> dict:
    """Mean squared distance from ring points, projected onto the target
    along the sensor normal, to the predicted surface; per ring multiplier,
    over every successful touch site of the evaluated grasps."""
    camera = make_camera(cfg)
    sums = {k: [] for k in cfg.ring_multipliers}
    for oid, k, scene, mesh in scenes_for(ds, run_dir, split, modality, grasps, 1, camera):
        atlas = scene_atlas(scene, model.config)
        pred = deform(model, atlas, scene)
        pm = TriMesh(pred.positions(), loss_faces(pred), strict=False)
        dist = MeshDistance(pm)
        for g in grasp_window(k, grasps, ds.n_grasps):
            for tr in ds.touches(oid, g, load_arrays=False):
                if not tr.success:
                    continue
                for mult in cfg.ring_multipliers:
                    pts = ring_points(tr.pose, mult, cfg.ring_points_per_unit)
                    hits, ok = project_along_normal(pts, tr.pose.normal, mesh)
                    if ok.any():
                        sums[mult].extend((dist(hits[ok]) ** 2).tolist())
    report = {"split": split, "modality": modality, "grasps": grasps,
              "rings": {str(k): float(np.mean(v)) * cfg.report_scale for k, v in sums.items()},
              "points": {str(k): len(v) for k, v in sums.items()}}
    if out_prefix is not None:
        out_prefix = Path(out_prefix)
        out_prefix.parent.mkdir(parents=True, exist_ok=True)
        _write_json(out_prefix.with_suffix(".json"), report)
        _write_csv(out_prefix.with_suffix(".csv"), ["multiplier", "mean_sq_distance"],
                   [[k, f"{v:.9g}"] for k, v in report["rings"].items()])
    return report


def eval_multi_grasp(models: dict, ds: Dataset, run_dir, split: str, modality: str,
                     cfg: ExperimentConfig, out_prefix=None) -> dict:
    """Chamfer against grasp count; ``models`` maps grasp count to model."""
    curve = {}
    for g in sorted(models):
        curve[g] = eval_global(models[g], ds, run_dir, split, modality, g, cfg)["mean"]
    report = {"split": split, "modality": modality, "curve": {str(k): v for k, v in curve.items()}}
    if out_prefix is not None:
        out_prefix = Path(out_prefix)
        out_prefix.parent.mkdir(parents=True, exist_ok=True)
        _write_json(out_prefix.with_suffix(".json"), report)
        _write_csv(out_prefix.with_suffix(".csv"), ["grasps", "chamfer"],
                   [[k, f"{v:.9g}"] for k, v in curve.items()])
    return report


# ============================================================== experiment

def experiment_plan(cfg: ExperimentConfig) -> list[tuple[str, int]]:
    """(modality, grasp count) of every model the full protocol trains."""
    plan = [(m, 1) for m in MODALITIES]
    for m in ("touch", "unoccluded+touch"):
        plan += [(m, g) for g in cfg.grasp_counts if g != 1]
    return plan


def run_experiment(cfg: ExperimentConfig, run_dir, log=print) -> dict:
    """Every stage of the protocol; returns (and writes) the summary report."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(format_config(cfg))
    timings = {}
    t0 = time.time()
    if not (run_dir / "dataset" / "manifest.json").is_file():
        gen_dataset(cfg, run_dir / "dataset", log)
    ds = Dataset(run_dir / "dataset")
    if ds.config.digest(DATA_KEYS) != cfg.digest(DATA_KEYS):
        raise ValueError(f"{run_dir / 'dataset'} was generated with different data settings")
    timings["data"] = _recorded_seconds(run_dir / "dataset", time.time() - t0)
    t0 = time.time()
    depth_model = train_depth_stage(ds, cfg, run_dir / "depth", log)
    timings["depth"] = _recorded_seconds(run_dir / "depth", time.time() - t0)
    t0 = time.time()
    fit_summary = fit_stage(ds, depth_model, cfg, run_dir, log)
    timings["fit"] = _recorded_seconds(run_dir / "fitted", time.time() - t0)
    models = {}
    for modality, g in experiment_plan(cfg):
        t0 = time.time()
        log(f"training {model_name(modality, g)}")
        models[(modality, g)] = train_deform_stage(ds, cfg, run_dir, modality, g, log)
        name = model_name(modality, g)
        timings[f"train_{name}"] = _recorded_seconds(run_dir / "models" / name, time.time() - t0)
    reports = run_dir / "reports"
    t0 = time.time()
    glob = {m: eval_global(models[(m, 1)], ds, run_dir, "test", m, 1, cfg, reports / f"global_{model_name(m, 1)}")
            for m in MODALITIES}
    rings = {m: eval_local_rings(models[(m, 1)], ds, run_dir, "test", m, 1, cfg, reports / f"rings_{model_name(m, 1)}")
             for m in ("occluded", "occluded+touch", "unoccluded", "unoccluded+touch")}
    curves = {}
    for m in ("touch", "unoccluded+touch"):
        fam = {g: models[(m, g)] for g in cfg.grasp_counts}
        curves[m] = eval_multi_grasp(fam, ds, run_dir, "test", m, cfg, reports / f"grasps_{m.replace('+', '-')}")
    timings["eval"] = time.time() - t0
    summary = {"config_digest": cfg.digest(), "dataset": success_statistics(ds),
               "depth": evaluate_depth(depth_model, ds, "test"), "fit": fit_summary,
               "global": {m: r["mean"] for m, r in glob.items()},
               "global_per_class": {m: r["per_class"] for m, r in glob.items()},
               "rings": {m: r["rings"] for m, r in rings.items()},
               "grasps": {m: r["curve"] for m, r in curves.items()},
               "timings": timings}
    _write_json(reports / "summary.json", summary)
    return summary
