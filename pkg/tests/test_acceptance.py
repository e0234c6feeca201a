"""Acceptance criteria 1-10. Each test prints one PASS/FAIL line, and the
lines are repeated in the terminal summary.

Criteria 7-9 read the summary of a full desk-scale experiment, by default
``runs/main/reports/summary.json`` (override with ``TOUCHCHARTS_RUN``).
Produce it with ``touchcharts run --config configs/desk.txt --out runs/main``.
"""
import json
import os
import subprocess
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, randomize, small_config, small_scene, tiny_experiment_config
from touchcharts.charts import (build_comm_graph, build_sphere_atlas, init_unsuccessful_touch_chart,
                                make_touch_chart)
from touchcharts.config import format_config
from touchcharts.geometry import MeshDistance, chamfer, icosphere, raycast_batch, sphere_trace_batch
from touchcharts.nn import (CommGraphCSR, Tensor, chamfer_loss, conv2d, gcn_layer, grad_check,
                            perceptual_pool, sample_on_faces)
from touchcharts.reconstruct import (DeformModel, atlas_samples, deform_loss, fit_touch_chart,
                                     loss_faces, scene_atlas)
from touchcharts.shapes import SHAPE_CLASSES, random_object
from touchcharts.tactile import (default_rig, impression, look_at, make_sensor_grid,
                                 place_sensors_on_surface, simulate_touch, untouched_reading)

REPO = Path(__file__).resolve().parents[1]
RUN_DIR = Path(os.environ.get("TOUCHCHARTS_RUN", REPO / "runs" / "main"))
MARGIN = 0.03


def report(n, ok, detail):
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def brute_chamfer(a, b):
    d = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    return d.min(axis=1).mean() + d.min(axis=0).mean()


def weighted(out, seed):
    r = np.random.default_rng(seed + 100).normal(size=out.shape)
    return (out * r).sum()


# ---------------------------------------------------------------------- 1

def test_criterion_1_kd_chamfer_matches_brute_force():
    rng = np.random.default_rng(2024)
    t0 = time.time()
    worst = 0.0
    for _ in range(100):
        a = rng.normal(size=(rng.integers(1, 257), 3))
        b = rng.normal(size=(rng.integers(1, 257), 3))
        worst = max(worst, abs(chamfer(a, b) - brute_chamfer(a, b)))
    dt = time.time() - t0
    report(1, worst <= 1e-9 and dt < 10, f"max |kd - brute| = {worst:.2e} over 100 pairs in {dt:.2f}s")


# ---------------------------------------------------------------------- 2

def test_criterion_2_gradient_suite():
    t0 = time.time()
    errs = {}
    rng = np.random.default_rng(7)
    ring = np.stack([np.arange(8), (np.arange(8) + 1) % 8], axis=1)
    g = CommGraphCSR.from_edges(ring, 8)
    errs["gcn_layer"] = grad_check(lambda h, w, b: weighted(gcn_layer(h, g, w, b, "identity"), 0),
                                   [rng.normal(size=(8, 4)), rng.normal(size=(4, 3)), rng.normal(size=3)])
    errs["conv2d"] = max(
        grad_check(lambda x, k, b: weighted(conv2d(x, k, b, stride=s), s),
                   [rng.normal(size=(2, 7, 6)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)])
        for s in (1, 2))
    cam = look_at([0, -3, 0], fov_deg=40, size=16)
    errs["perceptual_pool"] = grad_check(
        lambda v, m1, m2: weighted(perceptual_pool([m1, m2], v, cam), 1),
        [rng.uniform(-0.3, 0.3, size=(6, 3)), rng.normal(size=(2, 16, 16)), rng.normal(size=(3, 8, 8))],
        step=1e-6)
    faces = np.array([[0, 1, 2], [1, 3, 2], [2, 3, 4]])
    fidx, w = rng.integers(0, 3, size=12), rng.dirichlet(np.ones(3), size=12)
    target = rng.normal(size=(15, 3))
    errs["chamfer_path"] = grad_check(lambda v: chamfer_loss(sample_on_faces(v, faces, fidx, w), target),
                                      [rng.normal(size=(5, 3))], step=1e-7)
    # image -> CNN -> pooling -> 3 x GCN -> sampling -> Chamfer, 6 vision charts + 1 touch chart
    model = randomize(DeformModel(small_config()), scale=0.4, seed=0)
    scene = small_scene(n_success=1)
    atlas = scene_atlas(scene, model.config)
    tgt = rng.normal(size=(80, 3)) * 0.8
    samples = atlas_samples(atlas.positions(), loss_faces(atlas), 80, rng)
    names = model.store.names()
    errs["full_deform_loss"] = grad_check(
        lambda *ts: deform_loss(model, atlas, scene, tgt, params=dict(zip(names, ts)), samples=samples),
        [model.store[n].data.copy() for n in names], step=1e-6, max_elements=8)
    dt = time.time() - t0
    ok = all(v < 1e-4 for k, v in errs.items() if k != "full_deform_loss") and errs["full_deform_loss"] < 1e-3
    report(2, ok and dt < 120, ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f" in {dt:.1f}s")


# ---------------------------------------------------------------------- 3

def test_criterion_3_sphere_trace_matches_exact_casting():
    mesh = icosphere(3, radius=0.4)
    eps = 1e-5
    poses = place_sensors_on_surface(mesh, 50, seed=3, failure_fraction=0.4)
    rng = np.random.default_rng(3)
    origins, dirs = [], []
    for p in poses:
        grid = make_sensor_grid(p, 100)
        idx = rng.choice(len(grid), 10, replace=False)
        origins.append(grid[idx])
        dirs.append(np.broadcast_to(p.normal, (10, 3)))
    o, d = np.concatenate(origins), np.concatenate(dirs)
    max_t = 2 * poses[0].gel_depth
    t0 = time.time()
    traced = sphere_trace_batch(o, d, mesh, max_t, eps)
    dt = time.time() - t0
    exact = raycast_batch(o, d, mesh)
    exact_hit = exact <= max_t
    traced_hit = np.isfinite(traced)
    agree = np.array_equal(exact_hit, traced_hit)
    err = np.abs(traced[exact_hit] - exact[exact_hit]).max() if exact_hit.any() else 0.0
    ok = agree and err <= 2 * eps and dt < 30 and len(o) == 500
    report(3, ok, f"{exact_hit.sum()} hits / {len(o)} rays, hit/miss agree={agree}, "
                  f"max |dt| = {err:.2e} (2 eps = {2 * eps:.0e}) in {dt:.2f}s")


# ---------------------------------------------------------------------- 4

def test_criterion_4_tactile_invariants():
    rng = np.random.default_rng(4)
    eps, res = 1e-5, 100
    canonical = untouched_reading(default_rig(res), res)
    n_touch = n_miss = 0
    worst = 0.0
    exact_imp = untouched_ok = True
    for kind in SHAPE_CLASSES:
        mesh, _ = random_object(kind, rng)
        dist = MeshDistance(mesh)
        poses = place_sensors_on_surface(mesh, 6, int(rng.integers(2 ** 31)), failure_fraction=0.35)
        for p in poses:
            t = simulate_touch(mesh, p, res=res, eps=eps)
            exact_imp &= np.array_equal(t.impression, np.maximum(0.0, p.gel_depth - t.depth))
            exact_imp &= np.array_equal(impression(t.depth, p.gel_depth), t.impression)
            if t.success:
                n_touch += 1
                worst = max(worst, dist(t.local_cloud).max())
            else:
                n_miss += 1
                untouched_ok &= np.array_equal(t.reading, canonical)
    ok = worst <= 2 * eps and exact_imp and untouched_ok and n_touch > 0 and n_miss > 0
    report(4, ok, f"{n_touch} touches: max cloud-to-mesh {worst:.2e} (<= {2 * eps:.0e}); "
                  f"{n_miss} untouched bit-identical={untouched_ok}; D'=ReLU(w-D) exact={exact_imp}")


# ---------------------------------------------------------------------- 5

def test_criterion_5_planar_fits_converge():
    rng = np.random.default_rng(5)
    results = []
    for i in range(20):
        n = rng.normal(size=3)
        pose_center = rng.normal(size=3) * 0.3
        from touchcharts.tactile import SensorPose
        pose = SensorPose.facing(pose_center, n, angle=rng.uniform(0, 2 * np.pi))
        uv = rng.uniform(-0.5, 0.5, size=(1000, 2)) * pose.width
        depth = rng.uniform(0.0005, 0.003)
        target = (pose.center + uv[:, :1] * pose.tangent_u + uv[:, 1:] * pose.tangent_v
                  + (pose.gel_depth - depth) * pose.normal)
        res = fit_touch_chart(target, pose, lr=0.003, halt=6e-4, max_iters=2000, seed=i)
        results.append((res.loss, res.iterations, res.converged))
    losses = np.array([r[0] for r in results])
    iters = np.array([r[1] for r in results])
    ok = all(r[2] for r in results) and losses.max() < 6e-4 and iters.max() <= 2000
    report(5, ok, f"20 planar fits: max loss {losses.max():.5e} (< 6e-4), iterations "
                  f"{iters.min()}-{iters.max()} (<= 2000)")


# ---------------------------------------------------------------------- 6

def test_criterion_6_atlas_structure():
    from touchcharts.tactile import SensorPose
    touches = []
    for k in range(4):
        d = np.array([np.cos(k), np.sin(k), 0.2])
        d /= np.linalg.norm(d)
        pose = SensorPose.facing(1.1 * d, -d)
        touches.append(make_touch_chart(pose) if k % 2 == 0 else init_unsuccessful_touch_chart(pose))
    atlas = build_comm_graph(build_sphere_atlas(95, touches))
    vision = [atlas.charts[i] for i in atlas.vision_charts]
    touch = [atlas.charts[i] for i in atlas.touch_charts]
    shapes_ok = (len(vision) == 95 and all(c.vertices.shape == (19, 3) and c.faces.shape == (24, 3) for c in vision)
                 and all(c.vertices.shape == (81, 3) and c.faces.shape == (128, 3) for c in touch))
    e = atlas.comm_edges
    g = CommGraphCSR.from_edges(e, atlas.n_vertices)
    sym = g.is_symmetric()
    no_self = bool(np.all(e[:, 0] != e[:, 1]))
    vb = atlas.vision_boundary_ids()
    rule_c = all(set(vb.tolist()) <= set(g.neighbors(c).tolist()) for c in atlas.touch_center_ids())
    ok = shapes_ok and sym and no_self and rule_c and len(vb) == 95 * 12
    report(6, ok, f"95 vision charts (19, 24) and touch charts (81, 128): {shapes_ok}; symmetric={sym}; "
                  f"self-loop-free={no_self}; every touch centre linked to all {len(vb)} vision boundary "
                  f"vertices={rule_c}")


# ------------------------------------------------------------------ 7 - 9

def load_summary():
    path = RUN_DIR / "reports" / "summary.json"
    if not path.is_file():
        pytest.fail(f"no experiment summary at {path}; run "
                    f"`touchcharts run --config configs/desk.txt --out {RUN_DIR}` first")
    return json.loads(path.read_text())


def lower_by(a, b, margin):
    """a is below b by at least ``margin`` relative to b."""
    return a <= (1.0 - margin) * b


def test_criterion_7_modality_ordering():
    s = load_summary()
    c = s["global"]
    checks = {
        "occluded+touch < occluded": lower_by(c["occluded+touch"], c["occluded"], MARGIN),
        "unoccluded+touch < unoccluded": lower_by(c["unoccluded+touch"], c["unoccluded"], MARGIN),
        "occluded >= unoccluded": c["occluded"] >= c["unoccluded"],
        "occluded+touch >= unoccluded+touch": c["occluded+touch"] >= c["unoccluded+touch"],
        "touch worst": all(lower_by(c[m], c["touch"], MARGIN) for m in c if m != "touch"),
    }
    table = ", ".join(f"{m} {v:.4g}" for m, v in c.items())
    failed = [k for k, v in checks.items() if not v]
    hours = sum(s["timings"].values()) / 3600
    report(7, not failed and hours <= 2.0,
           f"test Chamfer {table}; total {hours:.2f} h" + (f"; failed: {failed}" if failed else ""))


def test_criterion_8_multi_grasp_trend():
    s = load_summary()
    t = s["grasps"]["touch"]
    vt = s["grasps"]["unoccluded+touch"]
    gain_t = 1.0 - t["5"] / t["1"]
    gain_vt = 1.0 - vt["5"] / vt["1"]
    report(8, gain_t >= 0.10 and gain_vt >= 0.05,
           f"touch {t['1']:.4g} -> {t['5']:.4g} ({gain_t:.1%}, need 10%); "
           f"unoccluded+touch {vt['1']:.4g} -> {vt['5']:.4g} ({gain_vt:.1%}, need 5%)")


def monotone_with_one_inversion(values, tol=0.05):
    drops = [(a, b) for a, b in zip(values, values[1:]) if b < a]
    return len(drops) == 0 or (len(drops) == 1 and drops[0][1] >= (1 - tol) * drops[0][0])


def test_criterion_9_local_ring_trend():
    s = load_summary()
    r = s["rings"]
    details, ok = [], True
    for vision in ("occluded", "unoccluded"):
        touch, base = r[f"{vision}+touch"], r[vision]
        ratio = touch["1"] / base["1"]
        mono = monotone_with_one_inversion([touch[k] for k in sorted(touch, key=int)])
        ok &= ratio < 0.6 and mono
        details.append(f"{vision}: k=1 ratio {ratio:.2e} (< 0.6), touch curve non-decreasing={mono}")
    report(9, ok, "; ".join(details))


# --------------------------------------------------------------------- 10

def _cli(args, env):
    return subprocess.run([sys.executable, "-m", "touchcharts.cli", *args], env=env,
                          capture_output=True, text=True)


def _tree_bytes(root: Path) -> dict:
    # timing.json holds wall-clock seconds only
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "timing.json"}


def test_criterion_10_determinism(tmp_path):
    env = dict(os.environ, OMP_NUM_THREADS="1", OPENBLAS_NUM_THREADS="1", MKL_NUM_THREADS="1",
               PYTHONWARNINGS="ignore")
    cfg_path = tmp_path / "tiny.txt"
    cfg_path.write_text(format_config(tiny_experiment_config(n_objects=4)))
    runs = []
    for k in range(2):
        run = tmp_path / f"run{k}"
        steps = [["gen-data", "--config", str(cfg_path), "--out", str(run / "dataset")],
                 ["train-depth", "--config", str(cfg_path), "--run", str(run)],
                 ["fit-touch", "--config", str(cfg_path), "--run", str(run)],
                 ["train-deform", "--config", str(cfg_path), "--run", str(run), "--modality",
                  "unoccluded+touch", "--grasps", "1"]]
        for step in steps:
            p = _cli(step, env)
            assert p.returncode == 0, p.stderr
        oid = json.loads((run / "dataset" / "manifest.json").read_text())["objects"][0]["id"]
        p = _cli(["predict", "--config", str(cfg_path), "--run", str(run), "--model", "unoccluded-touch_g1",
                  "--object", oid, "--out", str(run / "pred")], env)
        assert p.returncode == 0, p.stderr
        runs.append(run)
    groups = {"gen-data": "dataset", "train": "models", "predict": "pred"}
    same = {}
    for name, sub in groups.items():
        a, b = _tree_bytes(runs[0] / sub), _tree_bytes(runs[1] / sub)
        same[name] = bool(a) and a == b
    a, b = _tree_bytes(runs[0] / "depth"), _tree_bytes(runs[1] / "depth")
    same["train"] &= bool(a) and a == b
    a, b = _tree_bytes(runs[0] / "fitted"), _tree_bytes(runs[1] / "fitted")
    same["train"] &= bool(a) and a == b
    report(10, all(same.values()), ", ".join(f"{k} byte-identical={v}" for k, v in same.items()))
