import warnings

import numpy as np
import pytest

from conftest import randomize, small_config, small_scene
from touchcharts.charts import TOUCH_VERTS, build_comm_graph, make_touch_chart
from touchcharts.geometry import chamfer, icosphere
from touchcharts.nn import Tensor, grad_check
from touchcharts.reconstruct import (DeformConfig, DeformModel, DeformTrainConfig, DepthPredictor,
                                     DepthTrainConfig, SceneInput, TouchInput, atlas_samples, deform,
                                     deform_loss, deform_positions, depth_to_cloud, fit_touch_chart,
                                     loss_faces, predict, predict_impression, scene_atlas, touch_charts_for,
                                     touch_mask, train_deform, train_depth_predictor)
from touchcharts.tactile import (SensorPose, default_rig, gel_grid, place_sensors_on_surface,
                                 simulate_touch, untouched_reading)


def plane_target(pose, n=900, seed=0, depth=0.001):
    """Points on a plane parallel to the sensor, ``depth`` toward it from the gel."""
    rng = np.random.default_rng(seed)
    uv = rng.uniform(-0.5, 0.5, size=(n, 2)) * pose.width
    return (pose.center + uv[:, :1] * pose.tangent_u + uv[:, 1:] * pose.tangent_v
            + (pose.gel_depth - depth) * pose.normal)


# ----------------------------------------------------------- touch stage

def test_touch_mask_threshold():
    u = untouched_reading(default_rig(10), 10)
    r = u.copy()
    r[2, 3] += np.array([0.02, 0.02, 0.02])   # 1.2e-3 > 1e-3
    r[5, 5] += np.array([0.01, 0.01, 0.01])   # 3e-4 below threshold
    m = touch_mask(r, u)
    assert m[2, 3] and not m[5, 5] and m.sum() == 1


def test_depth_predictor_untouched_is_exactly_zero():
    model = DepthPredictor(channels=4, res=24, seed=3)
    out = predict_impression(model, model.untouched)
    assert out.shape == (24, 24) and np.all(out == 0.0)
    with pytest.raises(ValueError):
        predict_impression(model, np.zeros((10, 10, 3)))


def test_depth_loss_empty_mask_is_zero():
    model = DepthPredictor(channels=4, res=24)
    assert float(model.loss(model.untouched, np.zeros((24, 24))).data) == 0.0


def test_depth_training_reduces_loss():
    m = icosphere(3, radius=0.3)
    poses = place_sensors_on_surface(m, 32, seed=0, width=0.03)
    pairs = []
    for p in poses:
        t = simulate_touch(m, p, rig=default_rig(24), res=24)
        pairs.append((t.reading, t.impression))
    model, hist = train_depth_predictor(pairs, DepthTrainConfig(steps=50, batch=2, lr=1e-3, channels=4),
                                        res=24, width=0.03)
    assert np.mean(hist[-10:]) < np.mean(hist[:10])
    out = predict_impression(model, pairs[0][0])
    assert out.min() >= 0.0
    with pytest.raises(ValueError):
        train_depth_predictor([], DepthTrainConfig(steps=1))


def test_depth_to_cloud_zero_is_gel_grid():
    pose = SensorPose.facing([0, 0, 0.5], [0, 0, -1])
    assert np.array_equal(depth_to_cloud(np.zeros((12, 12)), pose), gel_grid(pose, 12))


def test_ground_truth_impression_reproduces_local_cloud():
    m = icosphere(3, radius=0.3)
    pose = place_sensors_on_surface(m, 1, seed=2)[0]
    t = simulate_touch(m, pose, res=40)
    cloud = depth_to_cloud(t.impression, pose)[t.impression.reshape(-1) > 0]
    assert chamfer(cloud, t.local_cloud) == 0.0


@pytest.mark.parametrize("seed", range(4))
def test_fit_planar_target_converges(seed):
    pose = SensorPose.facing([0.1 * seed, 0, 0], [0, 1, -1], angle=seed)
    res = fit_touch_chart(plane_target(pose, seed=seed), pose, seed=seed)
    assert res.converged and res.loss < 6e-4 and res.iterations <= 2000
    assert res.chart.success and res.chart.vertices.shape == (81, 3)
    assert not res.warning


def test_fit_flags_non_convergence():
    pose = SensorPose.facing([0, 0, 0], [0, 0, -1])
    rng = np.random.default_rng(0)
    target = pose.center + rng.normal(size=(400, 3)) * pose.width  # a blob, not a sheet
    with pytest.warns(RuntimeWarning):
        res = fit_touch_chart(target, pose, max_iters=5)
    assert not res.converged and res.warning and res.iterations == 5
    assert res.loss == min(res.history)
    with pytest.raises(ValueError):
        fit_touch_chart(np.zeros((0, 3)), pose)


def test_touch_charts_for_falls_back_to_fingertip():
    model = DepthPredictor(channels=4, res=24)
    pose = SensorPose.facing([0, 0, 0], [0, 0, -1])
    t = TouchInput(pose, True, None, model.untouched)   # claims success but no contact
    out = touch_charts_for(model, [t, TouchInput(pose, False)])
    assert [o.success for o in out] == [False, False]
    assert all(o.chart.area() == 0.0 for o in out)
    with pytest.raises(ValueError):
        touch_charts_for(None, [TouchInput(pose, True)])


# ------------------------------------------------------------ deform stage

def test_deform_model_feature_width():
    model = DeformModel(DeformConfig())
    assert model.feature_dim == model.image_feature_dim + 4
    assert model.store["gcn0/w"].shape == (model.feature_dim, 32)
    assert model.store["gcn0/ws"].shape == (model.feature_dim, 32)
    assert "gcn3/w" not in model.store.params and np.all(model.store["gcn3/ws"].data == 0.0)
    plain = DeformModel(DeformConfig(zero_neighbor=False))
    assert plain.store["gcn0/w"].shape == (plain.feature_dim, 64) and "gcn0/ws" not in plain.store.params
    assert np.all(plain.store["gcn3/w"].data == 0.0)


def test_own_feature_channels_ignore_the_graph():
    from touchcharts.reconstruct import _gcn_block
    from touchcharts.nn import CommGraphCSR
    model = randomize(DeformModel(small_config()))
    p = model.store.params
    h = Tensor(np.random.default_rng(0).normal(size=(10, model.feature_dim)))
    ring = np.stack([np.arange(10), (np.arange(10) + 1) % 10], 1)
    hub = np.concatenate([ring, np.stack([np.zeros(9, int), np.arange(1, 10)], 1)])
    a = _gcn_block(h, p, 0, CommGraphCSR.from_edges(ring, 10).normalized(), "relu").data
    b = _gcn_block(h, p, 0, CommGraphCSR.from_edges(hub, 10).normalized(), "relu").data
    half = p["gcn0/w"].shape[1]
    assert np.array_equal(a[:, half:], b[:, half:]) and not np.allclose(a[:, :half], b[:, :half])


@pytest.mark.parametrize("grasps", [1, 2])
def test_default_atlas_vertex_count(grasps):
    scene = small_scene(n_success=2 * grasps, n_fail=2 * grasps, size=64)
    atlas = scene_atlas(scene, DeformConfig())
    assert atlas.n_vertices == 95 * 19 + TOUCH_VERTS * 4 * grasps


def test_zero_final_layer_leaves_sphere_unchanged():
    model = DeformModel(small_config())
    scene = small_scene(n_success=1, n_fail=1)
    atlas = scene_atlas(scene, model.config)
    out = deform(model, atlas, scene)
    assert np.array_equal(out.positions(), atlas.positions())


def test_exactly_three_iterations_and_touch_charts_fixed():
    model = randomize(DeformModel(small_config()))
    scene = small_scene(n_success=2, n_fail=1)
    atlas = scene_atlas(scene, model.config)
    counter = []
    out = deform(model, atlas, scene, counter)
    assert len(counter) == 3
    for i in atlas.touch_charts:
        assert np.array_equal(out.charts[i].vertices, atlas.charts[i].vertices)
    assert not np.allclose(out.positions()[:6 * 19], atlas.positions()[:6 * 19])


def test_deform_is_deterministic():
    scene = small_scene(n_success=1, n_fail=1)
    runs = []
    for _ in range(2):
        model = randomize(DeformModel(small_config()))
        runs.append(deform(model, scene_atlas(scene, model.config), scene).positions().tobytes())
    assert runs[0] == runs[1]


def test_communication_switch_changes_graph():
    scene = small_scene(n_success=1)
    with_c = scene_atlas(scene, small_config())
    without = scene_atlas(scene, small_config(communication=False))
    assert len(without.comm_edges) < len(with_c.comm_edges)


def test_loss_faces_exclude_fingertips():
    scene = small_scene(n_success=1, n_fail=2)
    atlas = scene_atlas(scene, small_config())
    faces = loss_faces(atlas)
    assert len(faces) == 6 * 24 + 128
    fidx, w = atlas_samples(atlas.positions(), faces, 100, np.random.default_rng(0))
    assert np.allclose(w.sum(1), 1.0) and fidx.max() < len(faces)


@pytest.mark.parametrize("seed", range(2))
def test_full_deform_loss_gradient(seed):
    """Image -> CNN -> pooling -> GCN x 3 -> sampling -> Chamfer on a
    6-chart atlas with one touch chart and an 8 x 8 image."""
    model = randomize(DeformModel(small_config(seed=seed)), scale=0.4, seed=seed)
    scene = small_scene(n_success=1, seed=seed)
    atlas = scene_atlas(scene, model.config)
    rng = np.random.default_rng(seed)
    target = rng.normal(size=(80, 3)) * 0.8
    faces = loss_faces(atlas)
    samples = atlas_samples(atlas.positions(), faces, 80, rng)
    names = model.store.names()

    def f(*tensors):
        return deform_loss(model, atlas, scene, target, params=dict(zip(names, tensors)), samples=samples)

    err = grad_check(f, [model.store[n].data.copy() for n in names], step=1e-6, max_elements=6, seed=seed)
    assert err < 1e-3


def test_train_deform_reduces_loss_and_restores_best():
    mesh = icosphere(2, radius=0.6)
    scene = small_scene(n_success=0, n_fail=1)
    scene = SceneInput(scene.image, scene.touches, scene.camera)
    model = DeformModel(small_config(n_pred_samples=200, n_target_samples=200))
    before = chamfer(atlas_points(model, scene), mesh.vertices)
    model, hist = train_deform(model, [(scene, mesh)], DeformTrainConfig(epochs=12, lr=1e-2, patience=12),
                               val_dataset=[(scene, mesh)])
    after = chamfer(atlas_points(model, scene), mesh.vertices)
    assert after < before
    assert hist["best_epoch"] == int(np.argmin(hist["val"]))
    with pytest.raises(ValueError):
        train_deform(model, [])


def test_learning_rate_schedules():
    const = DeformTrainConfig(lr=0.01)
    assert const.lr_at(0, 10) == const.lr_at(9, 10) == 0.01
    cos = DeformTrainConfig(lr=0.01, schedule="cosine")
    assert cos.lr_at(0, 10) == 0.01 and cos.lr_at(5, 10) == pytest.approx(0.005) and cos.lr_at(10, 10) == 0.0
    assert all(cos.lr_at(s, 10) >= cos.lr_at(s + 1, 10) for s in range(10))
    with pytest.raises(ValueError):
        DeformTrainConfig(schedule="step").lr_at(0, 10)


def atlas_points(model, scene):
    return deform(model, scene_atlas(scene, model.config), scene).positions()[:6 * 19]


def test_predict_pipeline_shapes():
    model = DeformModel(small_config())
    scene = small_scene(n_success=1, n_fail=1)
    atlas, mesh = predict(model, scene)
    assert mesh.n_faces == 6 * 24 + 2 * 128
    assert len(mesh.vertices) == atlas.n_vertices
