import numpy as np
import pytest

from touchcharts.charts import init_unsuccessful_touch_chart, make_touch_chart
from touchcharts.reconstruct import DeformConfig, DeformModel, SceneInput, TouchInput
from touchcharts.tactile import SensorPose, look_at


def small_config(**kw):
    base = dict(cnn_widths=(2, 3, 3, 3, 3), hidden=5, gcn_layers=2, n_vision=6, image_size=8,
                n_pred_samples=60, n_target_samples=60, seed=0)
    base.update(kw)
    return DeformConfig(**base)


def small_scene(n_success=1, n_fail=0, seed=0, size=8):
    rng = np.random.default_rng(seed)
    cam = look_at(2.5 * np.array([0.8, -0.5, 0.33]), fov_deg=40, size=size)
    touches = []
    for k in range(n_success + n_fail):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        pose = SensorPose.facing(0.9 * d, -d, angle=float(k), width=0.1)
        if k < n_success:
            touches.append(TouchInput(pose, True, make_touch_chart(pose)))
        else:
            touches.append(TouchInput(pose, False, init_unsuccessful_touch_chart(pose)))
    image = rng.random((size, size, 3))
    return SceneInput(image, touches, cam)


def randomize(model, scale=0.3, seed=1):
    """Non-zero weights everywhere (the last GCN layer starts at zero)."""
    rng = np.random.default_rng(seed)
    for name, t in model.store.params.items():
        t.data = rng.normal(0.0, scale, size=t.shape)
    return model


@pytest.fixture
def tiny_model():
    return DeformModel(small_config())


def tiny_experiment_config(**kw):
    from touchcharts.config import ExperimentConfig
    base = dict(n_objects=5, classes=("sphere", "box"), grasps_per_object=2, split_train=0.6,
                split_val=0.2, split_test=0.2, image_size=16, sensor_res=24, depth_steps=4,
                depth_batch=2, depth_channels=3, depth_max_pairs=12, depth_lr=1e-3, fit_max_iters=20,
                fit_samples=200, deform_epochs=1, deform_hidden=6, deform_gcn_layers=2,
                n_pred_samples=150, n_target_samples=150, eval_samples=200, eval_rotations=1,
                ring_multipliers=(1, 2), grasp_counts=(1, 2), deform_lr=1e-3)
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    import warnings
    from touchcharts.harness import run_experiment
    run = tmp_path_factory.mktemp("tiny_run")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        summary = run_experiment(tiny_experiment_config(), run, log=lambda m: None)
    return run, summary


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
