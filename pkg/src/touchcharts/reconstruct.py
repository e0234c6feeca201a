"""Local touch-chart prediction and global chart deformation.

Stage A turns a touch reading into an impression map with a small
encoder/decoder CNN, lifts it to a point cloud above the sensor grid and fits
a 9 x 9 chart to it. Stage B deforms a sphere of vision charts around the
touch charts with a graph network fed by image features.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .charts import (Atlas, Chart, atlas_to_mesh, build_comm_graph, build_sphere_atlas,
                     enforce_touch_positions, init_unsuccessful_touch_chart, make_touch_chart)
from .geometry import (TriMesh, chamfer, chamfer_with_grad, sample_barycentric, sample_surface,
                       scatter_rows)
from .nn import (Adam, CommGraphCSR, ParamStore, Tensor, adam_step, avg_pool2, chamfer_loss,
                 concat, conv2d, gcn_layer, masked_mse, perceptual_pool, relu, resize_nearest,
                 sample_on_faces, where)
from .tactile import CameraModel, SensorPose, default_rig, gel_grid, untouched_reading

MASK_THRESHOLD = 1e-3
FIT_LR = 3e-3
FIT_HALT = 6e-4
DEPTH_LR = 5e-5
DEFORM_LR = 3e-5


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


# =================================================================== stage A

def touch_mask(reading: np.ndarray, untouched: np.ndarray, threshold: float = MASK_THRESHOLD) -> np.ndarray:
    """Pixels whose squared colour difference to the untouched reading
    (summed over channels) exceeds ``threshold``."""
    return ((np.asarray(reading) - untouched) ** 2).sum(axis=-1) > threshold


class DepthPredictor:
    """Encoder/decoder CNN mapping a reading (H x W x 3) to an impression map
    (H x W) in world units. The input is the difference to the untouched
    reading and every convolution is bias-free, so the untouched reading
    maps to exactly zero. The head is ReLU scaled by the gel depth, so
    outputs are never negative."""

    def __init__(self, channels: int = 12, gel_depth: float = 0.004, res: int = 100,
                 width: float = 0.03, seed: int = 0):
        self.channels, self.gel_depth, self.res, self.width = channels, gel_depth, res, width
        self.untouched = untouched_reading(default_rig(res), res, width)
        rng = np.random.default_rng(seed)
        c = channels
        self.store = ParamStore()
        specs = [("e1", 3, c), ("e2", c, 2 * c), ("e3", 2 * c, 2 * c), ("e4", 2 * c, 2 * c),
                 ("d3", 4 * c, 2 * c), ("d2", 4 * c, 2 * c), ("d1", 3 * c, c), ("head", c, 1)]
        for name, cin, cout in specs:
            self.store.add(f"{name}/k", _he(rng, (cout, cin, 3, 3), cin * 9))

    def _conv(self, p, name, x, stride=1, act=True):
        y = conv2d(x, p[f"{name}/k"], None, stride=stride)
        return relu(y) if act else y

    def forward(self, reading: np.ndarray, params=None) -> Tensor:
        r = np.asarray(reading, dtype=np.float64)
        if r.shape != (self.res, self.res, 3):
            raise ValueError(f"reading shape {r.shape} != ({self.res}, {self.res}, 3)")
        p = self.store.params if params is None else params
        x = Tensor(((r - self.untouched) * 4.0).transpose(2, 0, 1))
        e1 = self._conv(p, "e1", x)
        e2 = self._conv(p, "e2", e1, stride=2)
        e3 = self._conv(p, "e3", e2, stride=2)
        e4 = self._conv(p, "e4", e3, stride=2)
        d3 = self._conv(p, "d3", concat([resize_nearest(e4, e3.shape[1:]), e3]))
        d2 = self._conv(p, "d2", concat([resize_nearest(d3, e2.shape[1:]), e2]))
        d1 = self._conv(p, "d1", concat([resize_nearest(d2, e1.shape[1:]), e1]))
        out = relu(self._conv(p, "head", d1, act=False))
        return out.reshape(self.res, self.res) * self.gel_depth

    def loss(self, reading, impression_true, params=None) -> Tensor:
        """Masked squared error in units of the gel depth."""
        mask = touch_mask(reading, self.untouched)
        pred = self.forward(reading, params) * (1.0 / self.gel_depth)
        return masked_mse(pred, np.asarray(impression_true) / self.gel_depth, mask)


def predict_impression(model: DepthPredictor, reading) -> np.ndarray:
    frozen = {k: Tensor(t.data) for k, t in model.store.params.items()}
    return model.forward(reading, frozen).data.copy()


@dataclass
class DepthTrainConfig:
    steps: int = 1500
    batch: int = 4
    lr: float = DEPTH_LR
    channels: int = 12
    seed: int = 0


def train_depth_predictor(dataset, config: DepthTrainConfig | None = None, gel_depth: float = 0.004,
                          res: int = 100, width: float = 0.03, log=None):
    """Fit a DepthPredictor on ``(reading, impression)`` pairs. Returns the
    model and the per-step loss history."""
    config = config or DepthTrainConfig()
    data = list(dataset)
    if not data:
        raise ValueError("empty dataset")
    model = DepthPredictor(config.channels, gel_depth, res, width, config.seed)
    rng = np.random.default_rng(config.seed + 1)
    history = []
    for step in range(config.steps):
        idx = rng.integers(0, len(data), size=config.batch)
        model.store.zero_grad()
        total = 0.0
        for i in idx:
            r, d = data[i]
            loss = model.loss(r, d) * (1.0 / config.batch)
            loss.backward()
            total += float(loss.data)
        adam_step(model.store, lr=config.lr)
        history.append(total)
        if log is not None and (step % 100 == 0 or step == config.steps - 1):
            log(f"depth step {step} loss {np.mean(history[-100:]):.5f}")
    return model, history


def depth_to_cloud(impression: np.ndarray, pose: SensorPose) -> np.ndarray:
    """Every gel-grid point displaced toward the sensor by the impression
    depth; zero impression leaves the grid unchanged."""
    imp = np.asarray(impression, dtype=np.float64)
    return gel_grid(pose, imp.shape[0]) - imp.reshape(-1, 1) * pose.normal


# ----------------------------------------------------------- chart fitting

@dataclass
class FitResult:
    chart: Chart
    loss: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list, repr=False)

    @property
    def warning(self) -> bool:
        return not self.converged


def _chart_sample(vertices, faces, n, rng):
    tri = vertices[faces]
    areas = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    if areas.sum() <= 0:
        areas = np.ones(len(faces))
    return sample_barycentric(areas, n, rng)


def fit_touch_chart(target, pose: SensorPose, lr: float = FIT_LR, halt: float = FIT_HALT,
                    max_iters: int = 2000, n_samples: int = 2000, max_target: int = 1500,
                    seed: int = 0) -> FitResult:
    """Optimise the vertices of a sensor-sized chart so that points sampled on
    it match ``target`` in Chamfer distance.

    Coordinates are expressed in the sensor frame scaled by the sensor
    width, so ``halt`` does not depend on the sensor size. Points are
    resampled every iteration. Stops once the loss drops below ``halt``;
    otherwise returns the best iterate with ``converged=False``.
    """
    target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if len(target) == 0:
        raise ValueError("empty target cloud")
    rng = np.random.default_rng(seed)
    if len(target) > max_target:
        target = target[np.sort(rng.choice(len(target), max_target, replace=False))]
    chart = make_touch_chart(pose)
    origin, scale = pose.center, pose.width
    tgt = (target - origin) / scale
    verts = (chart.vertices - origin) / scale
    opt = Adam(verts.shape, lr)
    best, best_loss, history = verts.copy(), np.inf, []
    it = 0
    for it in range(1, max_iters + 1):
        fidx, w = _chart_sample(verts, chart.faces, n_samples, rng)
        tri = chart.faces[fidx]
        pts = np.einsum("nk,nkd->nd", w, verts[tri])
        loss, g = chamfer_with_grad(pts, tgt)
        history.append(loss)
        if loss < best_loss:
            best, best_loss = verts.copy(), loss
        if loss < halt:
            break
        gv = sum(scatter_rows(tri[:, k], w[:, k:k + 1] * g, len(verts)) for k in range(3))
        verts = opt.step(verts, gv)
    converged = best_loss < halt
    if not converged:
        warnings.warn(f"touch chart fit stopped at loss {best_loss:.2e} after {it} iterations",
                      RuntimeWarning, stacklevel=2)
    out = replace(chart, vertices=best * scale + origin, success=True)
    return FitResult(out, float(best_loss), it, converged, history)


# =================================================================== stage B

@dataclass(frozen=True)
class TouchInput:
    """One sensor of a grasp: its pose, success bit, optional reading and
    the chart standing in for it (fitted, or a collapsed fingertip)."""
    pose: SensorPose
    success: bool
    chart: Chart | None = None
    reading: np.ndarray | None = field(default=None, repr=False, compare=False)


@dataclass(frozen=True)
class SceneInput:
    image: np.ndarray | None
    touches: tuple
    camera: CameraModel

    def __post_init__(self):
        object.__setattr__(self, "touches", tuple(self.touches))


def touch_charts_for(depth_model: DepthPredictor | None, touches, fit_kwargs=None) -> list[TouchInput]:
    """Attach a chart to every touch: fitted to the predicted local cloud for
    successful touches, collapsed fingertip otherwise. Touches reported as
    successful but with no detectable contact fall back to fingertips."""
    out = []
    for t in touches:
        if t.chart is not None:
            out.append(t)
            continue
        chart = None
        if t.success:
            if depth_model is None or t.reading is None:
                raise ValueError("successful touch without a chart needs a reading and depth model")
            imp = predict_impression(depth_model, t.reading)
            mask = touch_mask(t.reading, depth_model.untouched).reshape(-1)
            cloud = depth_to_cloud(imp, t.pose)[mask]
            if len(cloud):
                chart = fit_touch_chart(cloud, t.pose, **(fit_kwargs or {})).chart
        if chart is None:
            chart = init_unsuccessful_touch_chart(t.pose)
        out.append(replace(t, chart=chart, success=bool(chart.success)))
    return out


@dataclass
class DeformConfig:
    cnn_widths: tuple = (8, 16, 16, 32, 32)
    hidden: int = 64
    gcn_layers: int = 4
    zero_neighbor: bool = True
    iterations: int = 3
    self_loops: bool = True
    communication: bool = True
    n_vision: int = 95
    n_pred_samples: int = 4000
    n_target_samples: int = 4000
    image_size: int = 64
    seed: int = 0

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["cnn_widths"] = list(self.cnn_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DeformConfig":
        d = dict(d)
        d["cnn_widths"] = tuple(d["cnn_widths"])
        return cls(**d)


@lru_cache(maxsize=8)
def _vision_atlas(n_vision: int) -> Atlas:
    return build_sphere_atlas(n_vision)


def scene_atlas(scene: SceneInput, config: DeformConfig) -> Atlas:
    """Sphere of vision charts followed by one chart per touch, with the
    communication graph (within-chart edges only when communication is
    switched off)."""
    touch = []
    for t in scene.touches:
        if t.chart is None:
            raise ValueError("touch inputs need charts; run touch_charts_for first")
        touch.append(t.chart)
    base = _vision_atlas(config.n_vision)
    atlas = Atlas(list(base.charts) + touch)
    return build_comm_graph(atlas, vision_links=config.communication, touch_links=config.communication)


class DeformModel:
    """Image CNN plus one GCN stack applied ``iterations`` times.

    With ``zero_neighbor`` set, half of each hidden layer's channels come
    from the normalised neighbourhood sum and half from the vertex's own
    features only, and the output layer is purely per-vertex. The own-feature
    path is independent of vertex degree, which otherwise varies with the
    number of touch charts wired to every vision boundary vertex.
    """

    def __init__(self, config: DeformConfig | None = None):
        self.config = config or DeformConfig()
        cfg = self.config
        if len(cfg.cnn_widths) != 5:
            raise ValueError("the image CNN has exactly 5 conv layers")
        rng = np.random.default_rng(cfg.seed)
        self.store = ParamStore()
        cin = 3
        for i, cout in enumerate(cfg.cnn_widths):
            self.store.add(f"cnn{i}/k", _he(rng, (cout, cin, 3, 3), cin * 9))
            self.store.add(f"cnn{i}/b", np.zeros(cout))
            cin = cout
        dims = [self.feature_dim] + [cfg.hidden] * (cfg.gcn_layers - 1) + [3]
        for i in range(cfg.gcn_layers):
            last = i == cfg.gcn_layers - 1
            n_self = 0 if not cfg.zero_neighbor else dims[i + 1] if last else dims[i + 1] // 2
            parts = [("w", dims[i + 1] - n_self), ("ws", n_self)]
            for key, width in parts:
                if width == 0:
                    continue
                w = np.zeros((dims[i], width)) if last else _he(rng, (dims[i], width), dims[i])
                self.store.add(f"gcn{i}/{key}", w)
                self.store.add(f"gcn{i}/b{key[1:]}", np.zeros(width))

    @property
    def image_feature_dim(self) -> int:
        w = self.config.cnn_widths
        return w[2] + w[3] + w[4]

    @property
    def feature_dim(self) -> int:
        return self.image_feature_dim + 4

    def image_maps(self, image, p) -> list:
        """Feature maps at 1/2, 1/4 and 1/8 of the image resolution. A missing
        image is replaced by a blank (white) frame."""
        s = self.config.image_size
        img = np.ones((s, s, 3)) if image is None else np.asarray(image, dtype=np.float64)
        if img.shape != (s, s, 3):
            raise ValueError(f"image shape {img.shape} != ({s}, {s}, 3)")
        x = Tensor(img.transpose(2, 0, 1) - 0.5)
        f0 = relu(conv2d(x, p["cnn0/k"], p["cnn0/b"]))
        f1 = relu(conv2d(f0, p["cnn1/k"], p["cnn1/b"], stride=2))
        f2 = relu(conv2d(f1, p["cnn2/k"], p["cnn2/b"]))
        f3 = relu(conv2d(f2, p["cnn3/k"], p["cnn3/b"], stride=2))
        f4 = relu(conv2d(f3, p["cnn4/k"], p["cnn4/b"], stride=2))
        return [f2, f3, f4]

    def frozen_params(self) -> dict:
        return {k: Tensor(t.data) for k, t in self.store.params.items()}


def init_features(positions: Tensor, maps, camera: CameraModel, mask: np.ndarray) -> Tensor:
    """Per-vertex ``[pooled image features | x, y, z | touch mask bit]``."""
    if positions.shape[0] != len(mask):
        raise ValueError(f"{positions.shape[0]} positions but {len(mask)} mask entries")
    pooled = perceptual_pool(maps, positions, camera)
    return concat([pooled, positions, Tensor(np.asarray(mask, dtype=np.float64)[:, None])], axis=1)


def vertex_masks(atlas: Atlas):
    """(touch mask bit, movable vertices). Only vision-chart vertices move:
    successful touch charts are enforced and fingertip charts stay
    collapsed where the sensor was."""
    kinds = np.concatenate([np.full(c.n_vertices, c.kind == "vision") for c in atlas.charts])
    return atlas.success_mask(), kinds


def deform_positions(model: DeformModel, atlas: Atlas, scene: SceneInput, params=None,
                     counter: list | None = None) -> Tensor:
    """Differentiable deformation: the shared GCN stack runs
    ``config.iterations`` times on features recomputed from the current
    positions; each residual is added to movable vertices and touch charts
    are held at their given positions."""
    cfg = model.config
    p = model.store.params if params is None else params
    if atlas.comm_edges is None:
        raise ValueError("atlas has no communication graph")
    prop = CommGraphCSR.from_edges(atlas.comm_edges, atlas.n_vertices).normalized(cfg.self_loops)
    mask, movable = vertex_masks(atlas)
    fixed = Tensor(atlas.positions())
    maps = model.image_maps(scene.image, p)
    pos = fixed
    for _ in range(cfg.iterations):
        if counter is not None:
            counter.append(1)
        h = init_features(pos, maps, scene.camera, mask)
        for i in range(cfg.gcn_layers):
            h = _gcn_block(h, p, i, prop, "identity" if i == cfg.gcn_layers - 1 else "relu")
        pos = where(movable, pos + h, fixed)
    return pos


def _gcn_block(h: Tensor, p, i: int, prop, act: str) -> Tensor:
    """Layer ``i``: neighbourhood channels, own-feature channels, or both."""
    parts = []
    if f"gcn{i}/w" in p:
        parts.append(gcn_layer(h, None, p[f"gcn{i}/w"], p[f"gcn{i}/b"], "identity", propagation=prop))
    if f"gcn{i}/ws" in p:
        parts.append(h @ p[f"gcn{i}/ws"] + p[f"gcn{i}/bs"])
    out = parts[0] if len(parts) == 1 else concat(parts, axis=1)
    return relu(out) if act == "relu" else out


def deform(model: DeformModel, atlas: Atlas, scene: SceneInput, counter: list | None = None) -> Atlas:
    pos = deform_positions(model, atlas, scene, model.frozen_params(), counter)
    out = atlas.with_positions(pos.data)
    fitted = [atlas.charts[i] for i in atlas.touch_charts if atlas.charts[i].success]
    return enforce_touch_positions(out, fitted)


def loss_faces(atlas: Atlas) -> np.ndarray:
    """Faces eligible for loss sampling: everything except fingertip charts,
    which have zero area."""
    keep = np.array([not (c.kind == "touch" and not c.success) for c in atlas.charts])
    return atlas.faces()[keep[atlas.face_chart_index()]]


def atlas_samples(atlas_positions: np.ndarray, faces: np.ndarray, n: int, rng):
    tri = atlas_positions[faces]
    areas = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    return sample_barycentric(areas, n, rng)


def deform_loss(model: DeformModel, atlas: Atlas, scene: SceneInput, target_points: np.ndarray,
                rng=None, params=None, samples=None) -> Tensor:
    """Chamfer distance between points sampled on the deformed atlas and the
    target points. ``samples`` fixes the (face, barycentric) draw, which
    makes the loss a smooth function of the parameters."""
    pos = deform_positions(model, atlas, scene, params)
    faces = loss_faces(atlas)
    if samples is None:
        samples = atlas_samples(pos.data, faces, model.config.n_pred_samples, rng)
    fidx, w = samples
    pts = sample_on_faces(pos, faces, fidx, w)
    return chamfer_loss(pts, target_points)


def predicted_chamfer(model: DeformModel, atlas: Atlas, scene: SceneInput, target: TriMesh,
                      n: int = 4000, seed: int = 0) -> float:
    """Evaluation metric: Chamfer distance between ``n`` area-weighted
    samples of the prediction and of the target, with fixed seeds."""
    out = deform(model, atlas, scene)
    return mesh_chamfer(out, target, n, seed)


def mesh_chamfer(atlas: Atlas, target: TriMesh, n: int = 4000, seed: int = 0) -> float:
    faces = loss_faces(atlas)
    rng = np.random.default_rng(seed)
    fidx, w = atlas_samples(atlas.positions(), faces, n, rng)
    pts = np.einsum("nk,nkd->nd", w, atlas.positions()[faces[fidx]])
    return chamfer(pts, sample_surface(target, n, seed + 1))


@dataclass
class DeformTrainConfig:
    epochs: int = 8
    lr: float = DEFORM_LR
    batch: int = 1
    patience: int = 3
    steps_per_epoch: int | None = None
    seed: int = 0
    schedule: str = "constant"

    def lr_at(self, step: int, total: int) -> float:
        """``constant``, or ``cosine`` annealing from ``lr`` to 0 over ``total`` steps."""
        if self.schedule == "constant":
            return self.lr
        if self.schedule == "cosine":
            return 0.5 * self.lr * (1.0 + np.cos(np.pi * min(step, total) / max(total, 1)))
        raise ValueError(f"unknown schedule {self.schedule!r}")


def train_deform(model: DeformModel, dataset, config: DeformTrainConfig | None = None,
                 val_dataset=None, log=None):
    """Minimise the sampled Chamfer loss over ``(SceneInput, TriMesh)`` pairs.

    Points on the prediction and the target are redrawn every step from a
    seed derived from (epoch, step). When a validation set is given the
    parameters with the lowest validation Chamfer (checked every epoch) are
    restored at the end. Returns (model, history dict).
    """
    config = config or DeformTrainConfig()
    data = list(dataset)
    if not data:
        raise ValueError("empty dataset")
    cfg = model.config
    atlases = [scene_atlas(s, cfg) for s, _ in data]
    val = list(val_dataset) if val_dataset else []
    val_atlases = [scene_atlas(s, cfg) for s, _ in val]
    history = {"train": [], "val": [], "best_epoch": None}
    best_state, best_val, stale = model.store.state(), np.inf, 0
    order_rng = np.random.default_rng(config.seed)
    per_epoch = -(-min(len(data), config.steps_per_epoch or len(data)) // config.batch)
    total, done = config.epochs * per_epoch, 0
    for epoch in range(config.epochs):
        order = order_rng.permutation(len(data))[:config.steps_per_epoch]
        losses = []
        for step in range(0, len(order), config.batch):
            model.store.zero_grad()
            batch = order[step:step + config.batch]
            for j, i in enumerate(batch):
                scene, target = data[i]
                rng = np.random.default_rng([config.seed, epoch, step, j])
                tgt = sample_surface(target, cfg.n_target_samples, int(rng.integers(2 ** 31)))
                loss = deform_loss(model, atlases[i], scene, tgt, rng) * (1.0 / len(batch))
                loss.backward()
                losses.append(float(loss.data) * len(batch))
            adam_step(model.store, lr=config.lr_at(done, total))
            done += 1
        history["train"].append(float(np.mean(losses)))
        if val:
            v = float(np.mean([predicted_chamfer(model, a, s, t) for a, (s, t) in zip(val_atlases, val)]))
            history["val"].append(v)
            if v < best_val:
                best_val, best_state, stale = v, model.store.state(), 0
                history["best_epoch"] = epoch
            else:
                stale += 1
        if log is not None:
            log(f"deform epoch {epoch} train {history['train'][-1]:.5f}"
                + (f" val {history['val'][-1]:.5f}" if val else ""))
        if val and stale >= config.patience:
            break
    if val:
        model.store.load_state(best_state)
    return model, history


def predict(model: DeformModel, scene: SceneInput, depth_model: DepthPredictor | None = None,
            fit_kwargs=None):
    """Full pipeline: touch charts (fitted or fingertip), deformation, mesh."""
    touches = touch_charts_for(depth_model, scene.touches, fit_kwargs)
    scene = replace(scene, touches=tuple(touches))
    atlas = scene_atlas(scene, model.config)
    out = deform(model, atlas, scene)
    return out, atlas_to_mesh(out)
