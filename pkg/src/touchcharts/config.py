"""Experiment configuration stored as a flat ``key = value`` text file.

Lines starting with ``#`` are comments. Values are parsed according to the
type of the field's default: int, float, bool (true/false), str, or a
comma-separated tuple of ints/floats/strs.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path


@dataclass(frozen=True)
class ExperimentConfig:
    # data
    seed: int = 0
    n_objects: int = 200
    classes: tuple = ("sphere", "box", "pyramid", "cylinder", "blend")
    grasps_per_object: int = 5
    sensors_per_grasp: int = 4
    success_target: float = 0.624
    split_train: float = 0.8
    split_val: float = 0.1
    split_test: float = 0.1
    scale_min: float = 0.6
    scale_max: float = 1.0
    aspect_min: float = 0.55
    depth_shift: float = 0.25
    image_size: int = 64
    camera_distance: float = 2.5
    fov_deg: float = 40.0
    occlusion_size: int = 26
    sensor_width: float = 0.03
    gel_depth: float = 0.004
    sensor_res: int = 100
    trace_eps: float = 1e-5
    # local stage
    depth_lr: float = 5e-5
    depth_steps: int = 1500
    depth_batch: int = 4
    depth_channels: int = 12
    depth_max_pairs: int = 600
    fit_lr: float = 0.003
    fit_halt: float = 6e-4
    fit_max_iters: int = 2000
    fit_samples: int = 3000
    # global stage
    deform_lr: float = 3e-5
    deform_schedule: str = "constant"
    deform_epochs: int = 15
    deform_patience: int = 4
    deform_hidden: int = 64
    deform_gcn_layers: int = 4
    zero_neighbor: bool = True
    n_pred_samples: int = 4000
    n_target_samples: int = 4000
    communication: bool = True
    self_loops: bool = True
    # evaluation
    eval_samples: int = 4000
    eval_rotations: int = 5
    ring_multipliers: tuple = (1, 2, 3, 4, 5)
    ring_points_per_unit: int = 10
    grasp_counts: tuple = (1, 2, 3, 4, 5)
    report_scale: float = 1.0

    def __post_init__(self):
        rates = {k: getattr(self, k) for k in ("depth_lr", "fit_lr", "deform_lr")}
        bad = [k for k, v in rates.items() if not v > 0]
        if bad:
            raise ValueError(f"learning rates must be positive: {bad}")
        total = self.split_train + self.split_val + self.split_test
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"split ratios sum to {total}, expected 1")
        if self.n_objects < 1 or self.grasps_per_object < 1 or self.sensors_per_grasp < 1:
            raise ValueError("object, grasp and sensor counts must be positive")
        if not 0 < self.success_target <= 1:
            raise ValueError("success_target must lie in (0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def digest(self, keys=None) -> str:
        """Short hash of the given fields (all by default)."""
        d = self.to_dict()
        if keys is not None:
            d = {k: d[k] for k in keys}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)


DATA_KEYS = ("seed", "n_objects", "classes", "grasps_per_object", "sensors_per_grasp",
             "success_target", "split_train", "split_val", "split_test", "scale_min", "scale_max",
             "aspect_min", "depth_shift", "image_size", "camera_distance", "fov_deg", "occlusion_size",
             "sensor_width", "gel_depth", "sensor_res", "trace_eps")


def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        items = [s.strip() for s in raw.split(",") if s.strip()]
        kind = type(default[0]) if default else str
        return tuple(kind(s) for s in items)
    return raw


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    base = base or ExperimentConfig()
    known = {f.name: getattr(base, f.name) for f in fields(base)}
    updates = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        updates[key] = _parse_value(value, known[key])
    return replace(base, **updates)


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def format_config(config: ExperimentConfig) -> str:
    lines = []
    for f in fields(config):
        v = getattr(config, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, tuple):
            v = ", ".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
