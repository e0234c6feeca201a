"""Parameter storage, Adam, checkpoints and a finite-difference checker."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autograd import Tensor


class ParamStore:
    """Named parameters plus Adam first/second moments and a step count."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already exists")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in self.params.items()}

    def n_parameters(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for k, arr in state.items():
            if self.params[k].shape != np.shape(arr):
                raise ValueError(f"shape mismatch for {k}: {self.params[k].shape} vs {np.shape(arr)}")
            self.params[k].data = np.array(arr, dtype=np.float64)

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, t in self.params.items():
            out.add(k, t.data)
            out.m[k] = self.m[k].copy()
            out.v[k] = self.v[k].copy()
        out.step = self.step
        return out


def adam_step(store: ParamStore, grads: dict | None = None, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> ParamStore:
    """One Adam update in place. ``grads`` defaults to the ``.grad`` buffers;
    parameters without a gradient are treated as having zero gradient."""
    if grads is None:
        grads = store.grads()
    for name, g in grads.items():
        if np.shape(g) != store.params[name].shape:
            raise ValueError(f"gradient shape {np.shape(g)} != parameter {name} {store.params[name].shape}")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.params.items():
        g = np.asarray(grads.get(name, 0.0), dtype=np.float64)
        store.m[name] = beta1 * store.m[name] + (1.0 - beta1) * g
        store.v[name] = beta2 * store.v[name] + (1.0 - beta2) * g * g
        mhat = store.m[name] / c1
        vhat = store.v[name] / c2
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)
    return store


class Adam:
    """Adam over plain arrays (no ParamStore); used for direct vertex
    optimisation."""

    def __init__(self, shape, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return x - self.lr * mhat / (np.sqrt(vhat) + self.eps)


# -------------------------------------------------------------- checkpoints

def _fname(name: str) -> str:
    return name.replace("/", "__") + ".f64"


def save_checkpoint(directory, store: ParamStore, meta: dict | None = None,
                    include_moments: bool = True) -> None:
    """``manifest.json`` plus one little-endian float64 file per tensor."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, t in store.params.items():
        entries[name] = {"shape": list(t.shape), "file": _fname(name)}
        (d / _fname(name)).write_bytes(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        if include_moments:
            for tag, buf in (("m", store.m[name]), ("v", store.v[name])):
                fn = f"{tag}.{_fname(name)}"
                (d / fn).write_bytes(np.ascontiguousarray(buf, dtype="<f8").tobytes())
    manifest = {"format": "f64-le", "step": store.step, "moments": include_moments,
                "params": entries, "meta": meta or {}}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_checkpoint(directory) -> tuple[ParamStore, dict]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    store = ParamStore()
    for name, e in manifest["params"].items():
        shape = tuple(e["shape"])
        store.add(name, np.frombuffer((d / e["file"]).read_bytes(), dtype="<f8").reshape(shape))
        if manifest.get("moments"):
            store.m[name] = np.frombuffer((d / f"m.{e['file']}").read_bytes(), dtype="<f8").reshape(shape).copy()
            store.v[name] = np.frombuffer((d / f"v.{e['file']}").read_bytes(), dtype="<f8").reshape(shape).copy()
    store.step = int(manifest["step"])
    return store, manifest.get("meta", {})


# ----------------------------------------------------------- gradient check

def grad_check(f, inputs, step: float = 1e-5, max_elements: int | None = None,
               seed: int = 0) -> float:
    """Max relative error between reverse-mode and central-difference
    gradients of the scalar ``f(*inputs)`` w.r.t. every input Tensor.

    The denominator is max(|a|, |b|, 1e-8). ``max_elements`` limits the
    check to a random subset of coordinates per input."""
    inputs = [x if isinstance(x, Tensor) else Tensor(x, requires_grad=True) for x in inputs]
    for x in inputs:
        x.requires_grad = True
        x.grad = None
    out = f(*inputs)
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar function")
    out.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for x in inputs:
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, max_elements, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f(*[Tensor(y.data) for y in inputs]).data)
            flat[i] = orig - step
            fm = float(f(*[Tensor(y.data) for y in inputs]).data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * step)
            a = float(analytic.reshape(-1)[i])
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-8))
    return worst
