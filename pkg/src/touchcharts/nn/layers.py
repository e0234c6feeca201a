"""Differentiable layers: graph convolution, 3x3 convolution, perceptual
pooling, pooling, barycentric surface sampling and the Chamfer loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ..geometry import chamfer_with_grad, scatter_rows
from .autograd import Tensor, _lift, _node, add, matmul, relu, spmm


# ------------------------------------------------------------------ graphs

@dataclass(frozen=True)
class CommGraphCSR:
    """Symmetric adjacency over global vertex ids in compressed-row form."""

    indptr: np.ndarray
    indices: np.ndarray
    n_vertices: int

    @classmethod
    def from_edges(cls, edges, n_vertices: int) -> "CommGraphCSR":
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if len(e) and (e.min() < 0 or e.max() >= n_vertices):
            raise ValueError("edge index out of range")
        e = e[e[:, 0] != e[:, 1]]
        both = np.concatenate([e, e[:, ::-1]])
        m = sp.csr_matrix((np.ones(len(both)), (both[:, 0], both[:, 1])),
                          shape=(n_vertices, n_vertices))
        m.sum_duplicates()
        m.sort_indices()
        return cls(m.indptr.astype(np.int64), m.indices.astype(np.int64), int(n_vertices))

    @property
    def degree(self) -> np.ndarray:
        return np.diff(self.indptr)

    def neighbors(self, u: int) -> np.ndarray:
        return self.indices[self.indptr[u]:self.indptr[u + 1]]

    def is_symmetric(self) -> bool:
        a = self.adjacency()
        return (a != a.T).nnz == 0

    def adjacency(self) -> sp.csr_matrix:
        data = np.ones(len(self.indices))
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n_vertices,) * 2)

    def normalized(self, self_loops: bool = True) -> sp.csr_matrix:
        """Propagation matrix with entries 1/sqrt((|N_u|+1)(|N_v|+1)) over
        N_u and u itself. Without self loops the sum runs over N_u only and
        the degrees drop the +1 (isolated vertices then output zero)."""
        a = self.adjacency()
        deg = self.degree.astype(np.float64)
        if self_loops:
            a = a + sp.identity(self.n_vertices, format="csr")
            deg = deg + 1.0
        inv = np.zeros_like(deg)
        inv[deg > 0] = 1.0 / np.sqrt(deg[deg > 0])
        d = sp.diags(inv)
        return (d @ a @ d).tocsr()


def gcn_layer(h: Tensor, graph, w: Tensor, b: Tensor, activation: str = "relu",
              propagation=None) -> Tensor:
    """out_u = act(W . sum_{v in N_u + u} H_v / sqrt((|N_u|+1)(|N_v|+1)) + b).

    Features are rows, so W is applied on the right (``d_in x d_out``).
    ``propagation`` lets callers pass a precomputed normalized matrix.
    """
    if h.data.ndim != 2 or w.data.ndim != 2 or h.shape[1] != w.shape[0]:
        raise ValueError(f"gcn_layer shape mismatch: H {h.shape}, W {w.shape}")
    if b.shape != (w.shape[1],):
        raise ValueError(f"gcn_layer bias shape {b.shape} != ({w.shape[1]},)")
    n = graph.n_vertices if propagation is None else propagation.shape[0]
    if n != h.shape[0]:
        raise ValueError(f"graph has {n} vertices, H has {h.shape[0]} rows")
    a = graph.normalized() if propagation is None else propagation
    out = add(matmul(spmm(a, h), w), b)
    if activation == "relu":
        return relu(out)
    if activation == "identity":
        return out
    raise ValueError(f"unknown activation {activation!r}")


# ------------------------------------------------------------- convolution

def _patch_index(h: int, w: int, stride: int, padding: int):
    ho = (h + 2 * padding - 3) // stride + 1
    wo = (w + 2 * padding - 3) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"input {h}x{w} too small for a 3x3 kernel")
    return ho, wo


def conv2d(x: Tensor, k: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 1) -> Tensor:
    """3x3 cross-correlation of a ``C_in x H x W`` input with
    ``C_out x C_in x 3 x 3`` kernels."""
    x, k = _lift(x), _lift(k)
    if x.data.ndim != 3 or k.data.ndim != 4 or k.shape[2:] != (3, 3) or k.shape[1] != x.shape[0]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, kernels {k.shape}")
    c_in, h, w = x.shape
    c_out = k.shape[0]
    ho, wo = _patch_index(h, w, stride, padding)
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))

    def window(dy, dx):
        return (slice(None), slice(dy, dy + stride * (ho - 1) + 1, stride),
                slice(dx, dx + stride * (wo - 1) + 1, stride))

    # columns: (C_in*9) x (ho*wo), ordered (c, dy, dx) to match k.reshape
    patches = np.empty((c_in, 3, 3, ho, wo))
    for dy in range(3):
        for dx in range(3):
            patches[:, dy, dx] = xp[window(dy, dx)]
    col = patches.reshape(c_in * 9, ho * wo)
    kmat = k.data.reshape(c_out, c_in * 9)
    out = (kmat @ col).reshape(c_out, ho, wo)

    def backward(g):
        g2 = g.reshape(c_out, ho * wo)
        gk = (g2 @ col.T).reshape(k.shape)
        gcol = (kmat.T @ g2).reshape(c_in, 3, 3, ho, wo)
        gxp = np.zeros_like(xp)
        for dy in range(3):
            for dx in range(3):
                gxp[window(dy, dx)] += gcol[:, dy, dx]
        gx = gxp[:, padding:padding + h, padding:padding + w]
        return gx, gk

    y = _node(out, (x, k), backward)
    if b is not None:
        b = _lift(b)
        if b.shape != (c_out,):
            raise ValueError(f"conv2d bias shape {b.shape} != ({c_out},)")
        y = add(y, _channel_bias(b))
    return y


def _channel_bias(b: Tensor) -> Tensor:
    return _node(b.data[:, None, None], (b,), lambda g: (g.sum(axis=(1, 2)),))


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling (odd trailing rows/cols are dropped)."""
    c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    xs = x.data[:, :2 * h2, :2 * w2].reshape(c, h2, 2, w2, 2)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, :2 * h2, :2 * w2] = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25
        return (gx,)

    return _node(xs.mean(axis=(2, 4)), (x,), backward)


def resize_nearest(x: Tensor, shape) -> Tensor:
    """Nearest-neighbour resize of ``C x h x w`` to ``C x H x W``."""
    c, h, w = x.shape
    hh, ww = shape
    ri = np.minimum((np.arange(hh) * h) // hh, h - 1)
    ci = np.minimum((np.arange(ww) * w) // ww, w - 1)
    out = x.data[:, ri][:, :, ci]

    def backward(g):
        # sum over source rows, then source columns
        gr = np.zeros((c, h, ww))
        for j in range(h):
            gr[:, j] = g[:, ri == j].sum(axis=1)
        gx = np.zeros((c, h, w))
        for j in range(w):
            gx[:, :, j] = gr[:, :, ci == j].sum(axis=2)
        return (gx,)

    return _node(out, (x,), backward)


# ------------------------------------------------------- perceptual pooling

def _bilinear(fmap: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Sample ``C x h x w`` at continuous indices, clamped to the border.
    Returns values (N x C), corner indices and weights for the backward pass
    and the partial derivatives w.r.t. x and y (zero where clamped)."""
    c, h, w = fmap.shape
    xc = np.clip(x, 0.0, w - 1.0)
    yc = np.clip(y, 0.0, h - 1.0)
    x0 = np.clip(np.floor(xc).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(yc).astype(np.int64), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0
    f00 = fmap[:, y0, x0].T
    f01 = fmap[:, y0, x1].T
    f10 = fmap[:, y1, x0].T
    f11 = fmap[:, y1, x1].T
    wts = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    val = wts[:, 0:1] * f00 + wts[:, 1:2] * f01 + wts[:, 2:3] * f10 + wts[:, 3:4] * f11
    inside_x = ((x > 0.0) & (x < w - 1.0)).astype(np.float64)[:, None]
    inside_y = ((y > 0.0) & (y < h - 1.0)).astype(np.float64)[:, None]
    dvx = ((f01 - f00) * (1 - fy)[:, None] + (f11 - f10) * fy[:, None]) * inside_x
    dvy = ((f10 - f00) * (1 - fx)[:, None] + (f11 - f01) * fx[:, None]) * inside_y
    corners = (y0, x0, y0, x1, y1, x0, y1, x1)
    return val, corners, wts, dvx, dvy


def _projection_jacobian(camera, points: np.ndarray):
    """(u, v) in pixels and their derivatives w.r.t. world positions."""
    pc = camera.to_camera(points)
    z = pc[:, 2]
    u = camera.focal * pc[:, 0] / z + 0.5 * camera.width
    v = camera.focal * pc[:, 1] / z + 0.5 * camera.height
    r = camera.rotation
    du = camera.focal * (r[0][None, :] / z[:, None] - (pc[:, 0] / z ** 2)[:, None] * r[2][None, :])
    dv = camera.focal * (r[1][None, :] / z[:, None] - (pc[:, 1] / z ** 2)[:, None] * r[2][None, :])
    return u, v, du, dv


def perceptual_pool(feature_maps, vertices, camera) -> Tensor:
    """Project vertices with ``camera`` and bilinearly sample every map at
    the projected location. Maps may be coarser than the image; pixel
    centres of a map with ``w`` columns sit at image u = (j + 0.5) W / w.
    Result is ``|V| x sum(C)``, differentiable in maps and vertices."""
    maps = [_lift(m) for m in feature_maps]
    if not maps:
        raise ValueError("perceptual_pool needs at least one feature map")
    verts = _lift(vertices)
    u, v, du, dv = _projection_jacobian(camera, verts.data)
    outs, saved = [], []
    for m in maps:
        c, h, w = m.shape
        sx, sy = w / camera.width, h / camera.height
        val, corners, wts, dvx, dvy = _bilinear(m.data, u * sx - 0.5, v * sy - 0.5)
        outs.append(val)
        saved.append((corners, wts, dvx * sx, dvy * sy))
    out = np.concatenate(outs, axis=1)
    widths = [m.shape[0] for m in maps]
    cuts = np.cumsum(widths)[:-1]

    def backward(g):
        parts = np.split(g, cuts, axis=1)
        grads = []
        gvert = np.zeros_like(verts.data)
        for m, gp, (corners, wts, dvx, dvy) in zip(maps, parts, saved):
            gm = np.zeros_like(m.data)
            y0, x0, y0b, x1, y1, x0b, y1b, x1b = corners
            for j, (yy, xx) in enumerate(((y0, x0), (y0b, x1), (y1, x0b), (y1b, x1b))):
                np.add.at(gm, (slice(None), yy, xx), (gp * wts[:, j:j + 1]).T)
            grads.append(gm)
            gu = (gp * dvx).sum(axis=1)
            gv = (gp * dvy).sum(axis=1)
            gvert += gu[:, None] * du + gv[:, None] * dv
        return tuple(grads) + (gvert,)

    return _node(out, tuple(maps) + (verts,), backward)


# --------------------------------------------------------- surface sampling

def sample_on_faces(vertices: Tensor, faces: np.ndarray, face_idx: np.ndarray,
                    weights: np.ndarray) -> Tensor:
    """Points ``sum_k w_k V[faces[f, k]]``; linear in the vertex positions."""
    tri = np.asarray(faces)[face_idx]
    wts = np.asarray(weights, dtype=np.float64)
    pts = np.einsum("nk,nkd->nd", wts, vertices.data[tri])

    def backward(g):
        n = len(vertices.data)
        return (sum(scatter_rows(tri[:, k], wts[:, k:k + 1] * g, n) for k in range(3)),)

    return _node(pts, (vertices,), backward)


def chamfer_loss(points: Tensor, target) -> Tensor:
    """Chamfer distance (mean form) with nearest-neighbour assignments held
    fixed for the backward pass."""
    target = np.asarray(target, dtype=np.float64)
    value, grad = chamfer_with_grad(points.data, target)
    return _node(np.asarray(value), (points,), lambda g: (g * grad,))


def masked_mse(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean squared error over the pixels where ``mask`` is set; zero (with
    zero gradient) when the mask is empty."""
    m = np.asarray(mask, dtype=bool)
    n = int(m.sum())
    diff = np.where(m, pred.data - target, 0.0)
    if n == 0:
        return _node(np.asarray(0.0), (pred,), lambda g: (np.zeros_like(pred.data),))
    return _node(np.asarray((diff ** 2).sum() / n), (pred,), lambda g: (g * 2.0 * diff / n,))
