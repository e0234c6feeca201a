import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from touchcharts.nn import (Adam, CommGraphCSR, ParamStore, Tensor, adam_step, avg_pool2, chamfer_loss,
                            concat, conv2d, gcn_layer, grad_check, load_checkpoint, masked_mse,
                            perceptual_pool, relu, resize_nearest, sample_on_faces, save_checkpoint, where)
from touchcharts.tactile import look_at

SEEDS = range(5)


def ring_graph(n):
    e = np.stack([np.arange(n), (np.arange(n) + 1) % n], axis=1)
    return CommGraphCSR.from_edges(e, n)


def weighted(out, seed):
    """Scalar reduction with fixed random weights, so every output entry matters."""
    r = np.random.default_rng(seed + 100).normal(size=out.shape)
    return (out * r).sum()


# ------------------------------------------------------------- autograd

def test_backward_simple_expression():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    y = ((x * x) + x * 3.0).sum()
    y.backward()
    assert np.allclose(x.grad, 2 * x.data + 3.0)


def test_gradients_accumulate_over_shared_nodes():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x
    (y + y).sum().backward()
    assert np.allclose(x.grad, [8.0])


def test_broadcast_unbroadcasts():
    a = Tensor(np.ones((4, 3)), requires_grad=True)
    b = Tensor(np.arange(3.0), requires_grad=True)
    (a * b).sum().backward()
    assert np.allclose(b.grad, [4, 4, 4]) and np.allclose(a.grad, np.tile(np.arange(3.0), (4, 1)))


def test_concat_where_relu_grads():
    rng = np.random.default_rng(0)
    mask = rng.random((5, 2)) > 0.5
    fixed = rng.normal(size=(5, 2))
    err = grad_check(lambda a, b: weighted(relu(where(mask, concat([a, b], axis=1), fixed) + 0.1), 0),
                     [rng.normal(size=(5, 1)), rng.normal(size=(5, 1))])
    assert err < 1e-6


# ------------------------------------------------------------------ gcn

def test_normalized_matrix_entries():
    g = CommGraphCSR.from_edges([[0, 1], [1, 2]], 3)
    a = g.normalized().toarray()
    deg = np.array([2.0, 3.0, 2.0])
    ref = (np.eye(3) + np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]])) / np.sqrt(np.outer(deg, deg))
    assert np.allclose(a, ref)
    no_self = g.normalized(self_loops=False).toarray()
    assert np.allclose(np.diag(no_self), 0.0)


@pytest.mark.parametrize("seed", SEEDS)
def test_gcn_layer_grad(seed):
    rng = np.random.default_rng(seed)
    g = ring_graph(7)
    err = grad_check(lambda h, w, b: weighted(gcn_layer(h, g, w, b, "identity"), seed),
                     [rng.normal(size=(7, 4)), rng.normal(size=(4, 3)), rng.normal(size=3)])
    assert err < 1e-4


def test_gcn_hand_example():
    # path 0-1; self loops give a 2x2 all-1/2 matrix
    g = CommGraphCSR.from_edges([[0, 1]], 2)
    h = Tensor(np.array([[1.0], [3.0]]))
    out = gcn_layer(h, g, Tensor(np.array([[2.0]])), Tensor(np.array([0.5])), "identity")
    assert np.allclose(out.data, [[4.5], [4.5]])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_gcn_is_linear_before_activation(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    g = ring_graph(6)
    w, zero = Tensor(rng.normal(size=(3, 2))), Tensor(np.zeros(2))
    h1, h2 = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    lhs = gcn_layer(Tensor(alpha * h1 + beta * h2), g, w, zero, "identity").data
    rhs = alpha * gcn_layer(Tensor(h1), g, w, zero, "identity").data + \
        beta * gcn_layer(Tensor(h2), g, w, zero, "identity").data
    assert np.allclose(lhs, rhs, atol=1e-10)


def test_gcn_shape_errors():
    g = ring_graph(4)
    with pytest.raises(ValueError):
        gcn_layer(Tensor(np.ones((4, 3))), g, Tensor(np.ones((2, 2))), Tensor(np.ones(2)))
    with pytest.raises(ValueError):
        gcn_layer(Tensor(np.ones((5, 2))), g, Tensor(np.ones((2, 2))), Tensor(np.ones(2)))
    with pytest.raises(ValueError):
        gcn_layer(Tensor(np.ones((4, 2))), g, Tensor(np.ones((2, 2))), Tensor(np.ones(2)), "tanh")


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 9)), max_size=30))
def test_csr_is_symmetric_without_self_loops(edges):
    g = CommGraphCSR.from_edges(np.array(edges, dtype=np.int64).reshape(-1, 2), 10)
    assert g.is_symmetric()
    assert not any(u in g.neighbors(u) for u in range(10))


# ----------------------------------------------------------------- conv

def conv_reference(x, k, b, stride):
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ho, wo = (h - 1) // stride + 1, (w - 1) // stride + 1
    out = np.zeros((k.shape[0], ho, wo))
    for o in range(k.shape[0]):
        for i in range(ho):
            for j in range(wo):
                out[o, i, j] = (xp[:, i * stride:i * stride + 3, j * stride:j * stride + 3] * k[o]).sum() + b[o]
    return out


@pytest.mark.parametrize("stride", [1, 2])
def test_conv2d_matches_loops(stride):
    rng = np.random.default_rng(stride)
    x, k, b = rng.normal(size=(2, 7, 6)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    out = conv2d(Tensor(x), Tensor(k), Tensor(b), stride=stride).data
    assert np.allclose(out, conv_reference(x, k, b, stride), atol=1e-12)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv2d_grad(seed):
    rng = np.random.default_rng(seed)
    stride = 1 + seed % 2
    err = grad_check(lambda x, k, b: weighted(conv2d(x, k, b, stride=stride), seed),
                     [rng.normal(size=(2, 6, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)])
    assert err < 1e-4


def test_pool_and_resize_grads():
    rng = np.random.default_rng(0)
    assert grad_check(lambda x: weighted(avg_pool2(x), 0), [rng.normal(size=(2, 6, 4))]) < 1e-6
    assert grad_check(lambda x: weighted(resize_nearest(x, (7, 5)), 1), [rng.normal(size=(2, 3, 2))]) < 1e-6
    x = Tensor(np.arange(16.0).reshape(1, 4, 4))
    assert np.allclose(avg_pool2(x).data[0], [[2.5, 4.5], [10.5, 12.5]])


# ------------------------------------------------------ perceptual pool

@pytest.mark.parametrize("seed", SEEDS)
def test_perceptual_pool_grad(seed):
    rng = np.random.default_rng(seed)
    cam = look_at([0, -3, 0], fov_deg=40, size=16)
    verts = rng.uniform(-0.3, 0.3, size=(6, 3))
    maps = [rng.normal(size=(2, 16, 16)), rng.normal(size=(3, 8, 8))]
    err = grad_check(lambda v, m1, m2: weighted(perceptual_pool([m1, m2], v, cam), seed),
                     [verts, *maps], step=1e-6)
    assert err < 1e-4


def test_perceptual_pool_samples_pixel_centres():
    cam = look_at([0, -3, 0], fov_deg=40, size=8)
    fmap = np.arange(64.0).reshape(1, 8, 8)
    # world point projecting to the centre of pixel (row 2, col 5)
    z = 3.0
    x = (5.5 - 4) * z / cam.focal
    y = (2.5 - 4) * z / cam.focal
    p = cam.position + np.array([x, y, z]) @ cam.rotation
    out = perceptual_pool([fmap], p[None], cam).data
    assert out[0, 0] == pytest.approx(fmap[0, 2, 5])


# --------------------------------------------------- sampling and losses

@pytest.mark.parametrize("seed", SEEDS)
def test_sample_and_chamfer_grad(seed):
    rng = np.random.default_rng(seed)
    faces = np.array([[0, 1, 2], [1, 3, 2], [2, 3, 4]])
    fidx = rng.integers(0, 3, size=12)
    w = rng.dirichlet(np.ones(3), size=12)
    target = rng.normal(size=(15, 3))
    err = grad_check(lambda v: chamfer_loss(sample_on_faces(v, faces, fidx, w), target),
                     [rng.normal(size=(5, 3))], step=1e-7)
    assert err < 1e-4


def test_masked_mse_values():
    pred = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True)
    mask = np.array([[True, False], [False, True]])
    loss = masked_mse(pred, np.zeros((2, 2)), mask)
    assert float(loss.data) == pytest.approx((1 + 16) / 2)
    loss.backward()
    assert np.allclose(pred.grad, [[1.0, 0.0], [0.0, 4.0]])
    assert float(masked_mse(pred, np.zeros((2, 2)), np.zeros((2, 2), bool)).data) == 0.0


# ---------------------------------------------------------------- adam

def test_adam_first_step_and_convergence():
    store = ParamStore()
    store.add("p", np.array([1.0]))
    adam_step(store, {"p": np.array([2.0])}, lr=0.1)
    # bias-corrected first step moves by lr * g / (|g| + eps)
    assert store["p"].data[0] == pytest.approx(1.0 - 0.1 * 2.0 / (2.0 + 1e-8), abs=1e-12)
    opt = Adam((1,), lr=0.05)
    x = np.array([1.0])
    for _ in range(500):
        x = opt.step(x, 2 * x)
    assert abs(x[0]) < 0.02


def test_adam_shape_check():
    store = ParamStore()
    store.add("p", np.zeros(3))
    with pytest.raises(ValueError):
        adam_step(store, {"p": np.zeros(2)})


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    store = ParamStore()
    store.add("layer/w", rng.normal(size=(3, 2)))
    store.add("b", rng.normal(size=2))
    adam_step(store, {"layer/w": rng.normal(size=(3, 2)), "b": rng.normal(size=2)})
    save_checkpoint(tmp_path / "ck", store, {"note": "x"})
    back, meta = load_checkpoint(tmp_path / "ck")
    assert meta == {"note": "x"} and back.step == 1
    for k in store.names():
        assert np.array_equal(back[k].data, store[k].data)
        assert np.array_equal(back.m[k], store.m[k]) and np.array_equal(back.v[k], store.v[k])


def test_training_is_bitwise_reproducible():
    def run():
        rng = np.random.default_rng(5)
        store = ParamStore()
        store.add("w", rng.normal(size=(4, 2)))
        store.add("b", np.zeros(2))
        g = ring_graph(6)
        h = rng.normal(size=(6, 4))
        for _ in range(20):
            store.zero_grad()
            out = gcn_layer(Tensor(h), g, store["w"], store["b"])
            (out * out).sum().backward()
            adam_step(store, lr=0.01)
        return store["w"].data.tobytes()
    assert run() == run()
