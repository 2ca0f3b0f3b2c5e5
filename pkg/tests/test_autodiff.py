"""Tape engine: forward values, backward rules, graph behaviours."""

import numpy as np
import pytest

from optim4rl import nets
from optim4rl.autodiff import (
    ShapeMismatch,
    Tensor,
    absval,
    backward,
    concat,
    evaluate,
    log_softmax,
    select,
    softmax_cross_entropy,
    stop_gradient,
    straight_through_binary_sign,
)

from helpers import gradcheck


def test_evaluate_product():
    root, leaves = evaluate(lambda v: v["x"] * v["y"], {"x": 2.0, "y": 3.0})
    assert float(root.data) == 6.0


def test_evaluate_relu_negative():
    root, _ = evaluate(lambda v: v["x"].relu(), {"x": -1.5})
    assert float(root.data) == 0.0


def test_log_eps_floor_at_zero():
    # ln(0 + 1e-18) = -18 ln 10
    root, _ = evaluate(lambda v: (absval(v["g"]) + 1e-18).log(), {"g": 0.0})
    assert abs(float(root.data) - (-41.44653167389282)) < 1e-12


def test_backward_square():
    x = Tensor(3.0)
    (x * x).backward()
    assert float(x.grad) == 6.0


def test_stop_gradient_blocks_one_factor():
    x = Tensor(5.0)
    (stop_gradient(x) * x).backward()
    assert float(x.grad) == 5.0


def test_stop_gradient_forward_identity_backward_zero():
    x = Tensor(1.7)
    y = stop_gradient(x)
    assert float(y.data) == 1.7
    y.backward()
    # x is cut from the tape entirely; no gradient ever reaches it
    assert x.grad is None or float(x.grad) == 0.0


def test_stop_gradient_additive():
    x = Tensor(4.0)
    (x + stop_gradient(x)).backward()
    assert float(x.grad) == 1.0


def test_straight_through_forward_values():
    for v, want in [(0.3, 1.0), (-0.3, -1.0), (0.0, 1.0), (7.0, 1.0)]:
        y = straight_through_binary_sign(Tensor(np.array([v])))
        assert y.data.item() == want


def test_straight_through_identity_backward():
    for v in (-2.0, -0.1, 0.0, 0.4, 3.0):
        x = Tensor(np.array([v]))
        c = 1.75
        (straight_through_binary_sign(x) * c).sum().backward()
        assert x.grad.item() == c


def test_clip_boundary_passes_gradient():
    x = Tensor(np.array([-2.0, -1.0, 0.0, 1.0, 2.0]))
    x.clip(-1.0, 1.0).sum().backward()
    assert np.array_equal(x.grad, [0.0, 1.0, 1.0, 1.0, 0.0])


def test_shape_mismatch_names_op_and_shapes():
    a = Tensor(np.zeros((2, 3)))
    b = Tensor(np.zeros((4, 5)))
    with pytest.raises(ShapeMismatch) as exc:
        a.matmul(b)
    msg = str(exc.value)
    assert "matmul" in msg and "2, 3" in msg and "4, 5" in msg


def test_backward_requires_scalar_root():
    x = Tensor(np.zeros(3))
    with pytest.raises(ValueError):
        x.backward()


def test_shared_leaf_accumulates_exactly():
    # grad of f+g at a shared leaf equals grad f plus grad g, bit for
    # bit (one contribution per term, so no reassociation can happen)
    x0 = np.array([0.3, -1.2, 2.0])

    def f(x):
        return (x.exp() * 2.0).sum()

    def g(x):
        return (x.tanh() * 3.0).sum()

    xa = Tensor(x0.copy())
    (f(xa) + g(xa)).backward()

    xf = Tensor(x0.copy())
    f(xf).backward()
    xg = Tensor(x0.copy())
    g(xg).backward()
    assert np.array_equal(xa.grad, xf.grad + xg.grad)


def test_repeated_backward_is_bit_identical():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(4, 5)))
    w = Tensor(rng.normal(size=(5, 2)))
    loss = (x.matmul(w).tanh() * x.matmul(w)).sum()
    loss.backward()
    gx, gw = np.array(x.grad), np.array(w.grad)
    loss.backward()
    assert np.array_equal(x.grad, gx) and np.array_equal(w.grad, gw)


def test_concat_and_select_roundtrip():
    a = Tensor(np.array([[1.0, 2.0]]))
    b = Tensor(np.array([[3.0, 4.0]]))
    cat = concat([a, b], axis=0)
    assert cat.data.shape == (2, 2)
    picked = select(cat, np.array([1, 0]))
    assert np.array_equal(picked.data, [2.0, 3.0])
    picked.sum().backward()
    assert np.array_equal(a.grad, [[0.0, 1.0]])
    assert np.array_equal(b.grad, [[1.0, 0.0]])


def test_log_softmax_matches_reference():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(6, 9))
    out = log_softmax(Tensor(z))
    ref = z - z.max(axis=1, keepdims=True)
    ref = ref - np.log(np.exp(ref).sum(axis=1, keepdims=True))
    assert np.allclose(out.data, ref, atol=1e-12)
    # rows of softmax sum to one
    assert np.allclose(np.exp(out.data).sum(axis=1), 1.0, atol=1e-12)


def test_softmax_cross_entropy_uniform_logits():
    logits = Tensor(np.zeros((4, 9)))
    losses = softmax_cross_entropy(logits, np.array([0, 3, 5, 8]))
    assert np.allclose(losses.data, np.log(9.0), atol=1e-12)


def test_absval_values_and_subgradient():
    x = Tensor(np.array([-3.0, 0.0, 2.0]))
    y = absval(x)
    assert np.array_equal(y.data, [3.0, 0.0, 2.0])
    y.sum().backward()
    assert np.array_equal(x.grad, [-1.0, 0.0, 1.0])


def test_unbroadcast_on_bias_add():
    x = Tensor(np.ones((5, 3)))
    b = Tensor(np.zeros(3))
    (x + b).sum().backward()
    assert np.array_equal(b.grad, [5.0, 5.0, 5.0])
    assert x.grad.shape == (5, 3)


def test_gradcheck_two_layer_mlp():
    rng = np.random.default_rng(7)
    params = nets.init_params("mlp", [6, 16, 4], 7)
    x = rng.normal(size=(8, 6))
    tgt = rng.normal(size=(8, 4))

    def loss_fn(p):
        d = nets.mlp_apply(p, Tensor(x)) - Tensor(tgt)
        return (d * d).mean()

    worst, n = gradcheck(loss_fn, params, n_coords=100, eps=1e-4)
    assert n == 100
    assert worst < 1e-4, f"max rel err {worst:.3g}"


def test_gradcheck_elementwise_chain():
    rng = np.random.default_rng(11)
    params = {"w": rng.normal(size=(5, 5)) * 0.5}
    x = rng.normal(size=(3, 5))

    def loss_fn(p):
        h = Tensor(x).matmul(p["w"])
        y = h.sigmoid() * h.tanh() + (h * h + 1e-3).sqrt() + (h.exp() + 1.0).log()
        return (y / (absval(y) + 1.0)).mean()

    worst, _ = gradcheck(loss_fn, params, n_coords=25, eps=1e-4)
    assert worst < 1e-4, f"max rel err {worst:.3g}"
