import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stnas import autodiff as ad
from stnas import layers
from stnas.autodiff import ShapeError, Tape, Tensor, apply_primitive, grad_check


def test_relu_example():
    out = apply_primitive("relu", [np.array([-1.0, 0.0, 2.0])])
    assert np.array_equal(out.values, [0.0, 0.0, 2.0])


def test_softmax_symmetry_example():
    out = ad.softmax(Tensor([0.0, 0.0]), axis=0)
    assert np.allclose(out.values, [0.5, 0.5], atol=1e-15)


def test_causal_conv_identity_kernel():
    x = Tensor(np.array([5.0, 7.0, 9.0]).reshape(3, 1, 1))
    w = Tensor(np.array([1.0, 0.0]).reshape(2, 1, 1))
    out = ad.causal_conv1d(x, w, dilation=1)
    assert np.array_equal(out.values.reshape(-1), [5.0, 7.0, 9.0])


def test_causal_conv_shifts_with_dilation():
    x = Tensor(np.arange(1.0, 6.0).reshape(5, 1, 1))
    w = Tensor(np.array([0.0, 1.0]).reshape(2, 1, 1))  # pure lag tap
    out = ad.causal_conv1d(x, w, dilation=2)
    assert np.array_equal(out.values.reshape(-1), [0.0, 0.0, 1.0, 2.0, 3.0])


def test_backward_square():
    x = Tensor(3.0)
    with Tape() as tape:
        tape.watch(x)
        loss = ad.mul(x, x)
        grads = tape.backward(loss)
    assert x.grad == pytest.approx(6.0)
    assert grads[x.node_id].values == pytest.approx(6.0)


def test_backward_sum_relu():
    x = Tensor([-1.0, 2.0])
    with Tape() as tape:
        tape.watch(x)
        loss = layers.sum_all(ad.relu(x))
        tape.backward(loss)
    assert np.array_equal(x.grad, [0.0, 1.0])


def test_backward_softmax_sum_is_zero():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=5))
    with Tape() as tape:
        tape.watch(x)
        loss = layers.sum_all(ad.softmax(x, axis=0))
        tape.backward(loss)
    assert np.allclose(x.grad, 0.0, atol=1e-12)


def test_unreachable_nodes_keep_zero_gradient():
    x = Tensor([1.0, 2.0])
    y = Tensor([3.0, 4.0])
    with Tape() as tape:
        tape.watch(x)
        tape.watch(y)
        loss = layers.sum_all(ad.mul(x, x))
        tape.backward(loss)
    assert np.array_equal(y.grad, [0.0, 0.0])


def test_non_scalar_loss_rejected():
    x = Tensor([1.0, 2.0])
    with Tape() as tape:
        tape.watch(x)
        out = ad.relu(x)
        with pytest.raises(ShapeError):
            tape.backward(out)


def test_unknown_kind_rejected():
    with pytest.raises(ValueError, match="unknown primitive"):
        apply_primitive("frobnicate", [np.zeros(2)])


def test_shape_mismatch_names_primitive_and_extents():
    with pytest.raises(ShapeError, match="matmul.*3"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    with pytest.raises(ShapeError, match="add"):
        ad.add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))


GRAD_CASES = {
    "matmul": lambda x: layers.sum_all(ad.matmul(x, Tensor(np.linspace(-1, 1, 12).reshape(4, 3)))),
    "matmul-batched": lambda x: layers.sum_all(
        ad.mul(m := ad.matmul(x, ad.transpose(x, (0, 2, 1))), m)
    ),
    "add": lambda x: layers.sum_all(ad.add(x, ad.mul(x, x))),
    "sub": lambda x: layers.sum_all(ad.sub(ad.mul(x, x), x)),
    "elementwise-mul": lambda x: layers.sum_all(ad.mul(x, ad.tanh(x))),
    "scalar-scale": lambda x: layers.sum_all(ad.scale(ad.mul(x, x), -2.5)),
    "relu": lambda x: layers.sum_all(ad.relu(ad.mul(x, x))),
    "sigmoid": lambda x: layers.sum_all(ad.sigmoid(x)),
    "tanh": lambda x: layers.sum_all(ad.tanh(x)),
    "exp": lambda x: layers.sum_all(ad.exp(x)),
    "softmax-over-axis": lambda x: layers.sum_all(
        ad.mul(s := ad.softmax(x, axis=1), s)
    ),
    "concat-over-axis": lambda x: layers.sum_all(
        ad.mul(c := ad.concat([x, ad.tanh(x)], axis=0), c)
    ),
    "slice": lambda x: layers.sum_all(ad.mul(s := ad.slice_axis(x, 1, 1, 3), s)),
    "reshape": lambda x: layers.sum_all(ad.mul(r := ad.reshape(x, (x.size,)), r)),
    "sum-over-axis": lambda x: layers.sum_all(ad.mul(s := ad.sum_axis(x, 0), s)),
    "mean-over-axis": lambda x: layers.sum_all(ad.mul(m := ad.mean_axis(x, 1), m)),
    "transpose": lambda x: layers.sum_all(ad.mul(t := ad.transpose(x, (1, 0, 2)), t)),
}


@pytest.mark.parametrize("kind", sorted(GRAD_CASES))
def test_grad_check_per_primitive(kind):
    rng = np.random.default_rng(hash(kind) % 2**32)
    shape = (2, 4, 3) if kind in ("transpose", "matmul-batched") else (3, 4)
    point = Tensor(rng.normal(size=shape) + 0.1)  # nudge off relu kinks
    err = grad_check(GRAD_CASES[kind], point, eps=1e-5)
    assert err <= 1e-4, f"{kind}: relative error {err}"


def test_grad_check_causal_conv():
    rng = np.random.default_rng(7)
    w = Tensor(rng.normal(size=(2, 4, 4)))

    def f(x):
        return layers.sum_all(ad.tanh(ad.causal_conv1d(x, w, dilation=2)))

    point = Tensor(rng.normal(size=(6, 3, 4)))
    assert grad_check(f, point, eps=1e-5) <= 1e-4

    x = Tensor(rng.normal(size=(6, 3, 4)))

    def g(wt):
        return layers.sum_all(ad.tanh(ad.causal_conv1d(x, wt, dilation=1)))

    assert grad_check(g, w, eps=1e-5) <= 1e-4


def test_grad_check_square_analytic():
    point = Tensor(3.0)
    err = grad_check(lambda x: ad.mul(x, x), point, eps=1e-5)
    assert err < 1e-8


def test_grad_check_rejects_non_finite():
    point = Tensor(np.array([700.0]))
    with np.errstate(over="ignore"), pytest.raises(ValueError, match="finite"):
        grad_check(lambda x: layers.sum_all(ad.exp(ad.mul(x, x))), point)


def test_replay_bit_identical():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(4, 3)))
    w = Tensor(rng.normal(size=(3, 2)))
    with Tape() as tape:
        tape.watch(x)
        tape.watch(w)
        h = ad.relu(ad.matmul(x, w))
        loss = layers.mean_all(ad.mul(h, h))
        tape.backward(loss)
    first_grad_x = x.grad.copy()
    first_grad_w = w.grad.copy()
    replayed = tape.replay()
    assert np.array_equal(replayed[loss.node_id], loss.values)
    assert np.array_equal(replayed[h.node_id], h.values)
    tape.backward(loss)
    assert np.array_equal(x.grad, first_grad_x)
    assert np.array_equal(w.grad, first_grad_w)


def test_repeat_forward_bit_identical():
    rng = np.random.default_rng(11)
    x_vals = rng.normal(size=(5, 4))

    def run():
        x = Tensor(x_vals)
        with Tape() as tape:
            tape.watch(x)
            y = ad.softmax(ad.tanh(ad.matmul(x, ad.transpose(x, (1, 0)))), axis=1)
            loss = layers.sum_all(ad.mul(y, y))
            tape.backward(loss)
        return loss.values.copy(), x.grad.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert np.array_equal(l1, l2)
    assert np.array_equal(g1, g2)


def test_causal_conv_ignores_future():
    rng = np.random.default_rng(5)
    x_vals = rng.normal(size=(8, 2, 3))
    w = Tensor(rng.normal(size=(2, 3, 3)))
    base = ad.causal_conv1d(Tensor(x_vals), w, dilation=2).values
    for t in range(1, 8):
        bumped = x_vals.copy()
        bumped[t:] += rng.normal(size=bumped[t:].shape)
        out = ad.causal_conv1d(Tensor(bumped), w, dilation=2).values
        assert np.array_equal(out[:t], base[:t])


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.floats(min_value=-30, max_value=30), min_size=2, max_size=6),
)
def test_softmax_rows_sum_to_one(logits):
    out = ad.softmax(Tensor(logits), axis=0)
    assert abs(out.values.sum() - 1.0) <= 1e-12


def test_scale_by_and_bias_helpers():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    s = Tensor([2.0])
    assert np.array_equal(layers.scale_by(x, s).values, x.values * 2.0)
    b = Tensor([1.0, 10.0, 100.0])
    assert np.array_equal(layers.add_bias(x, b).values, x.values + b.values)


def test_abs_helper_gradient():
    x = Tensor([-2.0, 3.0])
    with Tape() as tape:
        tape.watch(x)
        loss = layers.sum_all(layers.abs_val(x))
        tape.backward(loss)
    assert np.array_equal(x.grad, [-1.0, 1.0])
