import numpy as np
import pytest

from gradcheck import numerical_grads, rel_error
from stfl.engine import (Tape, Tensor, backward, bce_with_logits_loss, concat, conv2d, conv_transpose2d,
                         instance_norm, l1_loss, leaky_relu, mean, mse_loss, mul, relu, sigmoid, tanh)
from stfl.engine import tensor as T
from stfl.errors import ContractError, NumericFault, ShapeError


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


def _projected(op, *arrays, R):
    """Scalar <op(arrays), R> through the engine (mean of product, rescaled)."""
    out = op(*[Tensor(a) for a in arrays])
    return float((out.data * R).sum())


def _analytic(op, arrays, R):
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = op(*leaves)
        loss = mean(mul(out, R * out.data.size))
    return backward(tape, loss, leaves)


def _check(op, arrays, h=1e-3):
    out = op(*[Tensor(a) for a in arrays])
    R = np.random.default_rng(123).standard_normal(out.shape)
    ana = _analytic(op, arrays, R)
    num = numerical_grads(lambda *arrs: _projected(op, *arrs, R=R), arrays, h)
    return max(rel_error(a, n) for a, n in zip(ana, num))


# (name, builder(rng) -> (op, arrays))
def _conv_case(stride, pad, k, bias=True):
    def build(rng):
        n, ci, co = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        h = int(rng.integers(k + 1, 8))
        x = rng.standard_normal((n, ci, h, h))
        w = rng.standard_normal((co, ci, k, k))
        arrays = [x, w] + ([rng.standard_normal(co)] if bias else [])
        return (lambda x, w, b=None: conv2d(x, w, b, stride=stride, padding=pad)), arrays
    return build


def _convt_case(stride, pad, k, op_pad):
    def build(rng):
        n, ci, co = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        h = int(rng.integers(2, 5))
        x = rng.standard_normal((n, ci, h, h))
        w = rng.standard_normal((ci, co, k, k))
        b = rng.standard_normal(co)
        return (lambda x, w, b: conv_transpose2d(x, w, b, stride=stride, padding=pad, output_padding=op_pad)), [x, w, b]
    return build


def _unary(fn, away=False):
    def build(rng):
        shape = (2, 3, 4, 4)
        x = _away_from_zero(rng, shape) if away else rng.standard_normal(shape)
        return fn, [x]
    return build


def _binary(fn, broadcast=False):
    def build(rng):
        a = rng.standard_normal((2, 3, 4, 4))
        b = rng.standard_normal((1, 3, 1, 1) if broadcast else (2, 3, 4, 4))
        return fn, [a, b]
    return build


def _inorm(rng):
    x = rng.standard_normal((2, 3, 5, 5)) * rng.uniform(0.5, 3) + rng.uniform(-1, 1)
    return (lambda x, g, b: instance_norm(x, g, b)), [x, rng.standard_normal(3), rng.standard_normal(3)]


def _concat(rng):
    a, b = rng.standard_normal((2, 2, 3, 3)), rng.standard_normal((2, 3, 3, 3))
    return (lambda a, b: concat([a, b], axis=1)), [a, b]


def _loss(fn, kind):
    def build(rng):
        p = rng.standard_normal((2, 1, 4, 4))
        if kind == "bce":
            t = (rng.random((2, 1, 4, 4)) > 0.5).astype(float)
            return (lambda p: fn(p, t)), [p]
        t = rng.standard_normal((2, 1, 4, 4))
        if kind == "l1":
            t = p - _away_from_zero(rng, p.shape)
        return (lambda p, t: fn(p, t)), [p, t]
    return build


CASES = {
    "conv2d_s1_p1_k3": _conv_case(1, 1, 3),
    "conv2d_s2_p1_k3": _conv_case(2, 1, 3),
    "conv2d_s2_p1_k4": _conv_case(2, 1, 4),
    "conv2d_s1_p0_k1_nobias": _conv_case(1, 0, 1, bias=False),
    "conv_transpose2d_k2_s2": _convt_case(2, 0, 2, 0),
    "conv_transpose2d_k3_s2_p1_op1": _convt_case(2, 1, 3, 1),
    "conv_transpose2d_k4_s2_p1": _convt_case(2, 1, 4, 0),
    "relu": _unary(relu, away=True),
    "leaky_relu": _unary(lambda x: leaky_relu(x, 0.2), away=True),
    "sigmoid": _unary(sigmoid),
    "tanh": _unary(tanh),
    "instance_norm": _inorm,
    "add": _binary(T.add),
    "add_broadcast": _binary(T.add, broadcast=True),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "mul_broadcast": _binary(T.mul, broadcast=True),
    "concat": _concat,
    "mean_all": _unary(lambda x: mean(x)),
    "mean_spatial": _unary(lambda x: mean(x, axis=(2, 3))),
    "bce_with_logits_loss": _loss(bce_with_logits_loss, "bce"),
    "mse_loss": _loss(mse_loss, "mse"),
    "l1_loss": _loss(l1_loss, "l1"),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_op_gradients_match_finite_differences(name):
    worst = 0.0
    for i in range(20):
        op, arrays = CASES[name](np.random.default_rng([7, i, len(name)]))
        worst = max(worst, _check(op, arrays))
    assert worst < 1e-5, f"{name}: max relative error {worst:.2e}"


@pytest.mark.parametrize("name", ["conv2d_s1_p1_k3", "conv_transpose2d_k2_s2", "instance_norm", "sigmoid"])
def test_single_precision_gradients(name):
    for i in range(5):
        op, arrays = CASES[name](np.random.default_rng([9, i]))
        out = op(*[Tensor(a) for a in arrays])
        R = np.random.default_rng(5).standard_normal(out.shape)
        ana = _analytic(op, [a.astype(np.float32) for a in arrays], R.astype(np.float32))
        num = numerical_grads(lambda *arrs: _projected(op, *arrs, R=R), arrays)
        assert max(rel_error(a, n) for a, n in zip(ana, num)) < 1e-3


def _two_layer(x, w1, b1, w2, b2):
    h = relu(conv2d(x, w1, b1, stride=1, padding=1))
    return conv2d(h, w2, b2, stride=2, padding=1)


def test_two_layer_conv_net_gradients():
    rng = np.random.default_rng(3)
    arrays = [rng.standard_normal((2, 2, 6, 6)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3),
              rng.standard_normal((2, 3, 3, 3)), rng.standard_normal(2)]
    assert _check(_two_layer, arrays) < 1e-5


def test_backward_is_linear_in_the_loss():
    rng = np.random.default_rng(4)
    arrays = [rng.standard_normal((2, 2, 6, 6)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3),
              rng.standard_normal((2, 3, 3, 3)), rng.standard_normal(2)]
    t1, t2 = rng.standard_normal((2, 2, 3, 3)), rng.standard_normal((2, 2, 3, 3))
    a, b = 1.7, -0.6

    def grads(loss_fn):
        leaves = [Tensor(x, requires_grad=True) for x in arrays]
        with Tape() as tape:
            loss = loss_fn(_two_layer(*leaves))
        return backward(tape, loss, leaves)

    g1 = grads(lambda o: mse_loss(o, t1))
    g2 = grads(lambda o: l1_loss(o, t2))
    gc = grads(lambda o: mse_loss(o, t1) * a + l1_loss(o, t2) * b)
    for x1, x2, xc in zip(g1, g2, gc):
        np.testing.assert_allclose(xc, a * x1 + b * x2, rtol=0, atol=1e-10)


@pytest.mark.parametrize("k,s,p", [(3, 1, 1), (3, 2, 1), (4, 2, 1), (2, 2, 0), (5, 3, 2)])
def test_conv_and_transposed_conv_are_adjoint(k, s, p):
    rng = np.random.default_rng([k, s, p])
    for _ in range(10):
        h = int(rng.integers(k, 12))
        x = rng.standard_normal((2, 3, h, h))
        w = rng.standard_normal((4, 3, k, k))
        y_shape = conv2d(Tensor(x), Tensor(w), stride=s, padding=p).shape
        y = rng.standard_normal(y_shape)
        ho = (y_shape[2] - 1) * s - 2 * p + k
        out_pad = h - ho
        assert 0 <= out_pad < s or out_pad == 0
        lhs = float((conv2d(Tensor(x), Tensor(w), stride=s, padding=p).data * y).sum())
        rhs = float((x * conv_transpose2d(Tensor(y), Tensor(w), stride=s, padding=p, output_padding=out_pad).data).sum())
        assert abs(lhs - rhs) < 1e-8 * max(1.0, abs(lhs))


def test_forward_backward_bitwise_deterministic():
    rng = np.random.default_rng(8)
    arrays = [rng.standard_normal((2, 2, 8, 8)).astype(np.float32), rng.standard_normal((3, 2, 3, 3)).astype(np.float32),
              rng.standard_normal(3).astype(np.float32), rng.standard_normal((2, 3, 3, 3)).astype(np.float32),
              rng.standard_normal(2).astype(np.float32)]

    def run():
        leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        with Tape() as tape:
            out = _two_layer(*leaves)
            loss = mean(mul(out, out))
        return out.data, backward(tape, loss, leaves)

    o1, g1 = run()
    o2, g2 = run()
    assert o1.tobytes() == o2.tobytes()
    assert all(a.tobytes() == b.tobytes() for a, b in zip(g1, g2))


# ---------------------------------------------------------------- spec examples

def test_identity_1x1_conv():
    x = np.random.default_rng(0).random((2, 1, 5, 5))
    out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)


def test_3x3_ones_kernel_on_constant_input():
    c = 0.37
    out = conv2d(Tensor(np.full((1, 1, 6, 6), c)), Tensor(np.ones((1, 1, 3, 3))), padding=1).data
    np.testing.assert_allclose(out[0, 0, 1:-1, 1:-1], 9 * c, rtol=1e-12)
    assert out[0, 0, 0, 0] == pytest.approx(4 * c)


def test_conv_output_extent():
    for h, k, s, p in [(64, 3, 2, 1), (7, 3, 1, 0), (9, 4, 2, 1), (10, 3, 3, 2)]:
        out = conv2d(Tensor(np.zeros((1, 1, h, h))), Tensor(np.zeros((1, 1, k, k))), stride=s, padding=p)
        assert out.shape[2] == (h + 2 * p - k) // s + 1


def test_sigmoid_zero():
    assert sigmoid(Tensor(np.zeros(3))).data.tolist() == [0.5, 0.5, 0.5]


def test_square_gradient():
    x = Tensor(np.array(3.0), requires_grad=True)
    with Tape() as tape:
        loss = mul(x, x)
    (g,) = backward(tape, loss, [x])
    assert g == pytest.approx(6.0)


def test_sigmoid_gradient_at_zero():
    x = Tensor(np.array(0.0), requires_grad=True)
    with Tape() as tape:
        loss = sigmoid(x)
    (g,) = backward(tape, loss, [x])
    assert g == pytest.approx(0.25)


def test_non_participating_parameter_gets_zero_gradient():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    unused = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = mean(mul(x, x))
    gx, gu = backward(tape, loss, [x, unused])
    np.testing.assert_array_equal(gu, np.zeros(3))
    np.testing.assert_allclose(gx, 0.5)


def test_non_scalar_loss_rejected():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = mul(x, x)
    with pytest.raises(ContractError):
        backward(tape, y, [x])


def test_shape_error_names_op_and_dims():
    with pytest.raises(ShapeError, match=r"conv2d.*3"):
        conv2d(Tensor(np.zeros((1, 3, 8, 8))), Tensor(np.zeros((4, 2, 3, 3))))
    with pytest.raises(ShapeError, match=r"add.*\(2, 3\).*\(4,\)"):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(4)))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_trips_numeric_fault():
    with pytest.raises(NumericFault):
        mul(Tensor(np.array([np.inf])), Tensor(np.array([0.0])))


def test_ops_preserve_single_precision():
    x = Tensor(np.ones((1, 1, 4, 4), dtype=np.float32))
    y = (x * 2.0 + 1.0) - 0.5
    assert y.dtype == np.float32
    assert sigmoid(y).dtype == np.float32


def test_tape_records_only_tracked_ops():
    a = Tensor(np.ones(3))
    with Tape() as tape:
        mul(a, a)
    assert len(tape) == 0
    b = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        mul(b, a)
    assert len(tape) == 1
