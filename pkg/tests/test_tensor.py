from __future__ import annotations

import math

import numpy as np
import pytest

from moegap import tensor as T
from _util import gradcheck

rng = np.random.default_rng(7)


def r(*shape):
    return rng.standard_normal(shape)


# -- forward examples ------------------------------------------------------------

def test_matmul_examples():
    a = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(T.Tensor(np.eye(2)), a).data, a.data)
    assert np.array_equal(T.matmul(T.Tensor(np.eye(2)), T.Tensor(np.zeros((2, 1)))).data, np.zeros((2, 1)))
    assert np.array_equal(T.matmul(a, T.Tensor([[5.0], [6.0]])).data, [[17.0], [39.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(T.ShapeError):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


def test_silu_examples():
    assert T.silu(T.Tensor([0.0])).data[0] == 0.0
    assert T.silu(T.Tensor([50.0])).data[0] == pytest.approx(50.0, rel=1e-15)
    assert T.silu(T.Tensor([1.0])).data[0] == pytest.approx(1.0 / (1.0 + math.exp(-1.0)), abs=1e-15)
    assert T.silu(T.Tensor([1.0])).data[0] == pytest.approx(0.7310585786300049, abs=1e-15)
    assert T.silu(T.Tensor([-800.0])).data[0] == pytest.approx(0.0, abs=1e-300)


def test_layernorm_examples():
    one, zero = T.Tensor(np.ones(3)), T.Tensor(np.zeros(3))
    assert np.allclose(T.layernorm(T.Tensor([5.0, 5.0, 5.0]), one, zero).data, 0.0)
    out = T.layernorm(T.Tensor([-1.0, 1.0]), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)), eps=1e-12).data
    assert np.allclose(out, [-1.0, 1.0], atol=1e-10)
    out = T.layernorm(T.Tensor([0.0, 2.0, 4.0]), one, zero).data
    expect = np.array([-2.0, 0.0, 2.0]) / math.sqrt(8.0 / 3.0 + 1e-5)
    assert np.allclose(out, expect, atol=1e-14)
    assert np.allclose(out, [-1.2247, 0.0, 1.2247], atol=1e-4)


def test_softmax_and_cross_entropy_examples():
    assert np.allclose(T.softmax(T.Tensor([0.0, 0.0])).data, [0.5, 0.5])
    s = T.softmax(T.Tensor([1.0, 2.0, 3.0])).data
    e = np.exp([1.0, 2.0, 3.0])
    assert np.allclose(s, e / e.sum(), atol=1e-15)
    assert np.allclose(s, [0.0900, 0.2447, 0.6652], atol=1e-4)
    logits = T.Tensor([[1000.0, 0.0, 0.0]])
    assert T.cross_entropy(logits, np.array([0])).item() == pytest.approx(0.0, abs=1e-300)


# -- gradients -----------------------------------------------------------------

UNARY = {
    "square": T.square,
    "exp": T.exp,
    "sigmoid": T.sigmoid,
    "silu": T.silu,
    "softmax": lambda a: T.softmax(a, axis=-1),
    "log_softmax": lambda a: T.log_softmax(a, axis=-1),
    "transpose": lambda a: T.transpose(a),
    "reshape": lambda a: T.reshape(a, (12,)),
    "getitem": lambda a: T.getitem(a, (slice(1, 3), slice(None))),
    "mean_axis": lambda a: T.mean(a, axis=0),
    "scale": lambda a: T.scale(a, -2.5),
    "neg": lambda a: -a,
    "masked_fill": lambda a: T.masked_fill(a, np.eye(3, 4, dtype=bool), -3.0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    op = UNARY[name]
    x = r(3, 4)
    w = T.Tensor(r(*op(T.Tensor(x)).shape))
    gradcheck(lambda a: T.tsum(T.mul(op(a), w)), [x])


def test_positive_domain_gradients():
    x = np.abs(r(3, 4)) + 0.5
    w = r(3, 4)
    gradcheck(lambda a: T.tsum(T.mul(T.log(a), T.Tensor(w))), [x])
    gradcheck(lambda a: T.tsum(T.mul(T.sqrt(a), T.Tensor(w))), [x])


@pytest.mark.parametrize("op", [T.add, T.sub, T.mul, T.div])
def test_binary_gradients_with_broadcast(op):
    w = r(4, 5)
    b = r(5) if op is not T.div else np.abs(r(5)) + 0.5
    gradcheck(lambda x, y: T.tsum(T.mul(op(x, y), T.Tensor(w))), [r(4, 5), b])


def test_matmul_linear_gradients():
    w = r(2, 3, 5)
    gradcheck(lambda a, b: T.tsum(T.mul(T.matmul(a, b), T.Tensor(w))), [r(2, 3, 4), r(4, 5)])
    gradcheck(lambda a, b: T.tsum(T.mul(T.matmul(a, b), T.Tensor(w))), [r(2, 3, 4), r(2, 4, 5)])
    gradcheck(lambda x, W: T.tsum(T.mul(T.linear(x, W), T.Tensor(w))), [r(2, 3, 4), r(5, 4)])


def test_layernorm_gradient():
    w = r(3, 6)
    gradcheck(lambda x, g, b: T.tsum(T.mul(T.layernorm(x, g, b), T.Tensor(w))), [r(3, 6), r(6), r(6)])


def test_cross_entropy_and_embedding_gradients():
    targets = np.array([[1, 0, 4], [2, 2, 3]])
    gradcheck(lambda z: T.cross_entropy(z, targets), [r(2, 3, 5)])
    ids = np.array([[0, 2, 2], [1, 0, 3]])
    w = r(2, 3, 4)
    gradcheck(lambda E: T.tsum(T.mul(T.embedding(E, ids), T.Tensor(w))), [r(5, 4)])


def test_gather_scatter_concat_stack_gradients():
    idx = np.array([[0, 2], [3, 1], [1, 0]])
    w = r(3, 2)
    gradcheck(lambda a: T.tsum(T.mul(T.take_along_axis(a, idx, axis=1), T.Tensor(w))), [r(3, 4)])
    w4 = r(3, 4)
    gradcheck(lambda v: T.tsum(T.mul(T.scatter(v, idx, 4), T.Tensor(w4))), [r(3, 2)])
    w6 = r(3, 6)
    gradcheck(lambda a, b: T.tsum(T.mul(T.concat([a, b], axis=1), T.Tensor(w6))), [r(3, 4), r(3, 2)])
    w7 = r(2, 3, 4)
    gradcheck(lambda a, b: T.tsum(T.mul(T.stack([a, b]), T.Tensor(w7))), [r(3, 4), r(3, 4)])


def test_backward_requires_scalar():
    x = T.Tensor(r(3), requires_grad=True)
    with pytest.raises(T.GradientError):
        T.backward(T.mul(x, x))


def test_backward_accumulates_until_reset():
    x = T.Tensor(r(4), requires_grad=True)
    T.backward(T.tsum(T.square(x)))
    first = x.grad.copy()
    T.backward(T.tsum(T.square(x)))
    assert np.allclose(x.grad, 2 * first, rtol=0, atol=1e-15)
    T.zero_grad([x])
    T.backward(T.tsum(T.square(x)))
    assert np.array_equal(x.grad, first)


def test_shared_subexpression_visited_once():
    x = T.Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = T.mul(x, x)
    T.backward(T.tsum(T.add(y, y)))
    assert np.allclose(x.grad, 4 * x.data)
    tape = T.tape_of(T.tsum(T.add(y, y)))
    assert len(tape) == len({id(n) for n in tape})


def test_linearity_of_backward():
    x0 = r(3, 4)
    f = lambda t: T.tsum(T.silu(t))
    g = lambda t: T.tsum(T.mul(T.exp(T.scale(t, 0.3)), t))

    def grad_of(build):
        t = T.Tensor(x0.copy(), requires_grad=True)
        T.backward(build(t))
        return t.grad

    a, b = 1.7, -0.4
    combined = grad_of(lambda t: T.add(T.scale(f(t), a), T.scale(g(t), b)))
    assert np.allclose(combined, a * grad_of(f) + b * grad_of(g), rtol=1e-12, atol=1e-14)


def test_no_grad_builds_no_tape():
    x = T.Tensor(r(3), requires_grad=True)
    with T.no_grad():
        y = T.tsum(T.square(x))
    assert not y.requires_grad
    assert T.is_grad_enabled()


def test_bitwise_determinism():
    def run():
        local = np.random.default_rng(11)
        a = T.Tensor(local.standard_normal((5, 6)), requires_grad=True)
        w = T.Tensor(local.standard_normal((4, 6)), requires_grad=True)
        g, b = T.Tensor(np.ones(4), requires_grad=True), T.Tensor(np.zeros(4), requires_grad=True)
        out = T.tsum(T.softmax(T.layernorm(T.silu(T.linear(a, w)), g, b)))
        T.backward(T.mul(out, out))
        return out.data.tobytes(), a.grad.tobytes(), w.grad.tobytes()

    assert run() == run()


def test_tensor_invariants():
    t = T.Tensor([[1.0, 2.0, 3.0]])
    assert t.shape == (1, 3) and t.size == 3 and t.data.dtype == np.float64
    assert not T.Tensor([np.nan]).all_finite()
