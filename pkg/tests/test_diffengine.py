import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from gksn.diffengine import GraphError, KinkCollision, Tape, backward, grad_check, gradient
from gksn.training import huber

finite = st.floats(-5.0, 5.0, allow_nan=False)


def test_record_examples():
    t = Tape()
    assert t.record("mul", 3, 4).value == 12
    assert t.record("relu", -2).value == 0
    assert t.record("sqrt", 2).value == math.sqrt(2)
    # numeric operands are constants, not tape entries
    assert t.record("mul", 3, 4) and all(not p for p in t.parents)


def test_record_errors():
    t = Tape()
    x = t.leaf(0.0)
    with pytest.raises(GraphError):
        x / 0.0
    with pytest.raises(GraphError):
        t.sqrt(t.leaf(-1.0))
    with pytest.raises(GraphError):
        t.ln(x)
    with pytest.raises(GraphError):
        t.record("tanh", x)
    with pytest.raises(GraphError):
        Tape().leaf(1.0) + x
    with pytest.raises(GraphError):
        t.dot([x], [1.0, 2.0])


def test_backward_examples():
    t = Tape()
    x, y = t.leaf(3.0), t.leaf(4.0)
    g = t.backward(x * y)
    assert (g[x], g[y]) == (4.0, 3.0)
    for v, want in [(-1.0, 0.0), (2.0, 1.0), (0.0, 0.0)]:
        t = Tape()
        x = t.leaf(v)
        assert t.backward(t.relu(x))[x] == want


def test_sqrt_at_zero_has_zero_derivative():
    t = Tape()
    x = t.leaf(0.0)
    assert t.backward(t.sqrt(x))[x] == 0.0


def test_backward_twice_requires_reset():
    t = Tape()
    x = t.leaf(2.0)
    y = x * x
    assert t.backward(y)[x] == 4.0
    with pytest.raises(GraphError):
        backward(t, y)
    t.reset()
    assert t.backward(y)[x] == 4.0


def test_every_op_partial():
    # hand derivatives at a point away from every kink
    a, b = 1.3, -0.7
    cases = {
        "add": (lambda t, x, y: x + y, (1.0, 1.0)),
        "sub": (lambda t, x, y: x - y, (1.0, -1.0)),
        "mul": (lambda t, x, y: x * y, (b, a)),
        "div": (lambda t, x, y: x / y, (1 / b, -a / b**2)),
        "neg": (lambda t, x, y: -x, (-1.0, 0.0)),
        "relu": (lambda t, x, y: t.relu(x) + t.relu(y), (1.0, 0.0)),
        "max0": (lambda t, x, y: t.max0(y), (0.0, 0.0)),
        "sqrt": (lambda t, x, y: t.sqrt(x), (0.5 / math.sqrt(a), 0.0)),
        "sin": (lambda t, x, y: t.sin(x * y), (b * math.cos(a * b), a * math.cos(a * b))),
        "ln": (lambda t, x, y: t.ln(x), (1 / a, 0.0)),
        "dot": (lambda t, x, y: t.dot([x, y, x], [y, 2.0, 3.0]), (b + 3.0, a + 2.0)),
    }
    for name, (f, want) in cases.items():
        val, g = gradient(lambda t, v: f(t, *v), [a, b])
        np.testing.assert_allclose(g, want, rtol=1e-15, err_msg=name)


def test_reused_node_accumulates():
    t = Tape()
    x = t.leaf(1.5)
    y = x * x * x + t.sin(x) * x
    assert t.backward(y)[x] == pytest.approx(3 * 1.5**2 + math.cos(1.5) * 1.5 + math.sin(1.5), rel=1e-15)


def test_determinism_bit_identical():
    f = lambda t, v: t.sin(v[0] * v[1]) + t.sqrt(v[0] * v[0] + 1.0) / (v[1] + 3.0)
    assert gradient(f, [0.3, 0.9])[1].tobytes() == gradient(f, [0.3, 0.9])[1].tobytes()


@given(finite, finite)
def test_composite_gradients_match_finite_differences(x, y):
    def f(t, v):
        a, b = v
        return t.sin(a * b) + t.sqrt(a * a + b * b + 1.0) + t.ln(b * b + 2.0) * a - a / (b * b + 1.0)

    # compare directly: a relative measure is ill-posed on components that vanish
    _, g = gradient(f, [x, y])
    h = 1e-5
    fd = []
    for i in range(2):
        p, q = [x, y], [x, y]
        p[i] += h
        q[i] -= h
        fd.append((gradient(f, p)[0] - gradient(f, q)[0]) / (2 * h))
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)


def test_grad_check_examples():
    assert grad_check(lambda t, v: v[0] * v[0], [3.0]) <= 1e-9

    def h(t, v):  # Huber, quadratic branch at e = 0.5
        e = v[0] - 1.0
        return 0.5 * e * e

    assert grad_check(h, [1.5], numeric=lambda x: huber(x[0], 1.0)) <= 1e-7


def test_grad_check_detects_kink():
    with pytest.raises(KinkCollision):
        grad_check(lambda t, v: t.relu(v[0]), [1e-7], step=1e-5)


def test_grad_check_vectorized_oracle():
    A = np.random.default_rng(0).normal(size=(5, 5))
    f = lambda t, v: t.dot(v, [t.dot(v, list(row)) for row in A])
    numeric = lambda P: np.einsum("pi,ij,pj->p", P, A, P)
    x = np.random.default_rng(1).normal(size=5)
    assert grad_check(f, x, numeric=numeric, vectorized=True) <= 1e-8


@given(st.floats(0.05, 4.0), st.floats(0.05, 4.0))
def test_relu_network_gradient(x, y):
    assume(abs(x - y) > 1e-3 and abs(x - 2 * y) > 1e-3)
    f = lambda t, v: t.relu(v[0] - v[1]) * 2.0 + t.relu(v[1] * 2.0 - v[0])
    assert grad_check(f, [x, y]) <= 1e-6
