import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusionlab import autodiff as ad
from fusionlab.autodiff import Adam, AdamState, ContractError, Parameter, ShapeError, Tape, Tensor


def triple_loop_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += float(a[i, t]) * float(b[t, j])
    return out


def softmax_oracle(z):
    z = np.asarray(z, dtype=np.longdouble)
    e = np.exp(z - z.max())
    return (e / e.sum()).astype(np.float64)


# -- matmul -------------------------------------------------------------------


def test_matmul_identity():
    out = ad.matmul(Tensor(np.eye(2)), Tensor([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [4.0]])


def test_matmul_by_hand():
    out = Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])
    assert out.data.tolist() == [[11.0]]


@pytest.mark.parametrize("seed", range(5))
def test_matmul_matches_triple_loop(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    out = ad.matmul(Tensor(a), Tensor(b))
    np.testing.assert_allclose(out.data, triple_loop_matmul(a, b), atol=1e-5)


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# -- softmax / cross-entropy ----------------------------------------------------


def test_softmax_uniform():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-6)


def test_softmax_no_overflow():
    p = ad.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(p))
    assert p[0] == pytest.approx(1.0) and p[1] == pytest.approx(0.0, abs=1e-12)


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=12))
@settings(max_examples=50, deadline=None)
def test_softmax_matches_extended_precision(z):
    p = ad.softmax(Tensor(np.array(z), dtype=np.float64)).data
    np.testing.assert_allclose(p, softmax_oracle(z), atol=1e-6)
    assert abs(p.sum() - 1) < 1e-9


def test_cross_entropy_uniform_is_log_k():
    for label in range(10):
        loss = ad.cross_entropy(Tensor(np.zeros(10)), label)
        assert float(loss.data) == pytest.approx(math.log(10), abs=1e-6)


def test_cross_entropy_saturated():
    logits = np.zeros(10)
    logits[3] = 20.0
    assert float(ad.cross_entropy(Tensor(logits, dtype=np.float64), 3).data) < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_cross_entropy_matches_log_softmax_oracle(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(0, 3, 7)
    label = int(rng.integers(7))
    loss = ad.cross_entropy(Tensor(z, dtype=np.float64), label)
    assert float(loss.data) == pytest.approx(-math.log(softmax_oracle(z)[label]), abs=1e-6)


def test_cross_entropy_rejects_bad_label():
    with pytest.raises(IndexError):
        ad.cross_entropy(Tensor(np.zeros(4)), 4)


# -- backward -----------------------------------------------------------------


def test_backward_square():
    x = Tensor(3.0, requires_grad=True)
    with Tape() as tape:
        y = x * x
    tape.backward(y)
    assert float(x.grad) == pytest.approx(6.0)


def test_backward_softmax_sum_is_zero():
    x = Tensor(np.random.default_rng(0).normal(size=6), requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        y = ad.softmax(x).sum()
    tape.backward(y)
    np.testing.assert_allclose(x.grad, 0.0, atol=1e-12)


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ContractError):
        tape.backward(y)


def test_backward_accumulates_over_reuse():
    x = Tensor(2.0, requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        y = x * x + x * 3.0
    tape.backward(y)
    assert float(x.grad) == pytest.approx(7.0)


def test_no_record_suspends_tape():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        with ad.no_record():
            x * 2.0
    assert tape.nodes == []


@pytest.mark.parametrize("seed", range(10))
def test_composite_graph_grad_check(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 8))
    w = rng.normal(size=(8, 5))
    g, b = rng.normal(size=5), rng.normal(size=5)
    labels = rng.integers(0, 5, size=4)

    def f(x, w, g, b):
        h = ad.layernorm(x @ w, g, b)
        p = ad.softmax(h)
        return ad.cross_entropy(p * 3.0, labels)

    rep = ad.grad_check(f, [x, w, g, b])
    assert rep.passed, rep.max_rel_error


# -- primitives: grad_check across seeds ---------------------------------------

PRIMITIVES = {
    "add": (lambda a, b: (a + b).sum(), [(3, 4), (4,)]),
    "sub": (lambda a, b: (a - b * b).sum(), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: (a * b).sum(), [(2, 3), (2, 3)]),
    "div": (lambda a, b: (a / (b * b + 1.0)).sum(), [(2, 3), (2, 3)]),
    "neg": (lambda a: (-a * a).sum(), [(5,)]),
    "exp": (lambda a: ad.exp(a).sum(), [(5,)]),
    "sigmoid": (lambda a: ad.sigmoid(a).sum(), [(5,)]),
    "gelu": (lambda a: ad.gelu(a).sum(), [(6,)]),
    "clamp": (lambda a: (ad.clamp(a, -0.5, 0.5) * a).sum(), [(6,)]),
    "matmul": (lambda a, b: (a @ b).sum(), [(3, 4), (4, 2)]),
    "batched_matmul": (lambda a, b: ((a @ b) * (a @ b)).sum(), [(2, 3, 4), (2, 4, 2)]),
    "reshape_transpose": (lambda a: (a.reshape(3, 4).transpose(1, 0) @ np.arange(6.0).reshape(3, 2)).sum(),
                          [(2, 6)]),
    "getitem": (lambda a: (a[:, 1:3] * a[:, 0:2]).sum(), [(3, 4)]),
    "concat": (lambda a, b: (ad.concat([a, b], axis=1) * ad.concat([b, a], axis=1)).sum(), [(2, 3), (2, 3)]),
    "broadcast_to": (lambda a: (ad.broadcast_to(a, (3, 4)) * np.arange(12.0).reshape(3, 4)).sum(), [(1, 4)]),
    "sum_axis": (lambda a: (a.sum(axis=0) * a.sum(axis=0)).sum(), [(3, 4)]),
    "mean": (lambda a: (a.mean(axis=1, keepdims=True) * a).sum(), [(3, 4)]),
    "softmax": (lambda a: (ad.softmax(a) * np.arange(12.0).reshape(3, 4)).sum(), [(3, 4)]),
    "log_softmax": (lambda a: (ad.log_softmax(a) * np.arange(12.0).reshape(3, 4)).sum(), [(3, 4)]),
    "cross_entropy": (lambda a: ad.cross_entropy(a, [0, 2, 1]), [(3, 4)]),
    "layernorm": (lambda a, g, b: (ad.layernorm(a, g, b) * np.arange(32.0).reshape(4, 8)).sum(),
                  [(4, 8), (8,), (8,)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_grad_check(name):
    fn, shapes = PRIMITIVES[name]
    for seed in range(10):
        rng = np.random.default_rng(seed)
        inputs = [rng.normal(size=s) for s in shapes]
        rep = ad.grad_check(fn, inputs)
        assert rep.passed, (name, seed, rep.max_rel_error)


# -- grad_check itself ----------------------------------------------------------


def test_grad_check_linear_exact():
    w = np.random.default_rng(1).normal(size=(4, 3))
    rep = ad.grad_check(lambda x: (x @ w).sum(), [np.ones((2, 4))])
    assert rep.max_rel_error < 1e-6


def test_grad_check_layernorm_tokens():
    rng = np.random.default_rng(2)
    ones, zeros = Tensor(np.ones(8), dtype=np.float64), Tensor(np.zeros(8), dtype=np.float64)
    weights = rng.normal(size=(4, 8))
    rep = ad.grad_check(lambda x: (ad.layernorm(x, ones, zeros) * weights).sum(), [rng.normal(size=(4, 8))])
    assert rep.max_rel_error <= 1e-3


def test_grad_check_cross_entropy_on_raw_logits():
    rep = ad.grad_check(lambda z: ad.cross_entropy(z, [1, 0]), [np.random.default_rng(3).normal(size=(2, 5))])
    assert rep.max_rel_error <= 1e-3


def test_grad_check_reports_wrong_gradient():
    def wrong_vjp(x):
        return ad._make(np.asarray((x.data ** 2).sum()), (x,), lambda g: (g * x.data,))

    rep = ad.grad_check(wrong_vjp, [np.ones(3)])
    assert not rep.passed and rep.max_rel_error == pytest.approx(0.5)


# -- adaptive step --------------------------------------------------------------


def test_adaptive_step_zero_gradient_unchanged():
    p = Parameter(np.array([1.0, -2.0]), name="p")
    p.grad = np.zeros(2, dtype=np.float32)
    before = p.data.copy()
    ad.adaptive_step(p, 0.1, AdamState.like(p))
    np.testing.assert_array_equal(p.data, before)


def test_adaptive_step_first_step_is_signed():
    p = Parameter(np.array([0.0, 0.0, 0.0]), name="p", dtype=np.float64)
    p.grad = np.array([3.0, -0.01, 7.0])
    ad.adaptive_step(p, 0.05, AdamState.like(p))
    np.testing.assert_allclose(p.data, [-0.05, 0.05, -0.05], rtol=1e-6)


def test_adam_quadratic_bowl():
    x = Parameter(np.array([0.0]), name="x", dtype=np.float64)
    opt = Adam([x], 0.1)
    for _ in range(500):
        opt.zero_grad()
        with Tape() as tape:
            loss = ((x - 5.0) * (x - 5.0)).sum() * 0.5
        tape.backward(loss)
        opt.step()
    assert abs(float(x.data[0]) - 5.0) < 1e-2


def test_adaptive_step_rejects_frozen():
    p = Parameter(np.ones(2), name="p")
    p.freeze()
    p.grad = np.ones(2, dtype=np.float32)
    with pytest.raises(ContractError):
        ad.adaptive_step(p, 0.1, AdamState.like(p))


def test_broadcast_mismatch_raises():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))
