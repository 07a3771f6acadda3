import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sclm import numerics as nx
from sclm.gradcheck import numeric_grad, relative_error
from sclm.masks import causal_mask


def f64(a):
    return nx.parameter(np.asarray(a, dtype=np.float64), dtype=np.float64)


def check_grads(build, leaves, tol=1e-4):
    """Tape gradients of ``build()`` against central differences for each leaf."""
    for leaf in leaves:
        leaf.zero_grad()
    out = build()
    out.backward()
    for leaf in leaves:
        num = numeric_grad(build, leaf)
        assert relative_error(leaf.grad, num).max() < tol


# -- matmul ------------------------------------------------------------------

def test_matmul_identity_and_projector():
    b = nx.tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(nx.matmul(nx.tensor(np.eye(2)), b).data, b.data)
    out = nx.matmul(nx.tensor([[1.0, 0.0], [0.0, 0.0]]), nx.tensor([[5.0], [7.0]]))
    assert np.array_equal(out.data, [[5.0], [0.0]])


def test_matmul_shape_errors():
    with pytest.raises(nx.ShapeError):
        nx.matmul(nx.tensor(np.ones((2, 3))), nx.tensor(np.ones((2, 3))))
    with pytest.raises(nx.ShapeError):
        nx.matmul(nx.tensor(np.ones(3)), nx.tensor(np.ones((3, 1))))


def test_matmul_gradients(rng):
    with nx.precision(np.float64):
        a, b = f64(rng.normal(size=(3, 4))), f64(rng.normal(size=(4, 2)))
        w = rng.normal(size=(3, 2))
        check_grads(lambda: nx.total(nx.mul(nx.matmul(a, b), nx.tensor(w))), [a, b])


def test_batched_matmul_gradients(rng):
    with nx.precision(np.float64):
        a, b = f64(rng.normal(size=(2, 3, 4))), f64(rng.normal(size=(2, 4, 5)))
        w = rng.normal(size=(2, 3, 5))
        check_grads(lambda: nx.total(nx.mul(nx.matmul(a, b), nx.tensor(w))), [a, b])


# -- softmax -----------------------------------------------------------------

def test_softmax_uniform_and_single_survivor():
    out = nx.masked_softmax(nx.tensor(np.zeros(4)), np.ones(4, bool))
    assert np.allclose(out.data, 0.25)
    out = nx.masked_softmax(nx.tensor(np.zeros(3)), np.array([True, False, False]))
    assert np.array_equal(out.data, [1.0, 0.0, 0.0])


def test_softmax_matches_decimal_reference():
    getcontext().prec = 50
    ref = [Decimal(v).exp() for v in (1, 2, 3)]
    z = sum(ref)
    with nx.precision(np.float64):
        out = nx.masked_softmax(nx.tensor([1.0, 2.0, 3.0]), np.ones(3, bool)).data
    for o, r in zip(out, ref):
        assert abs(Decimal(float(o)) - r / z) < Decimal("1e-15")


def test_softmax_fully_masked_row_raises():
    with pytest.raises(nx.ContractError):
        nx.masked_softmax(nx.tensor(np.zeros((2, 3))), np.array([[True, False, False], [False] * 3]))


def test_softmax_ignores_blocked_scores_exactly(rng):
    s = rng.normal(size=(5, 5))
    allow = causal_mask(5).allow
    s2 = s.copy()
    s2[~allow] = 1e30
    a = nx.masked_softmax(nx.tensor(s), allow).data
    b = nx.masked_softmax(nx.tensor(s2), allow).data
    assert np.array_equal(a, b)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-50, 50)),
       arrays(bool, (4, 6)))
def test_softmax_rows_normalised(scores, allow):
    allow[:, 0] = True
    out = nx.masked_softmax(nx.tensor(scores, dtype=np.float64), allow).data
    assert np.all(out[~allow] == 0.0)
    assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-6)


def test_softmax_gradients(rng):
    with nx.precision(np.float64):
        s = f64(rng.normal(size=(2, 4, 4)))
        w = rng.normal(size=(2, 4, 4))
        allow = causal_mask(4).allow
        check_grads(lambda: nx.total(nx.mul(nx.masked_softmax(s, allow), nx.tensor(w))), [s])


# -- layer norm --------------------------------------------------------------

def test_layer_norm_limits():
    g, b = nx.ones((4,)), nx.zeros((4,))
    out = nx.layer_norm(nx.tensor(np.full((1, 4), 3.0)), g, b)
    assert np.allclose(out.data, 0.0)
    with nx.precision(np.float64):
        out = nx.layer_norm(nx.tensor([1.0, -1.0]), nx.ones((2,)), nx.zeros((2,)), eps=1e-12)
    assert np.allclose(out.data, [1.0, -1.0])


def test_layer_norm_gradients(rng):
    with nx.precision(np.float64):
        x = f64(rng.normal(size=(3, 5)))
        g, b = f64(rng.normal(size=5)), f64(rng.normal(size=5))
        w = rng.normal(size=(3, 5))
        check_grads(lambda: nx.total(nx.mul(nx.layer_norm(x, g, b), nx.tensor(w))), [x, g, b])


# -- cross entropy -----------------------------------------------------------

def test_cross_entropy_limits():
    logits = np.zeros((3, 8))
    logits[np.arange(3), [1, 2, 3]] = 1e6
    assert nx.cross_entropy(nx.tensor(logits, dtype=np.float64), [1, 2, 3]).item() < 1e-9
    with nx.precision(np.float64):
        loss = nx.cross_entropy(nx.tensor(np.zeros((5, 8))), [0, 1, 2, 3, 4]).item()
    assert abs(loss - math.log(8)) < 1e-9


def test_cross_entropy_brute_force(rng):
    logits = rng.normal(size=(6, 7)) * 3
    targets = rng.integers(0, 7, size=6)
    mask = np.array([1, 0, 1, 1, 0, 1], bool)
    ref = []
    for t in range(6):
        if mask[t]:
            z = sum(math.exp(v) for v in logits[t])
            ref.append(-(logits[t, targets[t]] - math.log(z)))
    got = nx.cross_entropy(nx.tensor(logits, dtype=np.float64), targets, mask).item()
    assert abs(got - sum(ref) / len(ref)) < 1e-12


def test_cross_entropy_all_masked_raises():
    with pytest.raises(nx.ContractError):
        nx.cross_entropy(nx.tensor(np.zeros((2, 3))), [0, 1], [False, False])


def test_cross_entropy_gradients(rng):
    with nx.precision(np.float64):
        x = f64(rng.normal(size=(5, 6)))
        t = rng.integers(0, 6, size=5)
        check_grads(lambda: nx.cross_entropy(x, t, [True, False, True, True, True]), [x])


# -- elementwise, gather, scatter --------------------------------------------

def test_elementwise_gradients(rng):
    with nx.precision(np.float64):
        a, b = f64(rng.normal(size=(2, 3, 4))), f64(rng.normal(size=4))
        c = f64(rng.normal(size=(3, 4)))
        w = rng.normal(size=(2, 3, 4))
        check_grads(lambda: nx.total(nx.mul(nx.gelu(nx.sub(nx.mul(nx.add(a, b), c), b)),
                                            nx.tensor(w))), [a, b, c])


def test_suffix_broadcast_only():
    with pytest.raises(nx.ShapeError):
        nx.add(nx.tensor(np.ones((2, 3))), nx.tensor(np.ones((2, 1))))


def test_gelu_known_values():
    out = nx.gelu(nx.tensor([0.0, 1.0, -1.0], dtype=np.float64)).data
    k = math.sqrt(2 / math.pi)
    ref = [0.5 * v * (1 + math.tanh(k * (v + 0.044715 * v ** 3))) for v in (0.0, 1.0, -1.0)]
    assert np.allclose(out, ref, atol=1e-15)


def test_take_rows_scatter_add(rng):
    with nx.precision(np.float64):
        table = f64(rng.normal(size=(5, 3)))
        idx = np.array([[0, 2], [2, 4]])
        out = nx.take_rows(table, idx)
        assert out.shape == (2, 2, 3)
        nx.total(out).backward()
        assert np.array_equal(table.grad[:, 0], [1, 0, 2, 0, 1])
    with pytest.raises(nx.ShapeError):
        nx.take_rows(table, [5])


def test_place_rows_gradients(rng):
    with nx.precision(np.float64):
        base, src = f64(rng.normal(size=(6, 3))), f64(rng.normal(size=(4, 3)))
        w = rng.normal(size=(6, 3))
        check_grads(lambda: nx.total(nx.mul(nx.place_rows(base, src, [1, 4, 5], [3, 0, 0]),
                                            nx.tensor(w))), [base, src])
    with pytest.raises(nx.ContractError):
        nx.place_rows(base, src, [1, 1], [0, 2])


def test_reshape_transpose_gradients(rng):
    with nx.precision(np.float64):
        x = f64(rng.normal(size=(2, 3, 4)))
        w = rng.normal(size=(4, 6))
        check_grads(lambda: nx.total(nx.mul(nx.reshape(nx.transpose(x, (2, 0, 1)), (4, 6)),
                                            nx.tensor(w))), [x])


# -- backward semantics ------------------------------------------------------

def test_sum_and_square_gradients():
    x = nx.parameter(np.ones((2, 3, 2)))
    nx.total(x).backward()
    assert np.array_equal(x.grad, np.ones((2, 3, 2)))
    y = nx.parameter(3.0)
    nx.mul(y, y).backward()
    assert y.grad == 6.0


def test_backward_accumulates_and_rejects_vectors():
    x = nx.parameter([2.0])
    nx.total(nx.mul(x, x)).backward()
    nx.total(nx.mul(x, x)).backward()
    assert x.grad[0] == 8.0
    v = nx.parameter([1.0, 2.0])
    with pytest.raises(nx.ContractError):
        nx.mul(v, v).backward()


def test_shared_subexpression_accumulates():
    with nx.precision(np.float64):
        x = f64([1.5, -2.0])
        h = nx.mul(x, x)
        nx.total(nx.add(h, nx.mul(h, x))).backward()
    v = np.array([1.5, -2.0])
    assert np.allclose(x.grad, 2 * v + 3 * v ** 2)


def test_tape_order_is_topological():
    x = nx.parameter([1.0, 2.0])
    y = nx.total(nx.gelu(nx.add(nx.mul(x, x), x)))
    tape = nx.Tape.collect(y)
    seqs = [node.seq for node, _ in tape.records]
    assert seqs == sorted(seqs)
    assert [node.op for node, _ in tape.records] == ["mul", "add", "gelu", "sum"]


def test_no_grad_records_nothing():
    x = nx.parameter([1.0])
    with nx.no_grad():
        y = nx.mul(x, x)
    assert y._node is None


def test_debug_mode_flags_non_finite():
    nx.set_debug(True)
    try:
        with pytest.raises(nx.NonFiniteError), np.errstate(over="ignore"):
            nx.mul(nx.tensor([1e38]), nx.tensor([1e38]))
    finally:
        nx.set_debug(False)


def test_precision_context_and_initialisers():
    with nx.precision(np.float64):
        assert nx.tensor([1.0]).dtype == np.float64
    assert nx.tensor([1.0]).dtype == np.float32
    a = nx.gaussian((3, 4), 0.02, np.random.default_rng(5))
    b = nx.gaussian((3, 4), 0.02, np.random.default_rng(5))
    assert np.array_equal(a.data, b.data) and a.requires_grad
    u = nx.uniform((100,), -1, 1, np.random.default_rng(0))
    assert u.data.min() >= -1 and u.data.max() < 1
    assert np.all(nx.ones((2,)).data == 1) and np.all(nx.zeros((2,)).data == 0)


def test_dropout_is_seeded_and_scaled():
    x = nx.tensor(np.ones(1000))
    a = nx.dropout(x, 0.5, np.random.default_rng(1)).data
    b = nx.dropout(x, 0.5, np.random.default_rng(1)).data
    assert np.array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 2.0}
    assert nx.dropout(x, 0.5, None) is x
