import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from pesimt import numerics as nx
from pesimt.numerics import Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


def test_masked_softmax_oracle():
    out = nx.masked_softmax(np.array([5.0, 1.0, 9.0]), np.array([True, False, True]))
    # e^5/(e^5+e^9) and e^9/(e^5+e^9); the masked entry is exactly zero
    expected = np.array([1 / (1 + np.exp(4)), 0.0, 1 / (1 + np.exp(-4))])
    np.testing.assert_allclose(out.data, expected, rtol=1e-12)
    assert out.data[1] == 0.0
    np.testing.assert_allclose(out.data, [0.01799, 0.0, 0.98201], atol=1e-5)


def test_masked_softmax_degenerate_row_is_zero_and_flagged():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    mask = np.array([[True, True], [False, False]])
    out, flag = nx.masked_softmax(x, mask, return_flag=True)
    assert np.all(out.data[1] == 0.0)
    assert flag.tolist() == [False, True]


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 6), elements=st.floats(-30, 30)), st.integers(1, 6))
def test_masked_softmax_normalised(x, n):
    mask = np.arange(6) < n
    out = nx.masked_softmax(x, mask, sequential=True)
    np.testing.assert_allclose(out.data.sum(-1), 1.0, atol=1e-12)
    assert np.all(out.data[:, n:] == 0.0)


def test_squash_norms():
    v = nx.squash(np.array([1.0, 0.0]))
    assert np.linalg.norm(v.data) == pytest.approx(0.5)
    w = nx.squash(np.array([0.0, 100.0]))
    assert np.linalg.norm(w.data) == pytest.approx(10000 / 10001, rel=1e-12)
    z = nx.squash(np.zeros(3))
    assert np.all(z.data == 0.0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4,), elements=st.floats(-1e3, 1e3)))
def test_squash_norm_below_one(x):
    n = np.linalg.norm(nx.squash(x).data)
    assert 0.0 <= n < 1.0


def test_backward_accumulates_for_shared_leaf():
    a = leaf([2.0, 3.0])
    (a * a + a).sum().backward()
    np.testing.assert_allclose(a.grad, 2 * a.data + 1)


def test_no_grad_builds_no_graph():
    a = leaf([1.0])
    with nx.no_grad():
        b = a * 2.0
    assert not b.requires_grad and not b.parents


@pytest.mark.parametrize("op", [
    lambda a, b: (a[:2] * b + a[1:] / (b * b + 1.0)).sum(),
    lambda a, b: nx.tanh(a[:2] - b).sum() + nx.exp(a * 0.1).sum(),
    lambda a, b: nx.log_softmax(a @ b.transpose(1, 0)).sum(),
    lambda a, b: nx.square(nx.layer_norm(a, b[0], b[1])).sum(),
    lambda a, b: nx.squash(a * 3.0).sum() + nx.square(nx.softmax(b)).sum(),
    lambda a, b: nx.relu(nx.einsum("ij,kj->ik", a, b)).sum(),
    lambda a, b: nx.square(nx.linear(a, b.transpose(1, 0), stable=True)).sum(),
    lambda a, b: nx.square(nx.tsum(a[:2] * b, axis=0, sequential=True)).sum(),
    lambda a, b: nx.square(nx.concat([a, b], axis=0)[1:4]).sum(),
    lambda a, b: nx.square(nx.masked_softmax(a, np.array([True, False, True]), sequential=True)).sum(),
    lambda a, b: nx.label_smoothed_nll(a, np.array([0, 2, 1]), 0.1).sum(),
])
def test_gradients_match_finite_differences(op, rng):
    a = leaf(rng.normal(size=(3, 3)))
    b = leaf(rng.normal(size=(2, 3)))
    report = nx.check_grads(lambda: op(a, b), {"a": a, "b": b})
    assert max(report.values()) <= 0.0, report


def test_broadcast_gradients_unbroadcast(rng):
    a = leaf(rng.normal(size=(4, 3)))
    b = leaf(rng.normal(size=(3,)))
    (a * b).sum().backward()
    np.testing.assert_allclose(b.grad, a.data.sum(0))


def test_stable_linear_rows_independent_of_batch(rng):
    w = rng.normal(size=(7, 5))
    x = rng.normal(size=(9, 7))
    full = nx.linear(x, w, stable=True).data
    for i in range(9):
        assert np.array_equal(nx.linear(x[i:i + 1], w, stable=True).data[0], full[i])


def test_label_smoothing_zero_is_plain_nll(rng):
    logits = rng.normal(size=(4, 6))
    y = np.array([1, 0, 5, 2])
    lp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    np.testing.assert_allclose(nx.label_smoothed_nll(logits, y).data, -lp[np.arange(4), y])


def test_dropout_identity_in_eval_and_needs_rng_in_training():
    x = np.ones(5)
    assert nx.dropout(x, 0.5, None, training=False).data is not None
    with pytest.raises(ValueError):
        nx.dropout(x, 0.5, None, training=True)
    out = nx.dropout(x, 0.5, np.random.default_rng(0), training=True).data
    assert set(np.unique(out)) <= {0.0, 2.0}


def test_inverse_sqrt_schedule():
    assert nx.inverse_sqrt_lr(1, 5e-4, 4000) == pytest.approx(1e-7 + (5e-4 - 1e-7) / 4000)
    assert nx.inverse_sqrt_lr(4000, 5e-4, 4000) == pytest.approx(5e-4)
    assert nx.inverse_sqrt_lr(16000, 5e-4, 4000) == pytest.approx(2.5e-4)


def test_adam_minimises_quadratic():
    p = leaf([3.0, -2.0])
    opt = nx.Adam({"p": p}, betas=(0.9, 0.98), weight_decay=0.0)
    for _ in range(500):
        opt.zero_grad()
        (p * p).sum().backward()
        opt.step(0.05)
    assert np.abs(p.data).max() < 1e-2
