import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from compemb import tensor as T
from compemb.gradcheck import PRIMITIVES, check_primitive
from compemb.tensor import Tensor

finite = st.floats(-20, 20, allow_nan=False, width=64)


def mat(rows=st.integers(1, 5), cols=st.integers(1, 6)):
    return st.tuples(rows, cols).flatmap(lambda s: arrays(np.float64, s, elements=finite))


@pytest.mark.parametrize("name", PRIMITIVES)
def test_primitive_gradients(name):
    report = check_primitive(name)
    assert report.passed, (name, report.max_rel_error, report.worst)
    assert report.max_rel_error < 1e-4


def test_grad_check_catches_a_wrong_backward():
    def bad_square(x):
        return T._result(x.data**2, (x,), lambda g: (g * x.data,))  # missing factor 2

    with T.precision(np.float64):
        x = Tensor(np.array([0.5, -1.5, 2.0]))
        rep = T.grad_check(lambda: T.sum_(bad_square(x)), x)
    assert not rep.passed
    assert rep.max_rel_error == pytest.approx(0.5, rel=1e-6)


@settings(max_examples=40, deadline=None)
@given(mat())
def test_softmax_rows_are_distributions(x):
    with T.precision(np.float64):
        p = T.softmax(Tensor(x)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(mat(), st.floats(-50, 50))
def test_softmax_shift_invariance(x, c):
    with T.precision(np.float64):
        a = T.softmax(Tensor(x)).data
        b = T.softmax(Tensor(x + c)).data
    np.testing.assert_allclose(a, b, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(mat())
def test_log_softmax_matches_log_of_softmax(x):
    with T.precision(np.float64):
        np.testing.assert_allclose(T.log_softmax(Tensor(x)).data, np.log(T.softmax(Tensor(x)).data), atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(mat(cols=st.integers(2, 6)))
def test_l2_normalize_unit_rows(x):
    if np.any(np.linalg.norm(x, axis=-1) < 1e-3):
        return
    with T.precision(np.float64):
        y = T.l2_normalize(Tensor(x)).data
    np.testing.assert_allclose(np.linalg.norm(y, axis=-1), 1.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(mat(cols=st.integers(2, 8)))
def test_layer_norm_standardizes(x):
    if np.any(x.std(axis=-1) < 1e-2):
        return
    d = x.shape[1]
    with T.precision(np.float64):
        y = T.layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d))).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-9)
    np.testing.assert_allclose(y.var(axis=-1), x.var(axis=-1) / (x.var(axis=-1) + 1e-5), rtol=1e-9)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4,), elements=finite))
def test_broadcast_add_gradient_shapes(a, b):
    with T.precision(np.float64):
        ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
        T.sum_(T.add(ta, tb)).backward()
    np.testing.assert_array_equal(ta.grad, np.ones((3, 4)))
    np.testing.assert_array_equal(tb.grad, np.full(4, 3.0))


def test_gradients_accumulate_over_reuse():
    with T.precision(np.float64):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        T.sum_(T.mul(x, x)).backward()
        np.testing.assert_allclose(x.grad, [2.0, 4.0])
        T.sum_(x).backward()
        np.testing.assert_allclose(x.grad, [3.0, 5.0])


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.exp(x)
    assert not y.requires_grad and y._parents == ()


def test_embedding_lookup_repeated_ids_accumulate():
    with T.precision(np.float64):
        tab = Tensor(np.zeros((4, 2)), requires_grad=True)
        T.sum_(T.embedding_lookup(tab, np.array([1, 1, 3, 1]))).backward()
    np.testing.assert_array_equal(tab.grad, [[0, 0], [3, 3], [0, 0], [1, 1]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(T.DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_empty_loss_mask_raises():
    with pytest.raises(T.EmptyLossError):
        T.cross_entropy(Tensor(np.zeros((1, 3, 5))), np.zeros((1, 3), int), np.zeros((1, 3), bool))


def test_cross_entropy_uniform_logits_is_log_vocab():
    v = 11
    loss = T.cross_entropy(Tensor(np.zeros((2, 3, v))), np.ones((2, 3), int), np.ones((2, 3), bool))
    assert loss.item() == pytest.approx(math.log(v), rel=1e-6)


def test_kl_of_identical_distributions_is_zero():
    lg = np.random.default_rng(0).normal(size=(2, 4, 6))
    with T.precision(np.float64):
        kl = T.kl_div(lg, Tensor(lg), np.ones((2, 4), bool))
    assert kl.item() == pytest.approx(0.0, abs=1e-12)


def test_mask_sentinel_gives_exact_zero_probability():
    with T.precision(np.float64):
        p = T.softmax(Tensor(np.array([[0.3, T.MASK_VALUE, 1.2]]))).data
    assert p[0, 1] == 0.0


def test_float32_default_and_precision_switch():
    assert Tensor([1.0]).dtype == np.float32
    with T.precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
        assert T.scale(Tensor([1.0]), np.float64(0.5)).dtype == np.float64
    assert T.scale(Tensor([1.0]), np.float64(0.5)).dtype == np.float32
