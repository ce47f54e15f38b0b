import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fpq.errors import ContractError, MetricUnavailableError
from fpq.metrics import MetricKind, fisher_metric, fisher_unit_constant, mse_metric, reconstruction_metric

# Multiples of 1/8 keep squared differences clear of underflow.
finite = st.integers(-8000, 8000).map(lambda i: i / 8)


def test_mse_examples():
    o = np.arange(6.0).reshape(2, 3)
    assert mse_metric(o, o) == 0.0
    assert mse_metric([1.0, 2.0], [0.0, 2.0]) == 0.5


def test_fisher_examples():
    assert fisher_metric([2.0], [0.0], [3.0]) == 36.0
    o = np.ones((4, 3))
    assert fisher_metric(o + 1, o, np.zeros((4, 3))) == 0.0


def test_fisher_unit_gradient_constant():
    rng = np.random.default_rng(0)
    o, o_hat = rng.standard_normal((5, 7)), rng.standard_normal((5, 7))
    assert fisher_unit_constant((5, 7)) == 7
    assert fisher_metric(o_hat, o, np.ones((5, 7))) == pytest.approx(7 * mse_metric(o_hat, o), rel=1e-12)


def test_fisher_sums_features_means_samples():
    o_hat = np.array([[1.0, 1.0], [0.0, 2.0]])
    o = np.zeros((2, 2))
    g = np.array([[1.0, 2.0], [3.0, 1.0]])
    # rows: 1 + 4, 0 + 4; mean over 2 samples
    assert fisher_metric(o_hat, o, g) == 4.5


def test_missing_gradient():
    with pytest.raises(MetricUnavailableError):
        fisher_metric([1.0], [0.0], None)
    with pytest.raises(MetricUnavailableError):
        reconstruction_metric(MetricKind.FISHER, [1.0], [0.0])


def test_shape_mismatch():
    with pytest.raises(ContractError):
        mse_metric(np.ones(3), np.ones(4))
    with pytest.raises(ContractError):
        fisher_metric(np.ones(3), np.ones(3), np.ones(2))


def test_dispatch():
    assert reconstruction_metric("mse", [1.0, 2.0], [0.0, 2.0]) == 0.5
    assert reconstruction_metric("fisher", [2.0], [0.0], [3.0]) == 36.0


@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (3, 4), elements=finite),
       arrays(np.float64, (3, 4), elements=finite))
def test_non_negative_and_zero_iff_equal(a, b, g):
    assert mse_metric(a, b) >= 0
    assert fisher_metric(a, b, g) >= 0
    assert (mse_metric(a, b) == 0) == np.array_equal(a, b)
    support = g != 0
    assert (fisher_metric(a, b, g) == 0) == np.array_equal(a[support], b[support])
