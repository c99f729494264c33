import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import batches
from decov import (DecovPenalty, covariance, decov_backward, decov_forward,
                   importance_weighted_gradient, offdiag_covariance_norm)
from decov.gradcheck import numerical_gradient, relative_error
from decov.tensor import DimensionError, EmptyBatchError, Rng


def loop_loss(H):
    """Pure-Python covariance and off-diagonal half sum of squares."""
    H = [list(map(float, row)) for row in H]
    n, d = len(H), len(H[0])
    mu = [sum(H[m][j] for m in range(n)) / n for j in range(d)]
    C = [[sum((H[m][i] - mu[i]) * (H[m][j] - mu[j]) for m in range(n)) / n
          for j in range(d)] for i in range(d)]
    return 0.5 * sum(C[i][j] ** 2 for i in range(d) for j in range(d) if i != j), C


def test_two_point_example():
    cov = covariance([[1.0, 0.0], [-1.0, 0.0]])
    np.testing.assert_array_equal(cov.C, [[1.0, 0.0], [0.0, 0.0]])
    np.testing.assert_array_equal(cov.mu, [0.0, 0.0])
    assert decov_forward([[1.0, 0.0], [-1.0, 0.0]])[0] == 0.0


def test_perfectly_correlated_pair():
    # columns equal: C = [[1, 1], [1, 1]] -> loss = 0.5 * 2 * 1
    H = np.array([[1.0, 1.0], [-1.0, -1.0]])
    loss, diag = decov_forward(H)
    assert loss == 1.0
    assert diag.offdiag_frob_sq == 2.0
    assert offdiag_covariance_norm(H) == pytest.approx(math.sqrt(2.0))


def test_loss_from_known_covariance():
    # y = 2x + z with z orthogonal to x: cov(x, y) = 2 var(x) = 2, so loss = 0.5 * (2^2 + 2^2)
    x = np.array([1.0, -1.0, 1.0, -1.0])
    z = np.array([1.0, 1.0, -1.0, -1.0])
    H = np.column_stack([x, 2 * x + z])
    np.testing.assert_allclose(covariance(H).C, [[1.0, 2.0], [2.0, 5.0]])
    assert decov_forward(H)[0] == 4.0


@settings(max_examples=200)
@given(batches(min_n=1, max_n=6, min_d=1, max_d=5))
def test_matches_loop_oracle(H):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        loss, diag = decov_forward(H)
    ref, C = loop_loss(H)
    assert loss == pytest.approx(ref, rel=1e-10, abs=1e-14)
    np.testing.assert_allclose(covariance(H).C, C, rtol=1e-10, atol=1e-14)
    assert diag.offdiag_frob_sq == 2 * diag.loss


@settings(max_examples=100)
@given(batches(min_n=2, max_n=8, min_d=1, max_d=8, scale=3.0))
def test_backward_matches_finite_differences(H):
    H = H + Rng(0).normal(H.shape) * 1e-3  # avoid exactly degenerate inputs
    X = H.copy()
    num = numerical_gradient(lambda: decov_forward(X)[0], X)
    assert relative_error(decov_backward(H), num) <= 1e-5


@settings(max_examples=100)
@given(batches(min_n=1, max_n=6, min_d=1, max_d=6))
def test_stated_importance_form_is_half_the_exact_gradient(H):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        np.testing.assert_allclose(2 * importance_weighted_gradient(H), decov_backward(H),
                                   rtol=1e-10, atol=1e-13)


def test_gradient_rows_sum_to_zero(rng):
    # mean-shift invariance implies the gradient has zero column sums
    g = decov_backward(rng.normal((7, 4)))
    np.testing.assert_allclose(g.sum(axis=0), 0.0, atol=1e-13)


def test_single_example_warns_and_is_zero():
    with pytest.warns(RuntimeWarning, match="one example"):
        loss, _ = decov_forward(np.array([[1.0, 2.0, 3.0]]))
    assert loss == 0.0


def test_errors():
    with pytest.raises(EmptyBatchError):
        decov_forward(np.zeros((0, 3)))
    with pytest.raises(DimensionError):
        decov_forward(np.zeros(3))
    with pytest.raises(ValueError):
        DecovPenalty(-1.0)


def test_penalty_scales_gradient(rng):
    H = rng.normal((5, 3))
    loss, grad = DecovPenalty(0.25)(H)
    assert loss == decov_forward(H)[0]
    np.testing.assert_array_equal(grad, 0.25 * decov_backward(H))
    loss0, grad0 = DecovPenalty(0.0)(H)
    assert loss0 == loss and grad0 is None


@given(st.integers(2, 6), st.integers(1, 6), st.floats(0.1, 10.0))
@settings(max_examples=50)
def test_shifting_and_scaling(n, d, alpha):
    H = Rng(n * 10 + d).normal((n, d))
    base = decov_forward(H)[0]
    assert decov_forward(H + 5.0)[0] == pytest.approx(base, rel=1e-10, abs=1e-12)
    assert decov_forward(alpha * H)[0] == pytest.approx(alpha ** 4 * base, rel=1e-9, abs=1e-12)
    np.testing.assert_allclose(decov_backward(alpha * H), alpha ** 3 * decov_backward(H),
                               rtol=1e-9, atol=1e-12)
