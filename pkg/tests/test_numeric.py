import math

import numpy as np
import pytest

from oodintent.errors import NumericError
from oodintent.numeric import (
    SpdFactor,
    logsumexp,
    mahalanobis_sq,
    row_logsumexp,
    row_softmax,
    softmax,
    spd_factor,
)


class TestLogsumexp:
    def test_two_equal_terms(self):
        assert logsumexp([0.0, 0.0]) == pytest.approx(math.log(2.0), abs=1e-12)

    def test_single_element_identity(self, rng):
        for a in rng.uniform(-100, 100, size=50):
            assert logsumexp([a]) == pytest.approx(a, abs=1e-12)

    def test_no_overflow_under_max_shift(self):
        assert logsumexp([1000.0, 1000.0]) == pytest.approx(1000.0 + math.log(2.0), abs=1e-9)

    def test_empty_vector_rejected(self):
        with pytest.raises(ValueError):
            logsumexp([])

    def test_bounds(self, rng):
        """max(v) <= lse(v) <= max(v) + ln(len(v)) on random vectors."""
        for _ in range(1000):
            n = int(rng.integers(1, 30))
            v = rng.uniform(-50, 50, size=n)
            lse = logsumexp(v)
            assert lse >= np.max(v) - 1e-12
            assert lse <= np.max(v) + math.log(n) + 1e-12

    def test_row_variant_matches_scalar(self, rng):
        m = rng.uniform(-30, 30, size=(40, 7))
        rows = row_logsumexp(m)
        for i in range(m.shape[0]):
            assert rows[i] == pytest.approx(logsumexp(m[i]), abs=1e-12)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax([0.0, 0.0, 0.0, 0.0]), 0.25, atol=1e-15)

    def test_shift_invariance(self, rng):
        for _ in range(200):
            v = rng.uniform(-40, 40, size=int(rng.integers(2, 20)))
            shift = rng.uniform(-500, 500)
            np.testing.assert_allclose(softmax(v + shift), softmax(v), atol=1e-12)

    def test_exponent_ratios(self):
        v = [math.log(1.0), math.log(2.0), math.log(3.0)]
        np.testing.assert_allclose(softmax(v), [1 / 6, 2 / 6, 3 / 6], atol=1e-12)

    def test_positive_and_normalized(self, rng):
        for _ in range(200):
            v = rng.uniform(-50, 50, size=int(rng.integers(1, 40)))
            p = softmax(v)
            assert np.all(p > 0)
            assert abs(float(np.sum(p)) - 1.0) < 1e-12

    def test_empty_vector_rejected(self):
        with pytest.raises(ValueError):
            softmax([])

    def test_row_variant_matches_scalar(self, rng):
        m = rng.uniform(-30, 30, size=(25, 9))
        rows = row_softmax(m)
        for i in range(m.shape[0]):
            np.testing.assert_allclose(rows[i], softmax(m[i]), atol=1e-14)

    def test_log_max_softmax_identity(self, rng):
        """log(max softmax(v)) = max(v) - logsumexp(v)."""
        for _ in range(500):
            v = rng.uniform(-50, 50, size=int(rng.integers(2, 50)))
            lhs = math.log(float(np.max(softmax(v))))
            rhs = float(np.max(v)) - logsumexp(v)
            assert lhs == pytest.approx(rhs, abs=1e-10)


def _cofactor_inverse(m: np.ndarray) -> np.ndarray:
    """Brute-force adjugate inverse for dimensions 1 to 3."""
    n = m.shape[0]
    if n == 1:
        return np.array([[1.0 / m[0, 0]]])

    def det(a):
        if a.shape[0] == 1:
            return a[0, 0]
        if a.shape[0] == 2:
            return a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]
        return (
            a[0, 0] * (a[1, 1] * a[2, 2] - a[1, 2] * a[2, 1])
            - a[0, 1] * (a[1, 0] * a[2, 2] - a[1, 2] * a[2, 0])
            + a[0, 2] * (a[1, 0] * a[2, 1] - a[1, 1] * a[2, 0])
        )

    d = det(m)
    adj = np.empty_like(m)
    for i in range(n):
        for j in range(n):
            minor = np.delete(np.delete(m, i, axis=0), j, axis=1)
            adj[j, i] = (-1) ** (i + j) * det(minor)
    return adj / d


class TestSpdFactor:
    def test_identity_solve(self):
        f = spd_factor(np.eye(3), ridge=0.0)
        b = np.array([1.0, -2.0, 0.5])
        np.testing.assert_allclose(f.solve(b), b, atol=1e-12)

    def test_zero_matrix_with_ridge_behaves_as_identity(self):
        f = spd_factor(np.zeros((2, 2)), ridge=1.0)
        b = np.array([3.0, 4.0])
        np.testing.assert_allclose(f.solve(b), b, atol=1e-12)

    def test_diagonal_solve(self):
        f = spd_factor(np.diag([4.0, 9.0]), ridge=0.0)
        np.testing.assert_allclose(f.solve(np.array([4.0, 9.0])), [1.0, 1.0], atol=1e-12)

    def test_rejects_non_square(self):
        with pytest.raises(NumericError):
            spd_factor(np.ones((2, 3)))

    def test_rejects_asymmetric(self):
        m = np.array([[1.0, 0.5], [0.0, 1.0]])
        with pytest.raises(NumericError):
            spd_factor(m)

    def test_rejects_indefinite(self):
        with pytest.raises(NumericError):
            spd_factor(np.diag([1.0, -1.0]), ridge=0.0)

    def test_rejects_negative_ridge(self):
        with pytest.raises(NumericError):
            spd_factor(np.eye(2), ridge=-0.1)

    def test_reconstruction_recovers_input_plus_ridge(self, rng):
        for _ in range(50):
            n = int(rng.integers(1, 6))
            a = rng.standard_normal((n, n))
            m = a @ a.T + 0.1 * np.eye(n)
            ridge = float(rng.uniform(0, 2))
            f = spd_factor(m, ridge)
            target = m + ridge * np.eye(n)
            err = np.linalg.norm(f.reconstruct() - target) / np.linalg.norm(target)
            assert err < 1e-8

    def test_solve_matches_cofactor_oracle(self, rng):
        """Factor-then-solve equals the adjugate inverse at dimension <= 3."""
        for _ in range(200):
            n = int(rng.integers(1, 4))
            a = rng.standard_normal((n, n))
            m = a @ a.T + 0.5 * np.eye(n)
            ridge = float(rng.uniform(0, 1))
            b = rng.standard_normal(n)
            f = spd_factor(m, ridge)
            expected = _cofactor_inverse(m + ridge * np.eye(n)) @ b
            np.testing.assert_allclose(f.solve(b), expected, rtol=1e-8, atol=1e-10)

    def test_solve_matrix_rhs(self, rng):
        a = rng.standard_normal((4, 4))
        m = a @ a.T + np.eye(4)
        f = spd_factor(m)
        B = rng.standard_normal((4, 6))
        np.testing.assert_allclose(m @ f.solve(B), B, atol=1e-9)


class TestMahalanobis:
    def test_zero_displacement(self, rng):
        f = spd_factor(np.eye(3))
        x = rng.standard_normal(3)
        assert mahalanobis_sq(x, x, f) == 0.0

    def test_identity_covariance_is_squared_euclidean(self, rng):
        f = spd_factor(np.eye(5))
        for _ in range(100):
            x = rng.standard_normal(5)
            mu = rng.standard_normal(5)
            expected = float(np.sum((x - mu) ** 2))
            assert mahalanobis_sq(x, mu, f) == pytest.approx(expected, abs=1e-10)

    def test_scalar_case(self):
        f = spd_factor(np.array([[4.0]]))
        assert mahalanobis_sq([2.0], [0.0], f) == pytest.approx(1.0, abs=1e-12)

    def test_dimension_mismatch_rejected(self):
        f = spd_factor(np.eye(3))
        with pytest.raises(ValueError):
            mahalanobis_sq([1.0, 2.0], [0.0, 0.0], f)
        with pytest.raises(ValueError):
            mahalanobis_sq([1.0, 2.0], [0.0], f)

    def test_non_negative(self, rng):
        a = rng.standard_normal((4, 4))
        f = spd_factor(a @ a.T + 0.2 * np.eye(4))
        for _ in range(50):
            assert mahalanobis_sq(rng.standard_normal(4), rng.standard_normal(4), f) >= 0.0
