import math

import numpy as np
import pytest

from stationflow.errors import NumericError
from stationflow.spectral import (
    affinity_from_dissimilarity,
    baseline_spectral,
    jacobi_eigh,
    spectral_cluster_affinity,
)


def cubic_roots(a2: float, a1: float, a0: float) -> list[float]:
    """Real roots of x^3 + a2 x^2 + a1 x + a0 via the trigonometric form.

    Independent closed-form oracle for 3x3 symmetric eigenvalues (which are
    always real)."""
    p = a1 - a2 * a2 / 3.0
    q = 2.0 * a2**3 / 27.0 - a2 * a1 / 3.0 + a0
    shift = -a2 / 3.0
    if abs(p) < 1e-14:
        r = -q
        root = math.copysign(abs(r) ** (1 / 3), r)
        return sorted([root + shift] * 3)
    m = 2.0 * math.sqrt(-p / 3.0)
    arg = 3.0 * q / (p * m)
    arg = min(1.0, max(-1.0, arg))
    theta = math.acos(arg) / 3.0
    return sorted(m * math.cos(theta - 2.0 * math.pi * k / 3.0) + shift for k in range(3))


def char_poly_coeffs(a: np.ndarray) -> tuple[float, float, float]:
    """Coefficients of det(xI - A) = x^3 + a2 x^2 + a1 x + a0 for 3x3 A."""
    tr = np.trace(a)
    minors = sum(
        a[i, i] * a[j, j] - a[i, j] * a[j, i]
        for i in range(3)
        for j in range(i + 1, 3)
    )
    det = np.linalg.det(a)
    return (-tr, minors, -det)


HAND_MATRICES = [
    np.array([[2.0, 1.0, 0.0], [1.0, 2.0, 0.0], [0.0, 0.0, 3.0]]),
    np.array([[4.0, 1.0, 1.0], [1.0, 4.0, 1.0], [1.0, 1.0, 4.0]]),
    np.array([[1.0, 2.0, 3.0], [2.0, -1.0, 0.5], [3.0, 0.5, 2.0]]),
    np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]]),
]


class TestJacobi:
    @pytest.mark.parametrize("a", HAND_MATRICES)
    def test_eigenvalues_match_closed_form(self, a):
        vals, _ = jacobi_eigh(a)
        expected = cubic_roots(*char_poly_coeffs(a))
        np.testing.assert_allclose(vals, expected, atol=1e-10)

    @pytest.mark.parametrize("a", HAND_MATRICES)
    def test_eigenvectors_satisfy_definition(self, a):
        vals, vecs = jacobi_eigh(a)
        assert np.max(np.abs(a @ vecs - vecs * vals)) < 1e-10
        assert np.max(np.abs(vecs.T @ vecs - np.eye(3))) < 1e-10

    def test_random_symmetric_against_numpy(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(12, 12))
        a = (a + a.T) / 2
        vals, _ = jacobi_eigh(a)
        np.testing.assert_allclose(vals, np.linalg.eigvalsh(a), atol=1e-9)

    def test_asymmetric_rejected(self):
        with pytest.raises(ValueError):
            jacobi_eigh(np.array([[1.0, 2.0], [0.0, 1.0]]))


class TestSpectralClustering:
    def test_two_blocks_recovered(self):
        s = np.zeros((7, 7))
        s[:4, :4] = 1.0
        s[4:, 4:] = 1.0
        res = spectral_cluster_affinity(s, 2, seed=0)
        assert len(set(res.assignment[:4])) == 1
        assert len(set(res.assignment[4:])) == 1
        assert res.assignment[0] != res.assignment[-1]

    def test_k_equals_n(self):
        rng = np.random.default_rng(1)
        s = rng.random((5, 5))
        s = (s + s.T) / 2
        res = spectral_cluster_affinity(s, 5, seed=0)
        assert len(set(res.assignment)) == 5

    def test_affinity_formula_and_clipping(self):
        d = np.array([[0.0, 0.5], [0.5, 0.0]])
        s = affinity_from_dissimilarity(d)
        np.testing.assert_allclose(s, [[2.0, 1.0], [1.0, 2.0]])
        d2 = np.array([[0.0, 3.0], [3.0, 0.0]])
        s2 = affinity_from_dissimilarity(d2)
        assert s2[0, 1] == 0.0  # (1 - 3) / 3 clipped
        assert s2[0, 0] == pytest.approx(1 / 3)

    def test_non_finite_affinity_fatal(self):
        with pytest.raises(NumericError):
            affinity_from_dissimilarity(np.array([[0.0, np.inf], [np.inf, 0.0]]))

    def test_baseline_runs_on_dissimilarity(self):
        rng = np.random.default_rng(2)
        x = np.vstack([rng.normal(0, 0.05, (6, 2)), rng.normal(1, 0.05, (6, 2))])
        sq = ((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=2)
        d = np.sqrt(sq)
        res = baseline_spectral(d / d.max(), 2, seed=0)
        assert len(set(res.assignment[:6])) == 1
        assert len(set(res.assignment[6:])) == 1
