import math
import statistics

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from actmat.linalg import (
    angular_distance,
    frobenius_cosine,
    frobenius_inner,
    frobenius_norm,
    pearson,
    pinv,
    spectral_norm,
    svd,
)
from actmat.verify import pinv_pair, pinv_perturbation_gap

seeds = st.integers(0, 2**32 - 1)


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def power_iteration_norm(A, iters=20000):
    # oracle: dominant eigenvalue of A^T A by repeated multiplication
    x = np.ones(A.shape[1]) / math.sqrt(A.shape[1])
    lam = 0.0
    for _ in range(iters):
        y = A.T @ (A @ x)
        new = float(np.linalg.norm(y))
        x = y / new
        if abs(new - lam) <= 1e-15 * new:
            break
        lam = new
    return math.sqrt(new)


class TestSvd:
    def test_identity(self):
        assert np.allclose(svd(np.eye(3)).singular_values, [1, 1, 1])

    def test_rank_deficient_diagonal(self):
        assert svd(np.diag([3.0, 0.0])).singular_values.tolist() == [3.0, 0.0]

    @given(seeds)
    def test_reconstruction_and_orthonormality(self, seed):
        rng = np.random.default_rng(seed)
        m, n = (int(x) for x in rng.integers(1, 9, size=2))
        A = rng.normal(size=(m, n))
        f = svd(A)
        k = min(m, n)
        assert rel(f.reconstruct(), A) <= 1e-10
        assert np.max(np.abs(f.U.T @ f.U - np.eye(k))) <= 1e-10
        assert np.max(np.abs(f.Vt @ f.Vt.T - np.eye(k))) <= 1e-10
        assert np.all(np.diff(f.singular_values) <= 0)

    def test_random_5x3(self, rng):
        A = rng.normal(size=(5, 3))
        f = svd(A)
        assert f.U.shape == (5, 3) and f.Vt.shape == (3, 3)
        assert rel(f.reconstruct(), A) <= 1e-10

    def test_sign_convention(self, rng):
        A = rng.normal(size=(6, 4))
        for B in (A, -A):
            U = svd(B).U
            idx = np.argmax(np.abs(U), axis=0)
            assert np.all(U[idx, range(U.shape[1])] > 0)
        # flipping the sign of A flips Vt but not U
        assert np.allclose(svd(A).U, svd(-A).U)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            svd(np.array([[np.nan, 1.0]]))


class TestPinv:
    def test_identity(self):
        assert np.array_equal(pinv(np.eye(4)), np.eye(4))

    def test_rank_deficient_diagonal(self):
        assert np.allclose(pinv(np.diag([4.0, 0.0])), np.diag([0.25, 0.0]), atol=0)

    def test_zero(self):
        assert np.array_equal(pinv(np.zeros((2, 3))), np.zeros((3, 2)))

    @given(seeds, st.booleans())
    def test_penrose_conditions(self, seed, deficient):
        rng = np.random.default_rng(seed)
        Z = rng.normal(size=(2 if deficient else 6, 4))
        A = Z.T @ Z
        P = pinv(A)
        s = np.linalg.norm(A)
        assert np.linalg.norm(A @ P @ A - A) <= 1e-9 * s
        assert np.linalg.norm(P @ A @ P - P) <= 1e-9 * np.linalg.norm(P)
        assert np.linalg.norm((A @ P).T - A @ P) <= 1e-9
        assert np.linalg.norm((P @ A).T - P @ A) <= 1e-9

    @given(seeds)
    def test_double_pinv(self, seed):
        rng = np.random.default_rng(seed)
        m, n = (int(x) for x in rng.integers(1, 7, size=2))
        A = rng.normal(size=(m, n))
        assume(np.linalg.cond(A) < 1e6)
        assert rel(pinv(pinv(A)), A) <= 1e-7

    def test_rtol_drops_small_values(self):
        A = np.diag([1.0, 1e-6])
        assert pinv(A, rtol=1e-3)[1, 1] == 0.0
        assert pinv(A)[1, 1] == pytest.approx(1e6)

    def test_perturbation_bound_1000_pairs(self):
        rng = np.random.default_rng(99)
        gaps = [pinv_perturbation_gap(*pinv_pair(rng, i)) for i in range(1000)]
        assert max(gaps) <= 0

    def test_perturbation_bound_tight_for_vectors(self):
        # for equal-norm vectors the bound holds with equality
        a = np.array([[3.0, 4.0]])
        b = np.array([[4.0, 3.0]])
        lhs = np.linalg.norm(pinv(a) - pinv(b))
        assert lhs == pytest.approx(np.linalg.norm(a - b) / 25.0)
        assert pinv_perturbation_gap(a, b) <= 0


class TestFrobenius:
    def test_examples(self):
        assert frobenius_inner(np.eye(2), np.eye(2)) == 2.0
        assert frobenius_inner(np.ones((3, 2)), np.zeros((3, 2))) == 0.0

    def test_naive_oracle(self, rng):
        A, B = rng.normal(size=(5, 7)), rng.normal(size=(5, 7))
        naive = 0.0
        for i in range(5):
            for j in range(7):
                naive += A[i, j] * B[i, j]
        assert frobenius_inner(A, B) == pytest.approx(naive, rel=1e-13)
        assert frobenius_norm(A) == pytest.approx(math.sqrt(sum(x * x for x in A.ravel())), rel=1e-13)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            frobenius_inner(np.eye(2), np.eye(3))


class TestAngle:
    def test_collinear(self, rng):
        A = rng.normal(size=(3, 3))
        assert angular_distance(A, 2 * A) == pytest.approx(0.0, abs=1e-15)

    def test_orthogonal(self):
        assert angular_distance(np.diag([1.0, 0]), np.diag([0, 1.0])) == pytest.approx(math.pi / 2)

    def test_antipodal(self, rng):
        A = rng.normal(size=(2, 4))
        assert angular_distance(A, -A) == pytest.approx(math.pi, abs=1e-15)

    def test_zero_argument(self):
        with pytest.raises(ValueError, match="undefined angle"):
            angular_distance(np.zeros((2, 2)), np.eye(2))

    @given(seeds)
    def test_matches_arccos(self, seed):
        rng = np.random.default_rng(seed)
        A, B = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        cos = np.sum(A * B) / (np.linalg.norm(A) * np.linalg.norm(B))
        assert angular_distance(A, B) == pytest.approx(math.acos(cos), abs=1e-12)
        assert frobenius_cosine(A, B) == pytest.approx(cos, abs=1e-14)

    @given(seeds)
    def test_triangle_inequality(self, seed):
        rng = np.random.default_rng(seed)
        A, B, C = (rng.normal(size=(3, 3)) for _ in range(3))
        if seed % 2:  # near-collinear triples stress the small-angle regime
            B = A + 1e-6 * B
            C = A + 1e-6 * C
        ab, bc, ac = angular_distance(A, B), angular_distance(B, C), angular_distance(A, C)
        assert ac <= ab + bc + 1e-12

    @given(seeds, st.floats(1e-6, 1e6), st.floats(1e-6, 1e6))
    def test_scale_invariance(self, seed, c, d):
        rng = np.random.default_rng(seed)
        A, B = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
        assert angular_distance(c * A, d * B) == pytest.approx(angular_distance(A, B), abs=1e-12)


class TestSpectralNorm:
    def test_examples(self):
        assert spectral_norm(3 * np.eye(4)) == pytest.approx(3.0)
        assert spectral_norm(np.zeros((2, 3))) == 0.0

    def test_power_iteration_oracle(self, rng):
        for _ in range(10):
            A = rng.normal(size=(6, 4))
            assert spectral_norm(A) == pytest.approx(power_iteration_norm(A), rel=1e-8)


class TestPearson:
    def test_examples(self, rng):
        x = rng.normal(size=20)
        assert pearson(x, x) == pytest.approx(1.0)
        assert pearson(x, -x) == pytest.approx(-1.0)

    @given(seeds)
    def test_statistics_oracle(self, seed):
        rng = np.random.default_rng(seed)
        x, y = rng.normal(size=30), rng.normal(size=30)
        assert pearson(x, y) == pytest.approx(statistics.correlation(list(x), list(y)), abs=1e-12)

    def test_constant_series(self):
        with pytest.raises(ValueError, match="zero variance"):
            pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            pearson([1.0, 2.0], [1.0, 2.0, 3.0])
