import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lenslab import numerics as nm

from conftest import random_symmetric


class TestRng:
    def test_same_seed_same_stream(self):
        a = nm.sample_standard_gaussian(nm.RngState(0), [4])
        b = nm.sample_standard_gaussian(nm.RngState(0), [4])
        assert np.array_equal(a, b)

    def test_stream_advances(self):
        rng = nm.RngState(0)
        a = rng.normal((4,))
        b = rng.normal((4,))
        assert not np.array_equal(a, b)
        assert rng.counter == 8

    def test_replay_from_counter(self):
        rng = nm.RngState(5)
        rng.normal((13,))
        mark = rng.counter
        a = rng.normal((7,))
        b = nm.RngState(5, counter=mark).normal((7,))
        assert np.array_equal(a, b)

    def test_split_independent_of_parent_position(self):
        parent = nm.RngState(3)
        child1 = parent.split(1)
        parent.normal((100,))
        child2 = parent.split(1)
        assert child1.seed == child2.seed

    def test_moments_100k(self):
        x = nm.sample_standard_gaussian(nm.RngState(11), (100_000,))
        assert abs(x.mean()) < 0.02
        assert 0.98 < x.var() < 1.02

    def test_kurtosis_1m(self):
        x = nm.sample_standard_gaussian(nm.RngState(13), (1_000_000,))
        kurt = float(np.mean((x - x.mean()) ** 4) / x.var() ** 2)
        assert abs(kurt - 3.0) < 0.1

    def test_zero_sized_shape_rejected(self):
        with pytest.raises(nm.ShapeError):
            nm.sample_standard_gaussian(nm.RngState(0), [0])
        with pytest.raises(nm.ShapeError):
            nm.sample_standard_gaussian(nm.RngState(0), [])

    def test_uniform_open_unit(self):
        u = nm.RngState(1).uniform((100_000,))
        assert u.min() > 0.0
        assert u.max() <= 1.0

    @given(st.integers(0, 2**62), st.integers(1, 30))
    @settings(max_examples=25, deadline=None)
    def test_determinism_property(self, seed, n):
        assert np.array_equal(nm.RngState(seed).normal((n,)),
                              nm.RngState(seed).normal((n,)))


class TestArrayOps:
    def test_identity_matmul(self):
        a = nm.RngState(2).normal((5, 5))
        assert np.array_equal(nm.matmul(np.eye(5), a), a)

    def test_transpose_of_product(self):
        rng = nm.RngState(3)
        a, b = rng.normal((3, 4)), rng.normal((4, 2))
        assert np.allclose(nm.transpose(nm.matmul(a, b)),
                           nm.matmul(nm.transpose(b), nm.transpose(a)), atol=1e-15)

    def test_associativity(self):
        rng = nm.RngState(4)
        a, b, c = (rng.normal((4, 4)) for _ in range(3))
        left = nm.matmul(nm.matmul(a, b), c)
        right = nm.matmul(a, nm.matmul(b, c))
        assert np.abs(left - right).max() < 1e-12

    def test_shape_errors_name_both_shapes(self):
        with pytest.raises(nm.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            nm.matmul(np.zeros((2, 3)), np.zeros((2, 3)))
        with pytest.raises(nm.ShapeError, match=r"\(2,\).*\(3,\)"):
            nm.add(np.zeros(2), np.zeros(3))

    def test_scalar_broadcast_allowed(self):
        x = np.ones((2, 2))
        assert np.array_equal(nm.add(x, np.asarray(1.0)), 2 * x)
        assert np.array_equal(nm.scale(x, 3.0), 3 * x)

    def test_reshape_size_mismatch(self):
        with pytest.raises(nm.ShapeError):
            nm.reshape(np.zeros((2, 3)), (7,))

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_finite_on_finite_inputs(self, seed):
        rng = nm.RngState(seed)
        a, b = rng.normal((3, 3)), rng.normal((3, 3))
        for out in (nm.matmul(a, b), nm.add(a, b), nm.scale(a, -2.5),
                    nm.transpose(a), nm.reshape(a, (9,))):
            assert np.all(np.isfinite(out))


class TestSymmetricEigen:
    def test_diagonal_case(self):
        e = nm.symmetric_eigen(np.diag([3.0, 1.0, 2.0]))
        assert np.array_equal(e.eigenvalues, [3.0, 2.0, 1.0])
        expected = np.eye(3)[:, [0, 2, 1]]
        assert np.array_equal(e.eigenvectors, expected)

    def test_analytic_2x2(self):
        e = nm.symmetric_eigen(np.array([[2.0, 1.0], [1.0, 2.0]]))
        assert np.allclose(e.eigenvalues, [3.0, 1.0], atol=1e-12)
        s = 1.0 / np.sqrt(2.0)
        assert np.allclose(e.eigenvectors[:, 0], [s, s], atol=1e-12)
        assert np.allclose(e.eigenvectors[:, 1], [s, -s], atol=1e-12)

    def test_roundtrip_8x8(self):
        a = random_symmetric(8, 7)
        e = nm.symmetric_eigen(a)
        rec = e.eigenvectors @ np.diag(e.eigenvalues) @ e.eigenvectors.T
        assert np.abs(rec - a).max() <= 1e-8

    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError, match="not symmetric"):
            nm.symmetric_eigen(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_rejects_nonsquare(self):
        with pytest.raises(nm.ShapeError):
            nm.symmetric_eigen(np.zeros((2, 3)))

    def test_sign_convention(self):
        a = random_symmetric(6, 9)
        e = nm.symmetric_eigen(a)
        for j in range(6):
            col = e.eigenvectors[:, j]
            lead = col[np.abs(col) > nm.SIGN_TOL]
            assert lead[0] > 0

    @given(st.integers(0, 100_000), st.integers(2, 64))
    @settings(max_examples=100, deadline=None)
    def test_invariants_random(self, seed, d):
        a = random_symmetric(d, seed)
        e = nm.symmetric_eigen(a)
        fro = nm.frobenius_norm(a)
        assert np.abs(e.eigenvectors.T @ e.eigenvectors - np.eye(d)).max() <= 1e-10
        assert np.all(np.diff(e.eigenvalues) <= 1e-12)
        for j in range(d):
            resid = a @ e.eigenvectors[:, j] - e.eigenvalues[j] * e.eigenvectors[:, j]
            assert np.linalg.norm(resid) <= 1e-8 * max(fro, 1e-12)


def test_random_orthonormal_is_orthonormal():
    q = nm.random_orthonormal(16, nm.RngState(21))
    assert np.abs(q.T @ q - np.eye(16)).max() <= 1e-12
