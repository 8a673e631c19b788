import numpy as np
import pytest

from lorafuse.errors import ContractError, ShapeError
from lorafuse.numerics import (
    StackedTensor3,
    matmul,
    seeded_random_matrix,
    softmax,
)


def naive_matmul(a, b):
    """Independent triple-loop oracle."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += float(a[i, t]) * float(b[t, j])
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        m = np.array([[2.0, -1.0], [3.5, 4.0]], dtype=np.float32)
        np.testing.assert_array_equal(matmul(np.eye(2, dtype=np.float32), m), m)

    def test_hand_example(self):
        a = np.array([[1, 2], [3, 4]], dtype=np.float32)
        b = np.array([[5, 6], [7, 8]], dtype=np.float32)
        np.testing.assert_array_equal(matmul(a, b), [[19, 22], [43, 50]])

    def test_zero_annihilator(self):
        a = np.arange(6, dtype=np.float32).reshape(2, 3)
        z = np.zeros((3, 4), dtype=np.float32)
        np.testing.assert_array_equal(matmul(a, z), np.zeros((2, 4)))

    def test_shape_mismatch_names_both_shapes(self):
        a = np.zeros((2, 3), dtype=np.float32)
        b = np.zeros((4, 2), dtype=np.float32)
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
            matmul(a, b)

    def test_agrees_with_naive_oracle(self, rng):
        for _ in range(30):
            m, k, n = rng.integers(1, 17, size=3)
            a = rng.normal(0, 1, (m, k)).astype(np.float32)
            b = rng.normal(0, 1, (k, n)).astype(np.float32)
            got = matmul(a, b)
            want = naive_matmul(a, b)
            denom = max(np.abs(want).max(), 1e-6)
            assert np.abs(got - want).max() / denom < 1e-6
            assert np.all(np.isfinite(got))

    def test_associativity(self, rng):
        for _ in range(20):
            a = rng.normal(0, 1, (5, 7)).astype(np.float32)
            b = rng.normal(0, 1, (7, 6)).astype(np.float32)
            c = rng.normal(0, 1, (6, 4)).astype(np.float32)
            left = matmul(matmul(a, b), c)
            right = matmul(a, matmul(b, c))
            denom = max(np.abs(left).max(), 1e-6)
            assert np.abs(left - right).max() / denom < 1e-4


class TestSoftmax:
    def test_symmetry(self):
        np.testing.assert_allclose(softmax([0.0, 0.0]), [0.5, 0.5])

    def test_shift_invariance(self, rng):
        v = rng.normal(0, 2, 9).astype(np.float32)
        for c in (-3.0, 0.5, 100.0):
            np.testing.assert_allclose(softmax(v), softmax(v + c), atol=1e-6)

    def test_closed_form_ratio(self):
        np.testing.assert_allclose(
            softmax([np.log(2.0), 0.0]), [2 / 3, 1 / 3], atol=1e-6
        )

    def test_valid_distribution(self, rng):
        for _ in range(20):
            p = softmax(rng.normal(0, 5, int(rng.integers(1, 30))))
            assert abs(p.sum() - 1.0) < 1e-6
            assert (p > 0).all() and np.all(np.isfinite(p))

    def test_large_inputs_stable(self):
        p = softmax([1e30, 1e30])
        np.testing.assert_allclose(p, [0.5, 0.5])

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            softmax([])


class TestSeededRandomMatrix:
    def test_same_seed_bitwise_identical(self):
        a = seeded_random_matrix(5, 7, seed=9)
        b = seeded_random_matrix(5, 7, seed=9)
        assert np.array_equal(a, b)

    def test_different_seeds_differ(self):
        a = seeded_random_matrix(5, 7, seed=9)
        b = seeded_random_matrix(5, 7, seed=10)
        assert not np.array_equal(a, b)

    def test_gaussian_law_of_large_numbers(self):
        sigma = 0.7
        m = seeded_random_matrix(100, 100, seed=3, distribution="gaussian", scale=sigma)
        assert abs(m.mean()) < 5 * sigma / 100

    def test_uniform_bounds(self):
        m = seeded_random_matrix(50, 50, seed=4, distribution="uniform", scale=0.25)
        assert m.min() >= -0.25 and m.max() <= 0.25

    def test_bad_dims_rejected(self):
        with pytest.raises(ContractError):
            seeded_random_matrix(0, 3, seed=1)


class TestStackedTensor3:
    def test_roundtrip_exact(self, rng):
        st = StackedTensor3(4, 6)
        mats = [rng.normal(0, 1, (4, 6)).astype(np.float32) for _ in range(10)]
        for m in mats:
            st.append(m)
        for i, m in enumerate(mats):
            assert np.array_equal(st.get(i), m)
        assert len(st) == 10
        assert st.data.flags["C_CONTIGUOUS"]

    def test_swap_remove_keeps_live_slices(self, rng):
        st = StackedTensor3(3, 3)
        mats = [rng.normal(0, 1, (3, 3)).astype(np.float32) for _ in range(5)]
        for m in mats:
            st.append(m)
        st.swap_remove(1)
        assert len(st) == 4
        assert np.array_equal(st.get(1), mats[4])  # last slice filled the hole
        assert np.array_equal(st.get(0), mats[0])
        assert st.data.flags["C_CONTIGUOUS"]

    def test_gather_dense_copy(self, rng):
        st = StackedTensor3(2, 2)
        mats = [rng.normal(0, 1, (2, 2)).astype(np.float32) for _ in range(6)]
        for m in mats:
            st.append(m)
        sel = st.gather([4, 0, 2])
        assert sel.shape == (3, 2, 2)
        for j, i in enumerate([4, 0, 2]):
            assert np.array_equal(sel[j], mats[i])

    def test_out_of_range(self):
        st = StackedTensor3(2, 2)
        st.append(np.zeros((2, 2), dtype=np.float32))
        with pytest.raises(ContractError):
            st.get(1)
        with pytest.raises(ShapeError):
            st.append(np.zeros((3, 2), dtype=np.float32))
