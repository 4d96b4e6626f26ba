import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from ringpipe import tensor
from ringpipe.tensor import DimensionError, NonFiniteError, SeededRng


def naive_matmul(a, b):
    """Independent oracle: textbook triple loop, left-to-right accumulation."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    c = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            c[i, j] = acc
    return c


class TestMatmul:
    def test_identity(self):
        eye = np.eye(2)
        rhs = np.array([[3.0, 4.0], [5.0, 6.0]])
        assert np.array_equal(tensor.matmul(eye, rhs), rhs)

    def test_row_times_column(self):
        out = tensor.matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]]))
        assert out.shape == (1, 1)
        assert out[0, 0] == 11.0

    def test_matches_naive_oracle_bitwise(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal((7, 5))
        b = rng.standard_normal((5, 3))
        assert np.array_equal(tensor.matmul(a, b), naive_matmul(a, b))

    @settings(max_examples=40, deadline=None)
    @given(
        m=st.integers(1, 6),
        k=st.integers(1, 6),
        n=st.integers(1, 6),
        seed=st.integers(0, 2**32 - 1),
    )
    def test_oracle_equivalence_property(self, m, k, n, seed):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((m, k)) * 10.0
        b = rng.standard_normal((k, n)) * 10.0
        assert np.array_equal(tensor.matmul(a, b), naive_matmul(a, b))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            tensor.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_rejects_rank_1(self):
        with pytest.raises(DimensionError):
            tensor.matmul(np.ones(3), np.ones((3, 2)))

    def test_nonfinite_surfaces(self):
        a = np.array([[1e308, 1e308]])
        b = np.array([[1e308], [1e308]])
        with pytest.raises(NonFiniteError):
            tensor.matmul(a, b)

    def test_repeat_call_byte_identical(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((4, 4))
        b = rng.standard_normal((4, 4))
        first = tensor.matmul(a, b)
        second = tensor.matmul(a, b)
        assert first.tobytes() == second.tobytes()


class TestElementwise:
    def test_add(self):
        assert np.array_equal(
            tensor.elementwise("add", [1.0, 2.0], [3.0, 4.0]), [4.0, 6.0]
        )

    def test_scale(self):
        assert np.array_equal(tensor.elementwise("scale", [2.0, 4.0], 0.5), [1.0, 2.0])

    def test_sub_self_is_zero(self):
        x = np.random.default_rng(0).standard_normal((3, 4))
        assert np.array_equal(tensor.elementwise("sub", x, x), np.zeros_like(x))

    def test_mul(self):
        assert np.array_equal(
            tensor.elementwise("mul", [2.0, 3.0], [4.0, 5.0]), [8.0, 15.0]
        )

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            tensor.elementwise("add", np.ones(2), np.ones(3))

    def test_scale_rejects_tensor_operand(self):
        with pytest.raises(DimensionError):
            tensor.elementwise("scale", np.ones(2), np.ones(2))


class TestSeededRng:
    def test_same_seed_and_position_identical(self):
        a = SeededRng(1234).uniform((4, 5))
        b = SeededRng(1234).uniform((4, 5))
        assert a.tobytes() == b.tobytes()

    def test_position_advances_by_element_count(self):
        rng = SeededRng(9)
        rng.uniform((2, 3))
        assert rng.position == 6

    def test_reset_position_replays(self):
        rng = SeededRng(77)
        first = rng.uniform((8,))
        replay = rng.at(0).uniform((8,))
        assert np.array_equal(first, replay)

    def test_streams_are_contiguous(self):
        # drawing 10 then 10 equals drawing 20 in one call
        rng = SeededRng(5)
        chunks = np.concatenate([rng.uniform((10,)), rng.uniform((10,))])
        whole = SeededRng(5).uniform((20,))
        assert np.array_equal(chunks, whole)

    def test_range_half_open(self):
        u = SeededRng(42).uniform((10_000,))
        assert u.min() >= 0.0
        assert u.max() < 1.0

    def test_derive_gives_independent_streams(self):
        base = SeededRng(100)
        a = base.derive(1).uniform((100,))
        b = base.derive(2).uniform((100,))
        assert not np.array_equal(a, b)
        again = SeededRng(100).derive(1).uniform((100,))
        assert np.array_equal(a, again)

    def test_uniformity_ks(self):
        u = SeededRng(2024).uniform((100_000,))
        ks = stats.kstest(u, "uniform").statistic
        assert ks < 0.02

    def test_known_reference_values(self):
        # frozen stream prefix; guards against platform or refactoring drift
        u = SeededRng(1).uniform((3,))
        expected = np.array(
            [0.5665615751722809, 0.7457817572627011, 0.9710027535867962]
        )
        assert np.array_equal(u, expected)
        # random access lands mid-stream on the same values
        assert np.array_equal(SeededRng(1, position=1).uniform((2,)), expected[1:])


def test_mix64_is_order_sensitive():
    assert tensor.mix64(1, 2) != tensor.mix64(2, 1)
    assert tensor.mix64(1, 2) == tensor.mix64(1, 2)
