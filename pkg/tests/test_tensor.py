import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dcgmm.errors import DomainError, ShapeError
from dcgmm.tensor import Tensor4, argmax_tiebreak, logsumexp


class TestLogsumexp:
    def test_single_element(self):
        assert logsumexp([0.0]) == 0.0

    def test_overflow_safety(self):
        # two equal huge values: result is a + ln 2, no overflow
        a = 1000.0
        assert logsumexp([a, a]) == pytest.approx(a + math.log(2.0), abs=1e-12)

    def test_matches_naive_at_safe_magnitude(self):
        rng = np.random.default_rng(42)
        for _ in range(50):
            v = rng.uniform(-3, 3, size=5)
            naive = math.log(np.sum(np.exp(v)))
            assert logsumexp(v) == pytest.approx(naive, abs=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(DomainError):
            logsumexp([])

    @given(st.lists(st.floats(min_value=-1e6, max_value=1e6), min_size=1, max_size=40))
    def test_bounds(self, values):
        out = logsumexp(values)
        assert out >= max(values) - 1e-9
        assert out <= max(values) + math.log(len(values)) + 1e-9


class TestArgmaxTiebreak:
    def test_simple(self):
        assert argmax_tiebreak([1, 3, 2]) == 1

    def test_tie_goes_to_lowest_index(self):
        assert argmax_tiebreak([5, 5, 1]) == 0

    def test_against_scan_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            v = rng.integers(0, 5, size=rng.integers(1, 20)).astype(float)
            best, best_i = -np.inf, -1
            for i, x in enumerate(v):          # linear scan oracle
                if x > best:
                    best, best_i = x, i
            assert argmax_tiebreak(v) == best_i

    def test_empty_rejected(self):
        with pytest.raises(DomainError):
            argmax_tiebreak([])


class TestTensor4:
    def test_reshape_preserves_row_major_order(self):
        t = Tensor4(np.arange(784.0).reshape(1, 28, 28, 1))
        flat = t.reshape((1, 1, 1, 784))
        np.testing.assert_array_equal(flat.array.ravel(), np.arange(784.0))

    def test_reshape_round_trip_is_identity(self):
        rng = np.random.default_rng(0)
        t = Tensor4(rng.normal(size=(2, 3, 4, 5)))
        back = t.reshape((2, 6, 2, 5)).reshape((2, 3, 4, 5))
        assert back == t

    def test_slice_batch_matches_index_oracle(self):
        rng = np.random.default_rng(1)
        arr = rng.normal(size=(10, 2, 2, 1))
        t = Tensor4(arr)
        s = t.slice_batch(2, 5)
        assert s.n == 3
        for i in range(3):                      # index-arithmetic oracle
            np.testing.assert_array_equal(s.array[i], arr[2 + i])

    def test_invalid_reshape_rejected(self):
        t = Tensor4(np.zeros((1, 2, 2, 1)))
        with pytest.raises(ShapeError):
            t.reshape((1, 2, 2, 2))

    def test_nan_rejected_immediately(self):
        bad = np.zeros((1, 1, 1, 2))
        bad[0, 0, 0, 1] = np.nan
        with pytest.raises(DomainError):
            Tensor4(bad)

    def test_immutability(self):
        t = Tensor4(np.zeros((1, 1, 1, 1)))
        with pytest.raises(ValueError):
            t.array[0, 0, 0, 0] = 1.0

    def test_slice_bounds_checked(self):
        t = Tensor4(np.zeros((3, 1, 1, 1)))
        with pytest.raises(ShapeError):
            t.slice_batch(1, 5)
