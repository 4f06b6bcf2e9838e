"""Dense 4-D activation container (N, H, W, C) and numerically safe scalar kernels.

All activations, samples and control signals in this package flow through
:class:`Tensor4`: a float64 array in row-major N-H-W-C order that is validated
to be finite on construction and treated as immutable afterwards.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError, ShapeError

__all__ = ["Tensor4", "logsumexp", "argmax_tiebreak"]


class Tensor4:
    """Immutable 4-D tensor of 64-bit reals in N-H-W-C layout.

    The wrapped array is C-contiguous float64 and marked read-only; any NaN
    or infinity raises immediately instead of propagating through later
    computations.
    """

    __slots__ = ("_array",)

    def __init__(self, array):
        arr = np.ascontiguousarray(array, dtype=np.float64)
        if arr.ndim != 4:
            raise ShapeError(f"expected 4 dimensions (N,H,W,C), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DomainError("tensor contains NaN or infinite entries")
        arr.flags.writeable = False
        self._array = arr

    @property
    def array(self) -> np.ndarray:
        """Read-only view of the underlying (n, h, w, c) array."""
        return self._array

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self._array.shape

    @property
    def n(self) -> int:
        return self._array.shape[0]

    def __len__(self) -> int:
        return self._array.shape[0]

    def __eq__(self, other) -> bool:
        return isinstance(other, Tensor4) and np.array_equal(self._array, other._array)

    def __repr__(self) -> str:
        return f"Tensor4(shape={self.shape})"

    def reshape(self, shape) -> "Tensor4":
        """Reshape to another 4-D extent with the same element count.

        Row-major element order is preserved.
        """
        shape = tuple(int(s) for s in shape)
        if len(shape) != 4:
            raise ShapeError(f"target shape must have 4 extents, got {shape}")
        if int(np.prod(shape)) != self._array.size:
            raise ShapeError(
                f"cannot reshape {self.shape} ({self._array.size} elements) "
                f"to {shape} ({int(np.prod(shape))} elements)"
            )
        return Tensor4(self._array.reshape(shape))

    def flatten_features(self) -> np.ndarray:
        """Return an (n, h*w*c) float64 matrix, one row per sample."""
        return self._array.reshape(self.n, -1)

    def slice_batch(self, start: int, stop: int) -> "Tensor4":
        """Rows [start, stop) along the batch axis."""
        n = self.n
        if not (0 <= start <= stop <= n):
            raise ShapeError(f"batch slice [{start},{stop}) out of range for n={n}")
        return Tensor4(self._array[start:stop])

    @staticmethod
    def from_matrix(matrix, h: int = 1, w: int = 1) -> "Tensor4":
        """Wrap an (n, d) sample matrix as an (n, h, w, d/(h*w)) tensor."""
        m = np.asarray(matrix, dtype=np.float64)
        if m.ndim != 2:
            raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
        if m.shape[1] % (h * w) != 0:
            raise ShapeError(f"{m.shape[1]} features do not tile into {h}x{w} positions")
        return Tensor4(m.reshape(m.shape[0], h, w, -1))


def logsumexp(values) -> float:
    """log(sum(exp(v))) computed by shifting out the maximum first.

    Never overflows for inputs representable as float64; a lone -inf input
    is allowed and yields -inf.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise DomainError("logsumexp of an empty array")
    m = np.max(v)
    if not np.isfinite(m):
        # all -inf (or a stray +inf, which the caller should never produce)
        return float(m)
    return float(m + np.log(np.sum(np.exp(v - m))))


def logsumexp_rows(matrix: np.ndarray) -> np.ndarray:
    """Row-wise logsumexp for an (n, k) matrix; returns shape (n,)."""
    m = np.max(matrix, axis=1, keepdims=True)
    safe = np.where(np.isfinite(m), m, 0.0)
    out = safe[:, 0] + np.log(np.sum(np.exp(matrix - safe), axis=1))
    return np.where(np.isfinite(m[:, 0]), out, m[:, 0])


def argmax_tiebreak(values) -> int:
    """Index of the maximum value; ties break to the smallest index."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise DomainError("argmax of an empty array")
    return int(np.argmax(v))
