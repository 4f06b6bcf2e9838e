"""Non-GMM layer transforms: folding, pooling and the linear classifier.

Every transform comes in two directions.  The forward direction maps
activations toward the classifier (estimation); the backward direction maps
control signals / generated patches toward the input space (sampling).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError
from .tensor import Tensor4, logsumexp_rows

PROB_FLOOR = 1e-6   # clamp for log of one-hot / probability entries


@dataclass(frozen=True)
class FoldingSpec:
    """Patch extraction geometry: filter extents (fy, fx) and strides (dy, dx)."""

    fy: int
    fx: int
    dy: int
    dx: int

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        """Output extents; input extents must be covered exactly (no padding)."""
        if min(self.fy, self.fx, self.dy, self.dx) < 1:
            raise ShapeError(f"non-positive folding parameter in {self}")
        if h < self.fy or w < self.fx:
            raise ShapeError(f"input {h}x{w} smaller than filter {self.fy}x{self.fx}")
        if (h - self.fy) % self.dy or (w - self.fx) % self.dx:
            raise ShapeError(
                f"input {h}x{w} not evenly covered by filter ({self.fy},{self.fx}) "
                f"stride ({self.dy},{self.dx})")
        return 1 + (h - self.fy) // self.dy, 1 + (w - self.fx) // self.dx


@dataclass(frozen=True)
class PoolingSpec:
    """Window reduction geometry: kernel (ky, kx), strides (dy, dx) and mode."""

    ky: int
    kx: int
    dy: int
    dx: int
    mode: str = "max"   # "max" or "average"

    def __post_init__(self):
        if self.mode not in ("max", "average"):
            raise ShapeError(f"unknown pooling mode {self.mode!r}")

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        if min(self.ky, self.kx, self.dy, self.dx) < 1:
            raise ShapeError(f"non-positive pooling parameter in {self}")
        if h < self.ky or w < self.kx:
            raise ShapeError(f"input {h}x{w} smaller than kernel {self.ky}x{self.kx}")
        if (h - self.ky) % self.dy or (w - self.kx) % self.dx:
            raise ShapeError(
                f"input {h}x{w} not evenly covered by kernel ({self.ky},{self.kx}) "
                f"stride ({self.dy},{self.dx})")
        return 1 + (h - self.ky) // self.dy, 1 + (w - self.kx) // self.dx


@dataclass
class LinearParams:
    """Affine classifier head: weights (D_in, C) and bias (C,)."""

    weights: np.ndarray
    bias: np.ndarray

    @property
    def dim_in(self) -> int:
        return self.weights.shape[0]

    @property
    def n_classes(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "LinearParams":
        return LinearParams(self.weights.copy(), self.bias.copy())


def init_linear(dim_in: int, n_classes: int) -> LinearParams:
    """Zero-initialized classifier (predicts the uniform distribution)."""
    return LinearParams(np.zeros((dim_in, n_classes)), np.zeros(n_classes))


def _patch_views(arr: np.ndarray, fy: int, fx: int, dy: int, dx: int,
                 oh: int, ow: int) -> np.ndarray:
    """Strided view (n, oh, ow, fy, fx, c) over all patches; no copy."""
    n, h, w, c = arr.shape
    sn, sh, sw, sc = arr.strides
    return np.lib.stride_tricks.as_strided(
        arr,
        shape=(n, oh, ow, fy, fx, c),
        strides=(sn, sh * dy, sw * dx, sh, sw, sc),
        writeable=False,
    )


def fold_forward(t: Tensor4, spec: FoldingSpec) -> Tensor4:
    """Decompose images into patches stacked along the channel axis.

    Output shape (n, 1+(h-fy)/dy, 1+(w-fx)/dx, c*fy*fx); each output channel
    vector is the row-major (y, x, channel) flattening of one input patch.
    """
    n, h, w, c = t.shape
    oh, ow = spec.out_hw(h, w)
    patches = _patch_views(t.array, spec.fy, spec.fx, spec.dy, spec.dx, oh, ow)
    return Tensor4(patches.reshape(n, oh, ow, spec.fy * spec.fx * c))


def fold_backward(patches: Tensor4, spec: FoldingSpec,
                  target_hw: tuple[int, int]) -> Tensor4:
    """Reassemble patches into an image, averaging overlapping pixels.

    Exact inverse of :func:`fold_forward` when stride equals filter size;
    with overlap every output pixel is the arithmetic mean of all patch
    copies covering it.
    """
    h, w = target_hw
    oh, ow = spec.out_hw(h, w)
    n, ph, pw, pc = patches.shape
    if (ph, pw) != (oh, ow) or pc % (spec.fy * spec.fx) != 0:
        raise ShapeError(
            f"patch tensor {patches.shape} inconsistent with {spec}, target {h}x{w}")
    channels = pc // (spec.fy * spec.fx)
    cube = patches.array.reshape(n, oh, ow, spec.fy, spec.fx, channels)
    acc = np.zeros((n, h, w, channels))
    cover = np.zeros((h, w, 1))
    for py in range(oh):
        y0 = py * spec.dy
        for px in range(ow):
            x0 = px * spec.dx
            acc[:, y0:y0 + spec.fy, x0:x0 + spec.fx, :] += cube[:, py, px]
            cover[y0:y0 + spec.fy, x0:x0 + spec.fx, 0] += 1.0
    return Tensor4(acc / cover)


def pool_forward(t: Tensor4, spec: PoolingSpec) -> Tensor4:
    """Per-channel window reduction (max or mean)."""
    n, h, w, c = t.shape
    oh, ow = spec.out_hw(h, w)
    windows = _patch_views(t.array, spec.ky, spec.kx, spec.dy, spec.dx, oh, ow)
    if spec.mode == "max":
        out = windows.max(axis=(3, 4))
    else:
        out = windows.mean(axis=(3, 4))
    return Tensor4(out)


def unpool(t: Tensor4, spec: PoolingSpec) -> Tensor4:
    """Replicate each value into its ky x kx window (nearest-neighbour).

    Replication is only well defined for non-overlapping windows, so the
    stride must equal the kernel.
    """
    if (spec.dy, spec.dx) != (spec.ky, spec.kx):
        raise ShapeError("unpooling requires stride == kernel (non-overlapping windows)")
    arr = t.array
    out = np.repeat(np.repeat(arr, spec.ky, axis=1), spec.kx, axis=2)
    return Tensor4(out)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, overflow-safe."""
    return np.exp(logits - logsumexp_rows(logits)[:, None])


def linear_forward(resp: Tensor4, params: LinearParams) -> np.ndarray:
    """Class probabilities per sample: softmax(flatten(resp) @ W + b)."""
    x = resp.flatten_features()
    if x.shape[1] != params.dim_in:
        raise ShapeError(f"classifier expects {params.dim_in} inputs, got {x.shape[1]}")
    return softmax_rows(x @ params.weights + params.bias)


def cross_entropy(probs: np.ndarray, onehot: np.ndarray) -> float:
    """Mean negative log-probability of the true classes."""
    p = np.clip(np.sum(probs * onehot, axis=1), PROB_FLOOR * PROB_FLOOR, None)
    return float(np.mean(-np.log(p)))


def _check_onehot(labels: np.ndarray, n_classes: int) -> None:
    if labels.ndim != 2 or labels.shape[1] != n_classes:
        raise DataError(f"labels must be (N, {n_classes}) one-hot rows")
    ok = np.all(np.isin(labels, (0.0, 1.0))) and np.all(labels.sum(axis=1) == 1.0)
    if not ok:
        raise DataError("labels are not one-hot rows")


def linear_train_step(resp: Tensor4, labels: np.ndarray, params: LinearParams,
                      eps: float) -> tuple[LinearParams, float]:
    """One SGD step down the cross-entropy gradient; returns pre-step mean CE."""
    labels = np.asarray(labels, dtype=np.float64)
    _check_onehot(labels, params.n_classes)
    x = resp.flatten_features()
    probs = linear_forward(resp, params)
    ce = cross_entropy(probs, labels)
    n = x.shape[0]
    delta = (probs - labels) / n            # d(mean CE)/d(logits)
    new = LinearParams(
        weights=params.weights - eps * (x.T @ delta),
        bias=params.bias - eps * delta.sum(axis=0),
    )
    return new, ce


def linear_invert(class_probs: np.ndarray, params: LinearParams) -> np.ndarray:
    """Approximate inverse of the classifier for conditional sampling.

    Maps a one-hot (or probability) vector back into the classifier's input
    space via W @ (log(l) + k - b).  Probabilities are clamped at PROB_FLOOR
    before the log; the scalar shift k makes the corrected logit vector
    non-negative with minimum zero.  Only the ordering of the returned
    entries is meaningful: it serves as a component-selection signal.
    """
    l = np.asarray(class_probs, dtype=np.float64)
    if l.shape != (params.n_classes,):
        raise ShapeError(f"expected a vector of {params.n_classes} class entries")
    logits = np.log(np.maximum(l, PROB_FLOOR)) - params.bias
    logits = logits - logits.min()          # shift constant k: minimum becomes 0
    return params.weights @ logits
