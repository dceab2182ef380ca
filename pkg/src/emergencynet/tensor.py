"""Dense 4-D tensor container used throughout the network code.

Layout is fixed to (batch, channels, height, width) in row-major order,
which keeps the depthwise convolution loops cache friendly and makes the
binary weight format unambiguous.  Tensors are treated as immutable once
constructed: every operation allocates a fresh output array and never
aliases input storage.
"""

from __future__ import annotations

from typing import Iterable, NamedTuple, Sequence

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


class Shape(NamedTuple):
    """Dimensions of a 4-D tensor: batch, channels, rows, columns."""

    n: int
    c: int
    h: int
    w: int

    @property
    def elements(self) -> int:
        return self.n * self.c * self.h * self.w


class Tensor:
    """A contiguous float32/float64 array with (n, c, h, w) layout.

    The wrapper owns its array; callers must not mutate ``data`` after
    construction (single-owner mutation is reserved for parameter updates
    inside the optimizer).  Degenerate 1x1 spatial maps are allowed.
    """

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        arr = np.ascontiguousarray(data)
        if arr.ndim != 4:
            raise ValueError(f"tensor must be 4-D (n, c, h, w), got ndim={arr.ndim}")
        if arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise ValueError(f"tensor dtype must be float32 or float64, got {arr.dtype}")
        if any(d < 1 for d in arr.shape):
            raise ValueError(f"all dims must be >= 1, got {arr.shape}")
        self.data = arr

    @property
    def shape(self) -> Shape:
        return Shape(*self.data.shape)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def __repr__(self) -> str:
        return f"Tensor(shape={tuple(self.data.shape)}, dtype={self.data.dtype})"


def tensor_new(shape: Shape | Sequence[int], fill: float = 0.0, dtype=np.float32) -> Tensor:
    """Allocate a tensor of the given shape with every element set to ``fill``."""
    shape = Shape(*shape)
    if any(d < 1 for d in shape):
        raise ValueError(f"all dims must be >= 1, got {tuple(shape)}")
    return Tensor(np.full(tuple(shape), fill, dtype=dtype))


def _check_combinable(tensors: Sequence[Tensor]) -> None:
    if len(tensors) < 2:
        raise ValueError("need at least two tensors to combine")
    first = tensors[0]
    for t in tensors[1:]:
        if t.shape != first.shape:
            raise ValueError(f"shape mismatch: {tuple(t.shape)} vs {tuple(first.shape)}")
        if t.dtype != first.dtype:
            raise ValueError(f"dtype mismatch: {t.dtype} vs {first.dtype}")


def elementwise_combine(tensors: Sequence[Tensor], mode: str, accum_dtype=None) -> Tensor:
    """Merge same-shaped tensors elementwise.

    ``mode`` is one of ``add``, ``max``, ``average``.  Addition accumulates
    the operands in list order; pass ``accum_dtype=np.float64`` to force
    64-bit accumulation (used by gradient-check runs).  Output dtype always
    matches the inputs.
    """
    _check_combinable(tensors)
    out_dtype = tensors[0].dtype
    if mode == "max":
        out = tensors[0].data.copy()
        for t in tensors[1:]:
            np.maximum(out, t.data, out=out)
        return Tensor(out)
    if mode not in ("add", "average"):
        raise ValueError(f"unknown combine mode {mode!r}")
    acc = tensors[0].data.astype(accum_dtype, copy=True) if accum_dtype else tensors[0].data.copy()
    for t in tensors[1:]:
        acc += t.data
    if mode == "average":
        acc /= len(tensors)
    return Tensor(acc.astype(out_dtype, copy=False) if accum_dtype else acc)


def channel_concat(tensors: Sequence[Tensor]) -> Tensor:
    """Stack tensors along the channel axis, preserving input order."""
    if not tensors:
        raise ValueError("need at least one tensor to concatenate")
    n, _, h, w = tensors[0].shape
    for t in tensors[1:]:
        if (t.shape.n, t.shape.h, t.shape.w) != (n, h, w):
            raise ValueError(
                f"spatial mismatch: {tuple(t.shape)} vs (n={n}, h={h}, w={w})"
            )
    return Tensor(np.concatenate([t.data for t in tensors], axis=1))


def channel_slice(t: Tensor, start: int, stop: int) -> Tensor:
    """Copy out channels [start, stop); inverse of :func:`channel_concat`."""
    if not 0 <= start < stop <= t.shape.c:
        raise ValueError(f"bad channel range [{start}, {stop}) for c={t.shape.c}")
    return Tensor(t.data[:, start:stop].copy())
