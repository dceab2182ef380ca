"""Layer primitives: forward passes and exact reverse-mode gradients.

Every operation the network needs lives here as a pair of functions — a
public forward that maps :class:`~emergencynet.tensor.Tensor` to Tensor,
and a backward that returns gradients with respect to inputs and
parameters.  Stateful caching for training lives in the layer classes
(:mod:`emergencynet.model`); the functions here recompute what they need
so they stay pure and independently testable.

Convolution dispatch:

* depthwise (groups == channels, one filter per channel) runs a
  tap-accumulation loop over the kernel window, vectorized across the
  whole map — cost is independent of the dilation rate;
* dense (groups == 1) runs strided-view im2col plus one BLAS matmul;
* other group counts loop the dense path per group.

The direct tap loop is the reference path; tests check the im2col path
against it to 1e-5.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import Tensor

TRAIN = "train"
INFER = "infer"


def _check_phase(phase: str) -> None:
    if phase not in (TRAIN, INFER):
        raise ValueError(f"phase must be 'train' or 'infer', got {phase!r}")


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------


@dataclass
class ConvKernel:
    """Weights plus geometry for a 2-D convolution.

    ``weights`` has shape (out_channels, in_channels_per_group, k_h, k_w).
    Depthwise means groups equals the input channel count with one input
    channel per group.  ``padding`` is symmetric zero padding; out-of-bounds
    taps read zero.
    """

    weights: np.ndarray
    bias: Optional[np.ndarray] = None
    groups: int = 1
    dilation: int = 1
    stride: int = 1
    padding: int | tuple[int, int] = 0

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ValueError("conv weights must be 4-D (out, in/groups, kh, kw)")
        if self.dilation < 1 or self.stride < 1:
            raise ValueError("dilation and stride must be >= 1")
        if isinstance(self.padding, int):
            self.padding = (self.padding, self.padding)
        if min(self.padding) < 0:
            raise ValueError("padding must be >= 0")
        if self.groups < 1 or self.out_channels % self.groups:
            raise ValueError(
                f"out_channels {self.out_channels} not divisible by groups {self.groups}"
            )
        if self.bias is not None and self.bias.shape != (self.out_channels,):
            raise ValueError("bias length must equal out_channels")

    @classmethod
    def he_init(
        cls,
        rng: np.random.Generator,
        out_channels: int,
        in_channels_per_group: int,
        kh: int,
        kw: int,
        *,
        groups: int = 1,
        dilation: int = 1,
        stride: int = 1,
        padding: int | tuple[int, int] = 0,
        with_bias: bool = False,
        dtype=np.float32,
    ) -> "ConvKernel":
        """Kernel with He-normal weights (std sqrt(2/fan_in)) and zero bias."""
        fan_in = in_channels_per_group * kh * kw
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_channels, in_channels_per_group, kh, kw))
        b = np.zeros(out_channels, dtype=dtype) if with_bias else None
        return cls(w.astype(dtype), b, groups=groups, dilation=dilation, stride=stride, padding=padding)

    def astype(self, dtype) -> None:
        self.weights = self.weights.astype(dtype)
        if self.bias is not None:
            self.bias = self.bias.astype(dtype)

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels_per_group(self) -> int:
        return self.weights.shape[1]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1] * self.groups

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]

    @property
    def is_depthwise(self) -> bool:
        return self.groups == self.in_channels and self.in_channels_per_group == 1

    def param_count(self) -> int:
        n = self.weights.size
        if self.bias is not None:
            n += self.bias.size
        return n


@dataclass
class BatchNormParams:
    """Per-channel affine normalization state (gamma, beta, running stats)."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-3
    momentum: float = 0.99

    def __post_init__(self):
        c = self.gamma.shape[0]
        for name in ("beta", "running_mean", "running_var"):
            if getattr(self, name).shape != (c,):
                raise ValueError(f"{name} must have length {c}")
        if np.any(self.running_var < 0):
            raise ValueError("running variance must be non-negative")

    @classmethod
    def identity(cls, channels: int, dtype=np.float32, **kw) -> "BatchNormParams":
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            **kw,
        )

    def astype(self, dtype) -> None:
        self.gamma = self.gamma.astype(dtype)
        self.beta = self.beta.astype(dtype)
        self.running_mean = self.running_mean.astype(dtype)
        self.running_var = self.running_var.astype(dtype)


@dataclass
class ActivationSpec:
    """Capped leaky ReLU configuration.

    The output is bounded above at ``cap`` (255 by default so activations
    fit an 8-bit range).  In the train phase negative inputs keep a small
    slope ``alpha``; in the infer phase the negative part is zeroed.  The
    cap is applied after the leak.
    """

    cap: float = 255.0
    alpha: float = 0.01
    phase: str = TRAIN

    def __post_init__(self):
        if self.cap <= 0:
            raise ValueError("cap must be positive")
        if not 0 <= self.alpha < 1:
            raise ValueError("alpha must be in [0, 1)")
        _check_phase(self.phase)


# ---------------------------------------------------------------------------
# Geometry helpers
# ---------------------------------------------------------------------------


def effective_receptive_field(k: int, d: int) -> int:
    """Receptive field of a k x k kernel dilated by d: k + (k-1)(d-1)."""
    if k < 1 or k % 2 == 0:
        raise ValueError("kernel size must be odd and >= 1")
    if d < 1:
        raise ValueError("dilation must be >= 1")
    return k + (k - 1) * (d - 1)


def same_padding(k: int, dilation: int = 1) -> int:
    """Symmetric padding so stride-s output size is ceil(in/s), for odd k."""
    return (k - 1) * dilation // 2


def conv_output_hw(h: int, w: int, kernel: ConvKernel) -> tuple[int, int]:
    kh, kw = kernel.kernel_size
    d, s = kernel.dilation, kernel.stride
    ph, pw = kernel.padding
    eh = kh + (kh - 1) * (d - 1)
    ew = kw + (kw - 1) * (d - 1)
    oh = (h + 2 * ph - eh) // s + 1
    ow = (w + 2 * pw - ew) // s + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"kernel does not fit input {h}x{w}")
    return oh, ow


def _pad_hw(x: np.ndarray, p: tuple[int, int]) -> np.ndarray:
    ph, pw = p
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _patch_view(xp: np.ndarray, kh: int, kw: int, s: int, d: int, oh: int, ow: int):
    """Read-only (n, c, kh, kw, oh, ow) window view of a padded map."""
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(sn, sc, d * sh, d * sw, s * sh, s * sw),
        writeable=False,
    )


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def _validate_conv(x: np.ndarray, k: ConvKernel) -> None:
    ci = x.shape[1]
    if ci % k.groups:
        raise ValueError(f"input channels {ci} not divisible by groups {k.groups}")
    if ci // k.groups != k.in_channels_per_group:
        raise ValueError(
            f"kernel expects {k.in_channels_per_group} channels per group, "
            f"input provides {ci // k.groups}"
        )


def _conv_fwd(
    x: np.ndarray, k: ConvKernel, xp: Optional[np.ndarray] = None
) -> tuple[np.ndarray, np.ndarray]:
    """Returns (output, padded input); the padded input feeds the backward.

    ``xp`` lets a caller that already holds a suitably padded copy of ``x``
    (for example a wider shared pad) bypass the internal ``np.pad``.
    """
    _validate_conv(x, k)
    n, ci, h, w = x.shape
    oh, ow = conv_output_hw(h, w, k)
    kh, kw = k.kernel_size
    s, d = k.stride, k.dilation
    if xp is None:
        xp = _pad_hw(x, k.padding)

    if k.is_depthwise and k.out_channels == ci:
        out = np.zeros((n, ci, oh, ow), dtype=x.dtype)
        buf = np.empty_like(out)
        for i in range(kh):
            for j in range(kw):
                tap = xp[:, :, i * d : i * d + s * oh : s, j * d : j * d + s * ow : s]
                np.multiply(tap, k.weights[:, 0, i, j].reshape(1, ci, 1, 1), out=buf)
                out += buf
    elif k.groups == 1:
        view = _patch_view(xp, kh, kw, s, d, oh, ow)
        cols = view.reshape(n, ci * kh * kw, oh * ow)
        out = np.matmul(k.weights.reshape(k.out_channels, -1), cols)
        out = out.reshape(n, k.out_channels, oh, ow)
    else:
        cg = ci // k.groups
        cog = k.out_channels // k.groups
        out = np.empty((n, k.out_channels, oh, ow), dtype=x.dtype)
        for g in range(k.groups):
            view = _patch_view(xp[:, g * cg : (g + 1) * cg], kh, kw, s, d, oh, ow)
            cols = view.reshape(n, cg * kh * kw, oh * ow)
            wg = k.weights[g * cog : (g + 1) * cog].reshape(cog, -1)
            out[:, g * cog : (g + 1) * cog] = np.matmul(wg, cols).reshape(n, cog, oh, ow)

    if k.bias is not None:
        out += k.bias.reshape(1, -1, 1, 1)
    return out, xp


def _conv_bwd(
    xp: np.ndarray, k: ConvKernel, gout: np.ndarray
) -> tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """Gradients w.r.t. the (unpadded) input, the weights and the bias."""
    n, co, oh, ow = gout.shape
    kh, kw = k.kernel_size
    s, d = k.stride, k.dilation
    ph, pw = k.padding
    ci = k.in_channels
    grad_xp = np.zeros_like(xp)
    grad_w = np.zeros_like(k.weights)

    if k.is_depthwise and co == ci:
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(None),
                      slice(i * d, i * d + s * oh, s), slice(j * d, j * d + s * ow, s))
                grad_w[:, 0, i, j] = (gout * xp[sl]).sum(axis=(0, 2, 3))
                grad_xp[sl] += k.weights[:, 0, i, j].reshape(1, ci, 1, 1) * gout
    elif k.groups == 1:
        view = _patch_view(xp, kh, kw, s, d, oh, ow)
        cols = view.reshape(n, ci * kh * kw, oh * ow)
        g = gout.reshape(n, co, oh * ow)
        grad_w = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(k.weights.shape)
        grad_cols = np.matmul(k.weights.reshape(co, -1).T, g)
        _col2im_add(grad_xp, grad_cols.reshape(n, ci, kh, kw, oh, ow), s, d)
    else:
        cg = ci // k.groups
        cog = co // k.groups
        for gi in range(k.groups):
            xs = xp[:, gi * cg : (gi + 1) * cg]
            view = _patch_view(xs, kh, kw, s, d, oh, ow)
            cols = view.reshape(n, cg * kh * kw, oh * ow)
            g = gout[:, gi * cog : (gi + 1) * cog].reshape(n, cog, oh * ow)
            wg = k.weights[gi * cog : (gi + 1) * cog]
            grad_w[gi * cog : (gi + 1) * cog] = np.tensordot(
                g, cols, axes=([0, 2], [0, 2])
            ).reshape(wg.shape)
            grad_cols = np.matmul(wg.reshape(cog, -1).T, g)
            _col2im_add(
                grad_xp[:, gi * cg : (gi + 1) * cg],
                grad_cols.reshape(n, cg, kh, kw, oh, ow),
                s, d,
            )

    hp, wp = grad_xp.shape[2:]
    grad_x = grad_xp[:, :, ph : hp - ph, pw : wp - pw]
    grad_b = gout.sum(axis=(0, 2, 3)) if k.bias is not None else None
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def _col2im_add(grad_xp: np.ndarray, gcols: np.ndarray, s: int, d: int) -> None:
    """Scatter-add (n, c, kh, kw, oh, ow) column gradients into the padded map."""
    _, _, kh, kw, oh, ow = gcols.shape
    for i in range(kh):
        for j in range(kw):
            grad_xp[:, :, i * d : i * d + s * oh : s, j * d : j * d + s * ow : s] += gcols[
                :, :, i, j
            ]


def conv2d_forward(x: Tensor, kernel: ConvKernel) -> Tensor:
    """Cross-correlation of a (n, c, h, w) map with the kernel; zeros off-edge."""
    out, _ = _conv_fwd(x.data, kernel)
    return Tensor(out)


def conv2d_backward(
    x: Tensor, kernel: ConvKernel, grad_out: Tensor
) -> tuple[Tensor, np.ndarray, Optional[np.ndarray]]:
    """Reverse-mode gradients for :func:`conv2d_forward`."""
    _validate_conv(x.data, kernel)
    xp = _pad_hw(x.data, kernel.padding)
    grad_x, grad_w, grad_b = _conv_bwd(xp, kernel, grad_out.data)
    return Tensor(grad_x), grad_w, grad_b


def conv2d_reference(x: Tensor, kernel: ConvKernel) -> Tensor:
    """Direct tap-by-tap convolution, the slow unambiguous reference path."""
    k = kernel
    _validate_conv(x.data, k)
    n, ci, h, w = x.data.shape
    oh, ow = conv_output_hw(h, w, k)
    kh, kw = k.kernel_size
    s, d = k.stride, k.dilation
    xp = _pad_hw(x.data, k.padding)
    cg = ci // k.groups
    cog = k.out_channels // k.groups
    out = np.zeros((n, k.out_channels, oh, ow), dtype=x.data.dtype)
    for o in range(k.out_channels):
        g = o // cog
        for c in range(cg):
            for i in range(kh):
                for j in range(kw):
                    tap = xp[:, g * cg + c, i * d : i * d + s * oh : s, j * d : j * d + s * ow : s]
                    out[:, o] += k.weights[o, c, i, j] * tap
    if k.bias is not None:
        out += k.bias.reshape(1, -1, 1, 1)
    return Tensor(out)


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------


def _bn_fwd(x: np.ndarray, p: BatchNormParams, phase: str):
    """Returns (y, cache); train phase updates the running stats in place."""
    _check_phase(phase)
    if x.shape[1] != p.gamma.shape[0]:
        raise ValueError(f"channel mismatch: input {x.shape[1]}, params {p.gamma.shape[0]}")
    if phase == TRAIN:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        p.running_mean[:] = p.momentum * p.running_mean + (1 - p.momentum) * mean
        p.running_var[:] = p.momentum * p.running_var + (1 - p.momentum) * var
        inv_std = 1.0 / np.sqrt(var + np.asarray(p.eps, dtype=x.dtype))
        xhat = (x - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
        y = p.gamma.reshape(1, -1, 1, 1) * xhat + p.beta.reshape(1, -1, 1, 1)
        return y.astype(x.dtype, copy=False), (xhat, inv_std.astype(x.dtype, copy=False), phase)
    # running stats are constants here, so the whole transform collapses to
    # one per-channel scale and shift; xhat is rebuilt from x on demand
    inv_std = (1.0 / np.sqrt(p.running_var + np.asarray(p.eps, dtype=x.dtype))).astype(x.dtype, copy=False)
    scale = p.gamma * inv_std
    shift = p.beta - p.running_mean * scale
    y = x * scale.reshape(1, -1, 1, 1)
    y += shift.reshape(1, -1, 1, 1)
    return y, (x, inv_std, phase)


def _bn_bwd(cache, p: BatchNormParams, gout: np.ndarray):
    xhat, inv_std, phase = cache
    if phase == INFER:
        xhat = (xhat - p.running_mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
    axes = (0, 2, 3)
    grad_beta = gout.sum(axis=axes)
    grad_gamma = (gout * xhat).sum(axis=axes)
    gx_hat = gout * p.gamma.reshape(1, -1, 1, 1)
    if phase == INFER:
        # running stats are constants
        grad_x = gx_hat * inv_std.reshape(1, -1, 1, 1)
    else:
        term = gx_hat - gx_hat.mean(axis=axes, keepdims=True) \
            - xhat * (gx_hat * xhat).mean(axis=axes, keepdims=True)
        grad_x = term * inv_std.reshape(1, -1, 1, 1)
    return grad_x, grad_gamma, grad_beta


def batchnorm_forward(x: Tensor, p: BatchNormParams, phase: str = INFER) -> Tensor:
    """Normalize per channel; batch statistics in train phase, running in infer."""
    y, _ = _bn_fwd(x.data, p, phase)
    return Tensor(y)


def batchnorm_backward(
    x: Tensor, p: BatchNormParams, phase: str, grad_out: Tensor
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Gradients w.r.t. input, gamma and beta.

    Recomputes the forward statistics; beware that calling this after
    :func:`batchnorm_forward` in train phase moves the running stats twice.
    Layer classes cache instead.
    """
    stats = BatchNormParams(
        p.gamma, p.beta, p.running_mean.copy(), p.running_var.copy(),
        eps=p.eps, momentum=p.momentum,
    )
    _, cache = _bn_fwd(x.data, stats, phase)
    grad_x, grad_gamma, grad_beta = _bn_bwd(cache, p, grad_out.data)
    return Tensor(grad_x), grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# Activation
# ---------------------------------------------------------------------------


def _act_fwd(x: np.ndarray, spec: ActivationSpec) -> np.ndarray:
    if spec.phase == TRAIN:
        y = np.where(x >= 0, x, (np.asarray(spec.alpha, dtype=x.dtype) * x))
        return np.minimum(y, np.asarray(spec.cap, dtype=x.dtype))
    return np.clip(x, x.dtype.type(0), x.dtype.type(spec.cap))


def _act_bwd(x: np.ndarray, spec: ActivationSpec, gout: np.ndarray) -> np.ndarray:
    slope = np.where(x >= 0, x.dtype.type(1.0), x.dtype.type(spec.alpha if spec.phase == TRAIN else 0.0))
    slope = np.where(x > spec.cap, x.dtype.type(0.0), slope)
    return gout * slope


def capped_leaky_relu(x: Tensor, spec: ActivationSpec) -> Tensor:
    """min(cap, x) for x >= 0; alpha*x (train) or 0 (infer) for x < 0."""
    return Tensor(_act_fwd(x.data, spec))


def capped_leaky_relu_backward(x: Tensor, spec: ActivationSpec, grad_out: Tensor) -> Tensor:
    return Tensor(_act_bwd(x.data, spec, grad_out.data))


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------


def _maxpool_fwd(x: np.ndarray):
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ValueError(f"2x2 pooling window larger than input {h}x{w}")
    h2, w2 = h // 2, w // 2
    blocks = x[:, :, : 2 * h2, : 2 * w2].reshape(n, c, h2, 2, w2, 2)
    flat = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def _maxpool_infer(x: np.ndarray) -> np.ndarray:
    """Window maxima without the argmax bookkeeping the backward needs."""
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ValueError(f"2x2 pooling window larger than input {h}x{w}")
    h2, w2 = h // 2, w // 2
    cropped = x[:, :, : 2 * h2, : 2 * w2]
    rows = np.maximum(cropped[:, :, 0::2, :], cropped[:, :, 1::2, :])
    return np.maximum(rows[:, :, :, 0::2], rows[:, :, :, 1::2])


def _maxpool_bwd(x_shape, idx: np.ndarray, gout: np.ndarray) -> np.ndarray:
    n, c, h, w = x_shape
    h2, w2 = h // 2, w // 2
    scattered = np.zeros((n, c, h2, w2, 4), dtype=gout.dtype)
    np.put_along_axis(scattered, idx[..., None], gout[..., None], axis=-1)
    grad = np.zeros((n, c, h, w), dtype=gout.dtype)
    grad[:, :, : 2 * h2, : 2 * w2] = (
        scattered.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
    )
    return grad


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 window, stride 2; spatial dims halve (floor), odd edges dropped."""
    out, _ = _maxpool_fwd(x.data)
    return Tensor(out)


def maxpool2d_backward(x: Tensor, grad_out: Tensor) -> Tensor:
    _, idx = _maxpool_fwd(x.data)
    return Tensor(_maxpool_bwd(x.data.shape, idx, grad_out.data))


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel; output shape (n, c, 1, 1)."""
    return Tensor(x.data.mean(axis=(2, 3), keepdims=True).astype(x.dtype, copy=False))


def global_avg_pool_backward(x: Tensor, grad_out: Tensor) -> Tensor:
    n, c, h, w = x.data.shape
    g = grad_out.data / np.asarray(h * w, dtype=grad_out.data.dtype)
    return Tensor(np.broadcast_to(g, (n, c, h, w)).astype(x.dtype, copy=True))


# ---------------------------------------------------------------------------
# Softmax
# ---------------------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax over the last axis; rows sum to 1."""
    logits = np.asarray(logits)
    if not np.all(np.isfinite(logits)):
        raise ValueError("softmax requires finite logits")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Jacobian-vector product given the forward output ``probs``."""
    dot = (grad_out * probs).sum(axis=-1, keepdims=True)
    return probs * (grad_out - dot)


# ---------------------------------------------------------------------------
# Dropout
# ---------------------------------------------------------------------------


def _dropout_fwd(x: np.ndarray, rate: float, phase: str, rng: Optional[np.random.Generator]):
    _check_phase(phase)
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if phase == INFER or rate == 0:
        return x.copy(), None
    if rng is None:
        raise ValueError("train-phase dropout needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype)
    keep /= x.dtype.type(1.0 - rate)
    return x * keep, keep


def dropout(x: Tensor, rate: float, phase: str, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Zero each element with probability ``rate`` in train phase, rescaling
    survivors by 1/(1-rate); identity in infer phase."""
    out, _ = _dropout_fwd(x.data, rate, phase, rng)
    return Tensor(out)
