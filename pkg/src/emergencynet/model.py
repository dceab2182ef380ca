"""Network assembly: layer wrappers, the classifier graph, and builders.

The classifier is fully convolutional: a strided 3x3 stem, six fusion
blocks interleaved with 2x2 max pooling, a 1x1 classification convolution
producing one map per class, then global average pooling down to logits.
Builders also produce three plain-convolution baselines of the same
depth and widths so the fusion design can be compared at equal topology:

* ``standard`` replaces each block with a dense 3x3 convolution;
* ``depthwise-separable`` uses a depthwise 3x3 followed by a pointwise 1x1;
* ``spatially-separable`` factorizes the 3x3 into a 3x1 and a 1x3.

Every layer exposes the same small protocol: ``forward(x, phase)`` and
``backward(grad)`` on (n, c, h, w) arrays with internal caching, plus
parameter dictionaries, shape and cost accounting, and a decision
signature (which kinks the last forward committed to) for gradient
checking.
"""

from __future__ import annotations

from typing import Optional, Union

import numpy as np

from .acff import AcffBlock, AcffConfig, FUSION_MODES
from .ops import (
    INFER,
    TRAIN,
    ActivationSpec,
    BatchNormParams,
    ConvKernel,
    _act_bwd,
    _act_fwd,
    _bn_bwd,
    _bn_fwd,
    _conv_bwd,
    _conv_fwd,
    _maxpool_bwd,
    _maxpool_fwd,
    _maxpool_infer,
    conv_output_hw,
)
from .tensor import Tensor

BLOCK_WIDTHS = ((16, 64), (64, 96), (96, 128), (128, 128), (128, 128), (128, 256))
STEM_CHANNELS = 16
ARCHITECTURES = ("acff", "standard", "depthwise-separable", "spatially-separable")


class ConvBnAct:
    """Convolution with optional batch norm and optional capped activation."""

    def __init__(
        self,
        name: str,
        kernel: ConvKernel,
        bn: Optional[BatchNormParams] = None,
        activated: bool = False,
        cap: float = 255.0,
        alpha: float = 0.01,
    ):
        self.name = name
        self.kernel = kernel
        self.bn = bn
        self.activated = activated
        self.cap = cap
        self.alpha = alpha
        self._cache = None
        self._grads: dict[str, np.ndarray] = {}

    @property
    def in_channels(self) -> int:
        return self.kernel.in_channels

    @property
    def out_channels(self) -> int:
        return self.kernel.out_channels

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        return conv_output_hw(h, w, self.kernel)

    def param_count(self) -> int:
        n = self.kernel.param_count()
        if self.bn is not None:
            n += 4 * self.out_channels
        return n

    def macs(self, h: int, w: int) -> int:
        oh, ow = self.out_hw(h, w)
        kh, kw = self.kernel.kernel_size
        return oh * ow * self.out_channels * self.kernel.in_channels_per_group * kh * kw

    def trainable_params(self) -> dict[str, np.ndarray]:
        out = {f"{self.name}.w": self.kernel.weights}
        if self.kernel.bias is not None:
            out[f"{self.name}.b"] = self.kernel.bias
        if self.bn is not None:
            out[f"{self.name}.bn.gamma"] = self.bn.gamma
            out[f"{self.name}.bn.beta"] = self.bn.beta
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        out = self.trainable_params()
        if self.bn is not None:
            out[f"{self.name}.bn.mean"] = self.bn.running_mean
            out[f"{self.name}.bn.var"] = self.bn.running_var
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.kernel.weights = state[f"{self.name}.w"]
        if self.kernel.bias is not None:
            self.kernel.bias = state[f"{self.name}.b"]
        if self.bn is not None:
            self.bn.gamma = state[f"{self.name}.bn.gamma"]
            self.bn.beta = state[f"{self.name}.bn.beta"]
            self.bn.running_mean = state[f"{self.name}.bn.mean"]
            self.bn.running_var = state[f"{self.name}.bn.var"]

    def grads(self) -> dict[str, np.ndarray]:
        return self._grads

    def astype(self, dtype) -> None:
        self.kernel.astype(dtype)
        if self.bn is not None:
            self.bn.astype(dtype)

    def forward(self, x: np.ndarray, phase: str = INFER) -> np.ndarray:
        y, xp = _conv_fwd(x, self.kernel)
        bnc = None
        if self.bn is not None:
            y, bnc = _bn_fwd(y, self.bn, phase)
        pre_act = y
        if self.activated:
            y = _act_fwd(y, ActivationSpec(self.cap, self.alpha, phase))
        self._cache = (xp, bnc, pre_act, phase)
        return y

    def backward(self, gout: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        xp, bnc, pre_act, phase = self._cache
        g = gout
        if self.activated:
            g = _act_bwd(pre_act, ActivationSpec(self.cap, self.alpha, phase), g)
        grads = {}
        if self.bn is not None:
            g, g_gamma, g_beta = _bn_bwd(bnc, self.bn, g)
            grads[f"{self.name}.bn.gamma"] = g_gamma
            grads[f"{self.name}.bn.beta"] = g_beta
        grad_x, grad_w, grad_b = _conv_bwd(xp, self.kernel, g)
        grads[f"{self.name}.w"] = grad_w
        if grad_b is not None:
            grads[f"{self.name}.b"] = grad_b
        self._grads = grads
        return grad_x

    def decision_signature(self) -> list[np.ndarray]:
        if self._cache is None or not self.activated:
            return []
        pre_act = self._cache[2]
        return [(pre_act >= 0).astype(np.int8) + (pre_act > self.cap).astype(np.int8)]


class MaxPool:
    """2x2 / stride 2 max pooling."""

    def __init__(self, name: str, channels: int):
        self.name = name
        self.channels = channels
        self._cache = None

    @property
    def in_channels(self) -> int:
        return self.channels

    @property
    def out_channels(self) -> int:
        return self.channels

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        return h // 2, w // 2

    def param_count(self) -> int:
        return 0

    def macs(self, h: int, w: int) -> int:
        return 0

    def trainable_params(self) -> dict[str, np.ndarray]:
        return {}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {}

    def load_state(self, state) -> None:
        pass

    def grads(self) -> dict[str, np.ndarray]:
        return {}

    def astype(self, dtype) -> None:
        pass

    def forward(self, x: np.ndarray, phase: str = INFER) -> np.ndarray:
        if phase == TRAIN:
            out, idx = _maxpool_fwd(x)
            self._cache = (x.shape, idx)
            return out
        # inference skips the argmax bookkeeping; keep the input so a
        # later backward or signature request can still rebuild it
        self._cache = (x, None)
        return _maxpool_infer(x)

    def _indexed_cache(self):
        ref, idx = self._cache
        if idx is None:
            _, idx = _maxpool_fwd(ref)
            self._cache = (ref.shape, idx)
        return self._cache

    def backward(self, gout: np.ndarray) -> np.ndarray:
        shape, idx = self._indexed_cache()
        return _maxpool_bwd(shape, idx, gout)

    def decision_signature(self) -> list[np.ndarray]:
        if self._cache is None:
            return []
        return [self._indexed_cache()[1].astype(np.int8)]


class GlobalAvgPool:
    """Spatial mean, collapsing each map to 1x1."""

    def __init__(self, name: str, channels: int):
        self.name = name
        self.channels = channels
        self._in_shape = None

    @property
    def in_channels(self) -> int:
        return self.channels

    @property
    def out_channels(self) -> int:
        return self.channels

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        return 1, 1

    def param_count(self) -> int:
        return 0

    def macs(self, h: int, w: int) -> int:
        return 0

    def trainable_params(self) -> dict[str, np.ndarray]:
        return {}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {}

    def load_state(self, state) -> None:
        pass

    def grads(self) -> dict[str, np.ndarray]:
        return {}

    def astype(self, dtype) -> None:
        pass

    def forward(self, x: np.ndarray, phase: str = INFER) -> np.ndarray:
        self._in_shape = x.shape
        return x.mean(axis=(2, 3), keepdims=True).astype(x.dtype, copy=False)

    def backward(self, gout: np.ndarray) -> np.ndarray:
        n, c, h, w = self._in_shape
        g = gout / np.asarray(h * w, dtype=gout.dtype)
        return np.broadcast_to(g, (n, c, h, w)).astype(gout.dtype, copy=True)

    def decision_signature(self) -> list[np.ndarray]:
        return []


class DropoutLayer:
    """Inverted dropout; identity in the infer phase.

    The mask comes from a layer-owned generator so training runs are
    reproducible from the build seed.  Setting ``frozen`` makes repeated
    forwards reuse the last mask, which finite-difference probing needs.
    """

    def __init__(self, name: str, channels: int, rate: float = 0.2, seed: int = 0):
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.name = name
        self.channels = channels
        self.rate = float(rate)
        self.frozen = False
        self._rng = np.random.default_rng(seed)
        self._cache = None

    def reseed(self, seed: int) -> None:
        self._rng = np.random.default_rng(seed)
        self._cache = None

    @property
    def in_channels(self) -> int:
        return self.channels

    @property
    def out_channels(self) -> int:
        return self.channels

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        return h, w

    def param_count(self) -> int:
        return 0

    def macs(self, h: int, w: int) -> int:
        return 0

    def trainable_params(self) -> dict[str, np.ndarray]:
        return {}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {}

    def load_state(self, state) -> None:
        pass

    def grads(self) -> dict[str, np.ndarray]:
        return {}

    def astype(self, dtype) -> None:
        pass

    def forward(self, x: np.ndarray, phase: str = INFER) -> np.ndarray:
        if phase == INFER or self.rate == 0:
            self._cache = (None,)
            return x
        if self.frozen and self._cache is not None \
                and self._cache[0] is not None and self._cache[0].shape == x.shape:
            mask = self._cache[0]
        else:
            mask = self._rng.random(x.shape) >= self.rate
        self._cache = (mask,)
        return x * mask.astype(x.dtype) / x.dtype.type(1.0 - self.rate)

    def backward(self, gout: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward before forward")
        mask = self._cache[0]
        if mask is None:
            return gout
        return gout * mask.astype(gout.dtype) / gout.dtype.type(1.0 - self.rate)

    def decision_signature(self) -> list[np.ndarray]:
        if self._cache is None or self._cache[0] is None:
            return []
        return [self._cache[0].astype(np.int8)]


Layer = Union[ConvBnAct, AcffBlock, MaxPool, GlobalAvgPool, DropoutLayer]


class ModelGraph:
    """An ordered layer stack with static shape validation.

    ``forward`` maps an image batch to logits of shape (n, num_classes);
    ``backward`` runs the exact reverse and leaves per-layer gradients in
    place.  ``config`` is a flat str->str dict that travels with saved
    weights so a checkpoint can rebuild its own architecture.
    """

    def __init__(
        self,
        layers: list[Layer],
        num_classes: int,
        input_hw: tuple[int, int],
        in_channels: int = 3,
        config: Optional[dict[str, str]] = None,
    ):
        self.layers = layers
        self.num_classes = num_classes
        self.input_hw = tuple(input_hw)
        self.in_channels = in_channels
        self.config = dict(config or {})
        self._check_shapes()

    def _check_shapes(self) -> None:
        c = self.in_channels
        h, w = self.input_hw
        for layer in self.layers:
            if layer.in_channels != c:
                raise ValueError(
                    f"layer {layer.name!r} expects {layer.in_channels} channels, gets {c}"
                )
            if h < 1 or w < 1:
                raise ValueError(f"spatial extent collapsed before {layer.name!r}")
            c = layer.out_channels
            h, w = layer.out_hw(h, w)
        if c != self.num_classes or (h, w) != (1, 1):
            raise ValueError(
                f"graph ends with (c={c}, h={h}, w={w}), wanted ({self.num_classes}, 1, 1)"
            )

    @property
    def dtype(self):
        for layer in self.layers:
            for v in layer.trainable_params().values():
                return v.dtype
        return np.dtype(np.float32)

    def shape_trace(self) -> list[tuple[str, int, int, int]]:
        """(layer name, out channels, out h, out w) for every layer."""
        c, (h, w) = self.in_channels, self.input_hw
        rows = []
        for layer in self.layers:
            c = layer.out_channels
            h, w = layer.out_hw(h, w)
            rows.append((layer.name, c, h, w))
        return rows

    def forward(self, x: Union[Tensor, np.ndarray], phase: str = INFER) -> np.ndarray:
        a = x.data if isinstance(x, Tensor) else x
        if a.ndim != 4:
            raise ValueError("model input must be (n, c, h, w)")
        a = a.astype(self.dtype, copy=False)
        for layer in self.layers:
            a = layer.forward(a, phase)
        return a.reshape(a.shape[0], self.num_classes)

    def forward_trace(self, x: Union[Tensor, np.ndarray], phase: str = INFER) -> list[np.ndarray]:
        """Per-layer outputs of one forward pass (layer caches stay primed)."""
        a = x.data if isinstance(x, Tensor) else x
        a = a.astype(self.dtype, copy=False)
        outs = []
        for layer in self.layers:
            a = layer.forward(a, phase)
            outs.append(a)
        return outs

    def backward(self, grad_logits: np.ndarray, stop_index: int = 0) -> np.ndarray:
        """Pull gradients back to the input of ``layers[stop_index]``."""
        n = grad_logits.shape[0]
        g = grad_logits.reshape(n, self.num_classes, 1, 1).astype(self.dtype, copy=False)
        for layer in reversed(self.layers[stop_index:]):
            g = layer.backward(g)
        return g

    def layer_index(self, name: str) -> int:
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                return i
        raise KeyError(name)

    def trainable_params(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            out.update(layer.trainable_params())
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            out.update(layer.state_dict())
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        current = self.state_dict()
        if set(current) != set(state):
            missing = sorted(set(current) - set(state))[:3]
            extra = sorted(set(state) - set(current))[:3]
            raise ValueError(f"state mismatch: missing {missing}, unexpected {extra}")
        for k, cur in current.items():
            if cur.shape != state[k].shape:
                raise ValueError(f"shape mismatch for {k!r}: {cur.shape} vs {state[k].shape}")
        for layer in self.layers:
            layer.load_state(state)

    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            out.update(layer.grads())
        return out

    def astype(self, dtype) -> "ModelGraph":
        for layer in self.layers:
            layer.astype(dtype)
        return self

    def param_count(self) -> int:
        return sum(layer.param_count() for layer in self.layers)

    def macs(self) -> int:
        total = 0
        h, w = self.input_hw
        for layer in self.layers:
            total += layer.macs(h, w)
            h, w = layer.out_hw(h, w)
        return total

    def decision_signature(self) -> list[np.ndarray]:
        sig = []
        for layer in self.layers:
            sig.extend(layer.decision_signature())
        return sig


def _stem(rng, dtype, cap, alpha) -> ConvBnAct:
    k = ConvKernel.he_init(rng, STEM_CHANNELS, 3, 3, 3, stride=2, padding=1, dtype=dtype)
    bn = BatchNormParams.identity(STEM_CHANNELS, dtype=dtype)
    return ConvBnAct("stem", k, bn, activated=True, cap=cap, alpha=alpha)


def _head(rng, num_classes, dtype) -> ConvBnAct:
    k = ConvKernel.he_init(rng, num_classes, BLOCK_WIDTHS[-1][1], 1, 1, with_bias=True, dtype=dtype)
    return ConvBnAct("head", k, bn=None, activated=False)


def _pool_positions() -> set[int]:
    # downsample after the first three blocks; the rest run at 15x15
    return {0, 1, 2}


def _channel_schedule() -> str:
    widths = [STEM_CHANNELS] + [cout for _, cout in BLOCK_WIDTHS]
    return ",".join(str(c) for c in widths)


DROPOUT_RATE = 0.2  # after the widest block only


def _dropout(rng, rate: float) -> DropoutLayer:
    return DropoutLayer("drop", BLOCK_WIDTHS[-1][1], rate=rate, seed=int(rng.integers(2**31)))


def build_emergencynet(
    num_classes: int = 5,
    fusion: str = "add",
    input_hw: tuple[int, int] = (240, 240),
    dilations: tuple[int, ...] = (1, 2, 3),
    seed: int = 0,
    dtype=np.float32,
    cap: float = 255.0,
    alpha: float = 0.01,
    dropout: float = DROPOUT_RATE,
) -> ModelGraph:
    """The fusion-block classifier; ``fusion`` picks the merge strategy."""
    if fusion not in FUSION_MODES:
        raise ValueError(f"fusion must be one of {FUSION_MODES}")
    rng = np.random.default_rng(seed)
    layers: list[Layer] = [_stem(rng, dtype, cap, alpha)]
    for i, (cin, cout) in enumerate(BLOCK_WIDTHS):
        cfg = AcffConfig(cin, cout, fusion=fusion, dilations=dilations, cap=cap, alpha=alpha)
        layers.append(AcffBlock(f"block{i + 1}", cfg, rng, dtype=dtype))
        if i in _pool_positions():
            layers.append(MaxPool(f"pool{i + 1}", cout))
    layers.append(_dropout(rng, dropout))
    layers.append(_head(rng, num_classes, dtype))
    layers.append(GlobalAvgPool("gap", num_classes))
    config = {
        "arch": "acff",
        "fusion": fusion,
        "num_classes": str(num_classes),
        "input_hw": f"{input_hw[0]}x{input_hw[1]}",
        "dilations": ",".join(str(d) for d in dilations),
        "channels": _channel_schedule(),
    }
    return ModelGraph(layers, num_classes, input_hw, config=config)


def build_baseline(
    arch: str,
    num_classes: int = 5,
    input_hw: tuple[int, int] = (240, 240),
    seed: int = 0,
    dtype=np.float32,
    cap: float = 255.0,
    alpha: float = 0.01,
    dropout: float = DROPOUT_RATE,
) -> ModelGraph:
    """Same stem, widths, pooling and head, with plain-conv block bodies."""
    if arch not in ("standard", "depthwise-separable", "spatially-separable"):
        raise ValueError(f"unknown baseline {arch!r}")
    rng = np.random.default_rng(seed)
    layers: list[Layer] = [_stem(rng, dtype, cap, alpha)]
    for i, (cin, cout) in enumerate(BLOCK_WIDTHS):
        name = f"block{i + 1}"
        if arch == "standard":
            k = ConvKernel.he_init(rng, cout, cin, 3, 3, padding=1, dtype=dtype)
            layers.append(ConvBnAct(name, k, BatchNormParams.identity(cout, dtype=dtype),
                                    activated=True, cap=cap, alpha=alpha))
        elif arch == "depthwise-separable":
            kd = ConvKernel.he_init(rng, cin, 1, 3, 3, groups=cin, padding=1, dtype=dtype)
            layers.append(ConvBnAct(f"{name}.dw", kd, BatchNormParams.identity(cin, dtype=dtype),
                                    activated=True, cap=cap, alpha=alpha))
            kp = ConvKernel.he_init(rng, cout, cin, 1, 1, dtype=dtype)
            layers.append(ConvBnAct(f"{name}.pw", kp, BatchNormParams.identity(cout, dtype=dtype),
                                    activated=True, cap=cap, alpha=alpha))
        else:
            kv = ConvKernel.he_init(rng, cout, cin, 3, 1, padding=(1, 0), dtype=dtype)
            layers.append(ConvBnAct(f"{name}.v", kv, BatchNormParams.identity(cout, dtype=dtype),
                                    activated=True, cap=cap, alpha=alpha))
            kh = ConvKernel.he_init(rng, cout, cout, 1, 3, padding=(0, 1), dtype=dtype)
            layers.append(ConvBnAct(f"{name}.h", kh, BatchNormParams.identity(cout, dtype=dtype),
                                    activated=True, cap=cap, alpha=alpha))
        if i in _pool_positions():
            layers.append(MaxPool(f"pool{i + 1}", cout))
    layers.append(_dropout(rng, dropout))
    layers.append(_head(rng, num_classes, dtype))
    layers.append(GlobalAvgPool("gap", num_classes))
    config = {
        "arch": arch,
        "num_classes": str(num_classes),
        "input_hw": f"{input_hw[0]}x{input_hw[1]}",
        "channels": _channel_schedule(),
    }
    return ModelGraph(layers, num_classes, input_hw, config=config)


def build_model(
    arch: str = "acff",
    fusion: str = "add",
    num_classes: int = 5,
    input_hw: tuple[int, int] = (240, 240),
    dilations: tuple[int, ...] = (1, 2, 3),
    seed: int = 0,
    dtype=np.float32,
) -> ModelGraph:
    """Single entry point used by the command line and by weight loading."""
    if arch == "acff":
        return build_emergencynet(
            num_classes=num_classes, fusion=fusion, input_hw=input_hw,
            dilations=dilations, seed=seed, dtype=dtype,
        )
    return build_baseline(arch, num_classes=num_classes, input_hw=input_hw, seed=seed, dtype=dtype)


def model_from_config(config: dict[str, str], seed: int = 0, dtype=np.float32) -> ModelGraph:
    """Rebuild the architecture a weights file describes."""
    arch = config.get("arch", "acff")
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r} in config")
    h, _, w = config.get("input_hw", "240x240").partition("x")
    kw: dict = {
        "num_classes": int(config.get("num_classes", "5")),
        "input_hw": (int(h), int(w)),
        "seed": seed,
        "dtype": dtype,
    }
    if arch == "acff":
        dil = config.get("dilations", "1,2,3")
        return build_emergencynet(
            fusion=config.get("fusion", "add"),
            dilations=tuple(int(d) for d in dil.split(",")),
            **kw,
        )
    return build_baseline(arch, **kw)
