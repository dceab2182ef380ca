"""Atrous convolutional feature fusion block.

The block reduces channels with a 1x1 bottleneck, runs parallel depthwise
3x3 convolutions at increasing dilation rates over the reduced map, fuses
the branch outputs together with the bottleneck output itself, then
projects to the target width with a second 1x1 convolution.  Every
convolution is bias-free and batch-normalized; the two pointwise stages
are activated, the depthwise branches are not (fusion sees raw normalized
branch maps).

Fusion modes:

``add``
    elementwise sum, accumulated in branch order (ascending dilation,
    bottleneck bypass last);
``average``
    the sum divided by the number of fused maps;
``max``
    elementwise maximum, ties resolved toward the earlier branch;
``concat``
    channel concatenation, which multiplies the projection input width
    by the number of fused maps.

The first three keep the parameter count identical; ``concat`` pays for
its wider projection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ops import (
    INFER,
    ActivationSpec,
    BatchNormParams,
    ConvKernel,
    _act_bwd,
    _act_fwd,
    _bn_bwd,
    _bn_fwd,
    _conv_bwd,
    _conv_fwd,
    _pad_hw,
    same_padding,
)

FUSION_MODES = ("add", "max", "average", "concat")


@dataclass
class AcffConfig:
    """Shape and behavior of one fusion block.

    The bottleneck width is half the input width (floored, at least 1).
    ``dilations`` lists the depthwise branch rates in ascending order.
    """

    in_channels: int
    out_channels: int
    fusion: str = "add"
    dilations: tuple[int, ...] = (1, 2, 3)
    cap: float = 255.0
    alpha: float = 0.01

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        self.dilations = tuple(self.dilations)
        if not self.dilations:
            raise ValueError("need at least one dilation rate")
        if any(d < 1 for d in self.dilations):
            raise ValueError("dilation rates must be >= 1")
        if list(self.dilations) != sorted(set(self.dilations)):
            raise ValueError("dilation rates must be strictly increasing")

    @property
    def bottleneck_channels(self) -> int:
        return max(1, self.in_channels // 2)

    @property
    def fused_channels(self) -> int:
        b = self.bottleneck_channels
        if self.fusion == "concat":
            return b * (len(self.dilations) + 1)
        return b


def acff_param_count(cfg: AcffConfig) -> int:
    """Closed-form parameter count (batch norm counts 4 per channel)."""
    b = cfg.bottleneck_channels
    n_branch = len(cfg.dilations)
    reduce_p = b * cfg.in_channels + 4 * b
    branch_p = n_branch * (9 * b + 4 * b)
    fuse_p = cfg.out_channels * cfg.fused_channels + 4 * cfg.out_channels
    return reduce_p + branch_p + fuse_p


def acff_macs(cfg: AcffConfig, h: int, w: int) -> int:
    """Multiply-accumulates for one block on an h x w map (stride 1)."""
    b = cfg.bottleneck_channels
    per_px = b * cfg.in_channels + len(cfg.dilations) * 9 * b + cfg.fused_channels * cfg.out_channels
    return h * w * per_px


def _fuse_fwd(inputs: list[np.ndarray], mode: str):
    if mode == "concat":
        return np.concatenate(inputs, axis=1), None
    if mode == "max":
        stacked = np.stack(inputs)
        idx = stacked.argmax(axis=0)
        return np.take_along_axis(stacked, idx[None], axis=0)[0], idx
    out = inputs[0].copy()
    for t in inputs[1:]:
        out += t
    if mode == "average":
        out /= out.dtype.type(len(inputs))
    return out, None


def _fuse_bwd(mode: str, n_inputs: int, channels: int, cache, gout: np.ndarray) -> list[np.ndarray]:
    if mode == "concat":
        return [
            np.ascontiguousarray(gout[:, i * channels : (i + 1) * channels])
            for i in range(n_inputs)
        ]
    if mode == "max":
        idx = cache
        return [np.where(idx == i, gout, gout.dtype.type(0.0)) for i in range(n_inputs)]
    if mode == "average":
        g = gout / gout.dtype.type(n_inputs)
        return [g] * n_inputs
    return [gout] * n_inputs


class AcffBlock:
    """Stateful fusion block layer: forward caches what backward needs.

    Parameter keys are scoped by the block name: ``<name>.reduce.w``,
    ``<name>.dw<rate>.w``, ``<name>.fuse.w`` plus ``.bn.gamma`` etc. for
    each normalized stage.
    """

    def __init__(self, name: str, cfg: AcffConfig, rng: np.random.Generator, dtype=np.float32):
        self.name = name
        self.cfg = cfg
        b = cfg.bottleneck_channels
        self.reduce = ConvKernel.he_init(rng, b, cfg.in_channels, 1, 1, dtype=dtype)
        self.reduce_bn = BatchNormParams.identity(b, dtype=dtype)
        self.branches = []
        self.branch_bns = []
        for d in cfg.dilations:
            k = ConvKernel.he_init(
                rng, b, 1, 3, 3, groups=b, dilation=d, padding=same_padding(3, d), dtype=dtype
            )
            self.branches.append(k)
            self.branch_bns.append(BatchNormParams.identity(b, dtype=dtype))
        self.fuse = ConvKernel.he_init(rng, cfg.out_channels, cfg.fused_channels, 1, 1, dtype=dtype)
        self.fuse_bn = BatchNormParams.identity(cfg.out_channels, dtype=dtype)
        self._cache = None
        self._grads: dict[str, np.ndarray] = {}

    # -- shape and cost accounting ------------------------------------

    @property
    def in_channels(self) -> int:
        return self.cfg.in_channels

    @property
    def out_channels(self) -> int:
        return self.cfg.out_channels

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        return h, w

    def param_count(self) -> int:
        return sum(v.size for v in self.state_dict().values())

    def macs(self, h: int, w: int) -> int:
        return acff_macs(self.cfg, h, w)

    # -- parameter access ----------------------------------------------

    def _stages(self):
        yield "reduce", self.reduce, self.reduce_bn
        for d, k, bn in zip(self.cfg.dilations, self.branches, self.branch_bns):
            yield f"dw{d}", k, bn
        yield "fuse", self.fuse, self.fuse_bn

    def trainable_params(self) -> dict[str, np.ndarray]:
        out = {}
        for stage, k, bn in self._stages():
            out[f"{self.name}.{stage}.w"] = k.weights
            out[f"{self.name}.{stage}.bn.gamma"] = bn.gamma
            out[f"{self.name}.{stage}.bn.beta"] = bn.beta
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for stage, k, bn in self._stages():
            out[f"{self.name}.{stage}.w"] = k.weights
            out[f"{self.name}.{stage}.bn.gamma"] = bn.gamma
            out[f"{self.name}.{stage}.bn.beta"] = bn.beta
            out[f"{self.name}.{stage}.bn.mean"] = bn.running_mean
            out[f"{self.name}.{stage}.bn.var"] = bn.running_var
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for stage, k, bn in self._stages():
            k.weights = state[f"{self.name}.{stage}.w"]
            bn.gamma = state[f"{self.name}.{stage}.bn.gamma"]
            bn.beta = state[f"{self.name}.{stage}.bn.beta"]
            bn.running_mean = state[f"{self.name}.{stage}.bn.mean"]
            bn.running_var = state[f"{self.name}.{stage}.bn.var"]

    def grads(self) -> dict[str, np.ndarray]:
        return self._grads

    def astype(self, dtype) -> None:
        for _, k, bn in self._stages():
            k.astype(dtype)
            bn.astype(dtype)

    # -- compute ---------------------------------------------------------

    def forward(self, x: np.ndarray, phase: str = INFER) -> np.ndarray:
        act = ActivationSpec(self.cfg.cap, self.cfg.alpha, phase)
        r, xp_r = _conv_fwd(x, self.reduce)
        rn, bnc_r = _bn_fwd(r, self.reduce_bn, phase)
        ra = _act_fwd(rn, act)

        # one shared pad at the widest dilation; narrower branches slice into it
        pad = max(k.padding[0] for k in self.branches)
        shared = _pad_hw(ra, (pad, pad))
        branch_maps = []
        branch_caches = []
        for k, bn in zip(self.branches, self.branch_bns):
            off = pad - k.padding[0]
            y, xp_b = _conv_fwd(
                ra, k, xp=shared[:, :, off : shared.shape[2] - off, off : shared.shape[3] - off]
            )
            yn, bnc_b = _bn_fwd(y, bn, phase)
            branch_maps.append(yn)
            branch_caches.append((xp_b, bnc_b))

        fused, fuse_route = _fuse_fwd(branch_maps + [ra], self.cfg.fusion)
        p, xp_p = _conv_fwd(fused, self.fuse)
        pn, bnc_p = _bn_fwd(p, self.fuse_bn, phase)
        out = _act_fwd(pn, act)

        self._cache = {
            "act": act,
            "xp_r": xp_r, "bnc_r": bnc_r, "rn": rn, "ra_shape": ra.shape,
            "branch_caches": branch_caches,
            "fuse_route": fuse_route,
            "xp_p": xp_p, "bnc_p": bnc_p, "pn": pn,
        }
        return out

    def backward(self, gout: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        c = self._cache
        act = c["act"]
        g = {}

        gp = _act_bwd(c["pn"], act, gout)
        gp, g_gamma, g_beta = _bn_bwd(c["bnc_p"], self.fuse_bn, gp)
        g[f"{self.name}.fuse.bn.gamma"] = g_gamma
        g[f"{self.name}.fuse.bn.beta"] = g_beta
        g_fused, g_w, _ = _conv_bwd(c["xp_p"], self.fuse, gp)
        g[f"{self.name}.fuse.w"] = g_w

        n_inputs = len(self.branches) + 1
        b = self.cfg.bottleneck_channels
        branch_gs = _fuse_bwd(self.cfg.fusion, n_inputs, b, c["fuse_route"], g_fused)

        grad_ra = branch_gs[-1].copy()
        for (xp_b, bnc_b), k, bn, d, gb in zip(
            c["branch_caches"], self.branches, self.branch_bns, self.cfg.dilations, branch_gs
        ):
            gb, g_gamma, g_beta = _bn_bwd(bnc_b, bn, gb)
            g[f"{self.name}.dw{d}.bn.gamma"] = g_gamma
            g[f"{self.name}.dw{d}.bn.beta"] = g_beta
            gx, g_w, _ = _conv_bwd(xp_b, k, gb)
            g[f"{self.name}.dw{d}.w"] = g_w
            grad_ra += gx

        gr = _act_bwd(c["rn"], act, grad_ra)
        gr, g_gamma, g_beta = _bn_bwd(c["bnc_r"], self.reduce_bn, gr)
        g[f"{self.name}.reduce.bn.gamma"] = g_gamma
        g[f"{self.name}.reduce.bn.beta"] = g_beta
        grad_x, g_w, _ = _conv_bwd(c["xp_r"], self.reduce, gr)
        g[f"{self.name}.reduce.w"] = g_w

        self._grads = g
        return grad_x

    def decision_signature(self) -> list[np.ndarray]:
        """Branch-selection state of the last forward: activation regions
        for both activated stages plus the max-fusion routing, if any.
        Used to discard finite-difference probes that cross a kink."""
        if self._cache is None:
            return []
        c = self._cache
        cap = self.cfg.cap
        sig = [
            ((c["rn"] >= 0).astype(np.int8) + (c["rn"] > cap).astype(np.int8)),
            ((c["pn"] >= 0).astype(np.int8) + (c["pn"] > cap).astype(np.int8)),
        ]
        if c["fuse_route"] is not None:
            sig.append(c["fuse_route"].astype(np.int8))
        return sig
