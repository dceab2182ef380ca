"""Analytic cost accounting for built graphs.

Parameters are exact stored-array totals.  Compute is counted in
multiply-accumulates: one MAC per kernel tap per output element, so a
conv costs out_h*out_w*out_c*(in_c/groups)*k_h*k_w.  Normalization,
activations, pooling and fusion contribute no MACs; they are tallied in
a separate elementwise column.  Weight memory is 4 bytes per parameter
(the serialized format stores 32-bit floats) and megabytes are decimal.
"""

from __future__ import annotations

from dataclasses import dataclass

from .acff import AcffBlock
from .model import ConvBnAct, DropoutLayer, GlobalAvgPool, MaxPool, ModelGraph

BYTES_PER_PARAM = 4

_KINDS = {
    ConvBnAct: "conv",
    AcffBlock: "acff",
    MaxPool: "maxpool",
    GlobalAvgPool: "avgpool",
    DropoutLayer: "dropout",
}


@dataclass
class LayerCost:
    name: str
    kind: str
    out_shape: tuple[int, int, int]  # (c, h, w)
    params: int
    macs: int
    elementwise: int

    @property
    def weight_bytes(self) -> int:
        return self.params * BYTES_PER_PARAM


@dataclass
class ComplexityReport:
    input_shape: tuple[int, int, int]
    rows: list[LayerCost]

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def total_elementwise(self) -> int:
        return sum(r.elementwise for r in self.rows)

    @property
    def weight_bytes(self) -> int:
        return self.total_params * BYTES_PER_PARAM

    @property
    def weight_mb(self) -> float:
        return self.weight_bytes / 1e6

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "rows": [
                {
                    "name": r.name,
                    "kind": r.kind,
                    "out_shape": list(r.out_shape),
                    "params": r.params,
                    "macs": r.macs,
                    "elementwise": r.elementwise,
                    "weight_bytes": r.weight_bytes,
                }
                for r in self.rows
            ],
            "totals": {
                "params": self.total_params,
                "macs": self.total_macs,
                "elementwise": self.total_elementwise,
                "weight_bytes": self.weight_bytes,
                "weight_mb": self.weight_mb,
            },
        }

    def to_text(self) -> str:
        header = f"{'layer':<12} {'kind':<9} {'output':<14} {'params':>9} {'macs':>12} {'elementwise':>12}"
        lines = [header, "-" * len(header)]
        for r in self.rows:
            shape = "x".join(str(d) for d in r.out_shape)
            lines.append(
                f"{r.name:<12} {r.kind:<9} {shape:<14} {r.params:>9} {r.macs:>12} {r.elementwise:>12}"
            )
        lines.append("-" * len(header))
        lines.append(
            f"{'total':<12} {'':<9} {'':<14} {self.total_params:>9} "
            f"{self.total_macs:>12} {self.total_elementwise:>12}"
        )
        lines.append(f"weight bytes: {self.weight_bytes}  ({self.weight_mb:.3f} MB)")
        return "\n".join(lines)


def _elementwise_ops(layer, h: int, w: int) -> int:
    """Non-MAC arithmetic per forward pass at the given input size."""
    oh, ow = layer.out_hw(h, w)
    if isinstance(layer, ConvBnAct):
        out = layer.out_channels * oh * ow
        total = 0
        if layer.bn is not None:
            total += 2 * out  # scale, shift
        if layer.activated:
            total += out
        return total
    if isinstance(layer, AcffBlock):
        cfg = layer.cfg
        b = cfg.bottleneck_channels * oh * ow
        fused = cfg.fused_channels * oh * ow
        out = cfg.out_channels * oh * ow
        branches = len(cfg.dilations) + 1  # dilated paths plus the skip
        total = 3 * b                      # reduce: bn + activation
        total += len(cfg.dilations) * 2 * b  # per-branch bn
        if cfg.fusion == "average":
            total += branches * fused      # adds plus the final divide
        elif cfg.fusion in ("add", "max"):
            total += (branches - 1) * fused
        total += 3 * out                   # project: bn + activation
        return total
    if isinstance(layer, MaxPool):
        return 3 * layer.out_channels * oh * ow  # compares per 2x2 window
    if isinstance(layer, GlobalAvgPool):
        return layer.out_channels * h * w
    return 0


def analyze(graph: ModelGraph, input_hw=None) -> ComplexityReport:
    """Walk the graph at the given input size and cost every layer."""
    h, w = graph.input_hw if input_hw is None else input_hw
    rows = []
    report_input = (graph.in_channels, h, w)
    for layer in graph.layers:
        if h < 1 or w < 1:
            raise ValueError(f"spatial extent collapsed before {layer.name!r}")
        oh, ow = layer.out_hw(h, w)
        rows.append(
            LayerCost(
                name=layer.name,
                kind=_KINDS.get(type(layer), type(layer).__name__.lower()),
                out_shape=(layer.out_channels, oh, ow),
                params=layer.param_count(),
                macs=layer.macs(h, w),
                elementwise=_elementwise_ops(layer, h, w),
            )
        )
        h, w = oh, ow
    return ComplexityReport(report_input, rows)


def count_params(graph: ModelGraph) -> ComplexityReport:
    """Exact stored-parameter accounting (the MAC column rides along)."""
    return analyze(graph)


def count_macs(graph: ModelGraph, input_hw=None) -> ComplexityReport:
    """MAC accounting, optionally at a different input resolution."""
    return analyze(graph, input_hw)
