"""Aerial emergency scene classification in plain numpy.

Submodules load lazily so the command line can pin BLAS thread counts
through environment variables before anything imports numpy.

    tensor      4-D map container and elementwise fusion primitives
    ops         layer forward/backward kernels
    acff        the atrous fusion block
    model       layer stack, builders, baselines
    complexity  parameter, MAC and memory accounting
    weights_io  checkpoint format (binary, CRC-protected)
    data        dataset indexing, decoding, split logic
    augment     training-time image transforms
    training    loss, schedule, optimizer, fit loop, gradient checking
    metrics     confusion matrix, F1, throughput
    explain     activation saliency and class activation maps
    infer       tiled classification, stream smoothing, benchmarking
    cli         command line entry point
"""

from __future__ import annotations

import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "tensor", "ops", "acff", "model", "complexity", "weights_io",
    "data", "augment", "training", "metrics", "explain", "infer", "cli",
)

__all__ = ["__version__", *_SUBMODULES]


def __getattr__(name: str):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(__all__)
