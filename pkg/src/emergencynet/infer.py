"""Deployment-side helpers: prediction, tiling, stream smoothing, timing.

Everything here runs the graph in inference phase.  Inputs are channel
first float arrays in the 0..255 range, matching the data pipeline.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .metrics import latency_summary
from .model import ModelGraph
from .ops import INFER


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def classify(graph: ModelGraph, x: np.ndarray) -> np.ndarray:
    """Class probabilities, one row per input image."""
    return softmax(graph.forward(x, INFER))


def embed_and_classify(graph: ModelGraph, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Probabilities plus the pooled feature vector feeding the classifier.

    The embedding is the spatial mean of the map entering the final 1x1
    projection, so temporally adjacent frames can be compared without
    touching logits.
    """
    trace = graph.forward_trace(x, INFER)
    head = graph.layer_index("head")
    feat = trace[head - 1] if head > 0 else x
    embedding = feat.mean(axis=(2, 3))
    logits = trace[-1].reshape(x.shape[0], graph.num_classes)
    return embedding, softmax(logits)


def _tile_starts(size: int, tile: int, stride: int) -> list[int]:
    starts = list(range(0, size - tile + 1, stride))
    if starts[-1] != size - tile:
        starts.append(size - tile)  # anchor the last tile to the border
    return starts


@dataclass
class TiledResult:
    boxes: list[tuple[int, int]]  # tile top-left corners (row, col)
    tile_probs: np.ndarray        # (n_tiles, num_classes)
    aggregate: np.ndarray         # (num_classes,) renormalized per-class max

    @property
    def prediction(self) -> int:
        return int(self.aggregate.argmax())


def classify_tiled(
    graph: ModelGraph,
    image: np.ndarray,
    tile: int = 240,
    overlap: int = 0,
) -> TiledResult:
    """Slide a tile grid over one large image and classify every tile.

    Interior tiles step by ``tile - overlap``; the last tile along each
    axis is anchored to the image border so coverage is complete.  The
    aggregate score takes each class's maximum over tiles, then rescales
    so the result sums to one.
    """
    if image.ndim != 3 or image.shape[0] != graph.in_channels:
        raise ValueError(f"expected a ({graph.in_channels}, h, w) image, got {image.shape}")
    if not 0 <= overlap < tile:
        raise ValueError("overlap must be in [0, tile)")
    _, h, w = image.shape
    if h < tile or w < tile:
        raise ValueError(f"image {h}x{w} is smaller than the {tile}px tile")
    stride = tile - overlap
    boxes = [
        (top, left)
        for top in _tile_starts(h, tile, stride)
        for left in _tile_starts(w, tile, stride)
    ]
    batch = np.stack([image[:, t : t + tile, l : l + tile] for t, l in boxes])
    probs = classify(graph, batch)
    peak = probs.max(axis=0)
    return TiledResult(boxes, probs, peak / peak.sum())


def smooth_stream(
    probs: np.ndarray,
    embedding: np.ndarray,
    history: Sequence[tuple[np.ndarray, np.ndarray]],
) -> np.ndarray:
    """Blend the current prediction with similar recent frames.

    Each history entry is an (embedding, probs) pair.  Its vote is
    weighted by the cosine similarity of the embeddings, clamped at
    zero so dissimilar frames cannot subtract probability mass.  With
    no history the current probabilities pass through unchanged.
    """
    votes = probs.astype(np.float64).copy()
    cur = embedding.astype(np.float64)
    cur_norm = np.linalg.norm(cur)
    for emb, p in history:
        e = emb.astype(np.float64)
        denom = cur_norm * np.linalg.norm(e)
        sim = float(cur @ e / denom) if denom > 0 else 0.0
        votes += max(0.0, sim) * p
    return votes / votes.sum()


class StreamSmoother:
    """Stateful wrapper around ``smooth_stream`` with a bounded window."""

    def __init__(self, window: int = 5):
        if window < 1:
            raise ValueError("window must be positive")
        self.window = window
        self._history: deque = deque(maxlen=window)

    def update(self, graph: ModelGraph, frame: np.ndarray) -> np.ndarray:
        """Classify one (c, h, w) frame and return smoothed probabilities."""
        embedding, probs = embed_and_classify(graph, frame[None])
        out = self.push(probs[0], embedding[0])
        return out

    def push(self, probs: np.ndarray, embedding: np.ndarray) -> np.ndarray:
        out = smooth_stream(probs, embedding, self._history)
        self._history.append((embedding, probs))
        return out

    def reset(self) -> None:
        self._history.clear()


def bench(
    graph: ModelGraph,
    iterations: int = 50,
    warmup: int = 10,
    input_hw: Optional[tuple[int, int]] = None,
    seed: int = 0,
) -> dict[str, float]:
    """Single-image latency of repeated forward passes.

    The first ``warmup`` passes prime caches and allocator pools and are
    excluded from the summary.  Timing uses the monotonic performance
    counter.
    """
    if iterations < 1:
        raise ValueError("need at least one timed iteration")
    h, w = input_hw if input_hw is not None else graph.input_hw
    rng = np.random.default_rng(seed)
    x = (rng.random((1, graph.in_channels, h, w), dtype=np.float32) * 255.0)
    times = []
    for i in range(warmup + iterations):
        t0 = time.perf_counter()
        graph.forward(x, INFER)
        dt = time.perf_counter() - t0
        if i >= warmup:
            times.append(dt)
    return latency_summary(times)
