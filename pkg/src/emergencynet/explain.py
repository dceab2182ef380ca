"""Post-hoc attention maps for single images.

Two complementary views of what the network looked at:

``activation_saliency``
    Forward-only.  Channel-averaged feature maps are clamped at zero
    and multiplied from the deepest layer back to the shallowest, each
    step bilinearly matching resolutions, so a pixel scores high only
    when every stage kept it active.

``grad_cam``
    Gradient-weighted.  The map feeding the final 1x1 projection is
    weighted by the spatial mean of the chosen class score's gradient,
    summed over channels and rectified.

Both return float maps at the input resolution scaled to [0, 1].  Both
expect graphs built by this package (the classifier layer is named
``head``).
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Optional, Union

import numpy as np
from PIL import Image

from .data import resize_bilinear
from .model import DropoutLayer, ModelGraph
from .ops import INFER


def _single_image(graph: ModelGraph, image: np.ndarray) -> np.ndarray:
    if image.ndim != 3 or image.shape[0] != graph.in_channels:
        raise ValueError(f"expected a ({graph.in_channels}, h, w) image, got {image.shape}")
    return image[None]


def activation_saliency(graph: ModelGraph, image: np.ndarray) -> np.ndarray:
    """Multiplicative consensus of all feature maps below the classifier.

    A spatially constant network (every map flat) yields the uniform
    all-ones map: no location is more salient than another.
    """
    x = _single_image(graph, image)
    head = graph.layer_index("head")
    trace = graph.forward_trace(x, INFER)
    maps = []
    for layer, out in zip(graph.layers[:head], trace[:head]):
        if isinstance(layer, DropoutLayer):
            continue  # identity at inference, would double-count
        maps.append(np.maximum(out[0].mean(axis=0), 0.0))
    target_hw = image.shape[1:]
    if not maps:
        return np.ones(target_hw, dtype=np.float32)
    prod: Optional[np.ndarray] = None
    for m in reversed(maps):  # deepest first
        prod = m if prod is None else resize_bilinear(prod, m.shape) * m
    sal = np.maximum(resize_bilinear(prod, target_hw), 0.0)
    peak = float(sal.max())
    if peak == 0.0:
        return np.ones(target_hw, dtype=np.float32)
    return (sal / peak).astype(np.float32)


def grad_cam(
    graph: ModelGraph,
    image: np.ndarray,
    class_index: Optional[int] = None,
) -> np.ndarray:
    """Class-discriminative map from the last feature stage.

    ``class_index`` defaults to the predicted class.  If the chosen
    score does not depend on the features (zero gradient everywhere)
    the map is identically zero rather than a normalized artifact.
    """
    x = _single_image(graph, image)
    head = graph.layer_index("head")
    trace = graph.forward_trace(x, INFER)
    logits = trace[-1].reshape(1, graph.num_classes)
    if class_index is None:
        class_index = int(logits[0].argmax())
    if not 0 <= class_index < graph.num_classes:
        raise ValueError(f"class_index {class_index} out of range 0..{graph.num_classes - 1}")

    onehot = np.zeros((1, graph.num_classes), dtype=np.float64)
    onehot[0, class_index] = 1.0
    grad = graph.backward(onehot, stop_index=head)  # d score / d head-input
    act = trace[head - 1] if head > 0 else x

    weights = grad.mean(axis=(2, 3))[0]  # one importance scalar per channel
    cam = np.maximum((weights[:, None, None] * act[0]).sum(axis=0), 0.0)
    cam = np.maximum(resize_bilinear(cam, image.shape[1:]), 0.0)
    peak = float(cam.max())
    if peak == 0.0:
        return np.zeros(image.shape[1:], dtype=np.float32)
    return (cam / peak).astype(np.float32)


# -- rendering ---------------------------------------------------------


def heatmap_rgb(saliency: np.ndarray) -> np.ndarray:
    """Map a [0, 1] saliency array onto a blue-to-red ramp, uint8 HWC."""
    s = np.clip(np.asarray(saliency, dtype=np.float32), 0.0, 1.0)
    rgb = np.stack([s, 0.25 * s, 1.0 - s], axis=-1)
    return (rgb * 255.0).round().astype(np.uint8)


def overlay_rgb(image: np.ndarray, saliency: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend a heatmap over a (c, h, w) image; returns uint8 HWC."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    base = np.clip(np.transpose(image, (1, 2, 0)), 0, 255).astype(np.float32)
    heat = heatmap_rgb(saliency).astype(np.float32)
    if base.shape[:2] != heat.shape[:2]:
        raise ValueError(f"image {base.shape[:2]} and map {heat.shape[:2]} sizes differ")
    return ((1.0 - alpha) * base + alpha * heat).round().astype(np.uint8)


def _atomic_save(img: Image.Image, path: Union[str, Path]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        img.save(tmp, format="PNG")
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def save_heatmap(saliency: np.ndarray, path: Union[str, Path]) -> None:
    """Write a saliency map as a color PNG; the write is atomic."""
    _atomic_save(Image.fromarray(heatmap_rgb(saliency)), path)


def save_overlay(
    image: np.ndarray, saliency: np.ndarray, path: Union[str, Path], alpha: float = 0.5
) -> None:
    """Write the image with the heatmap blended on top; atomic."""
    _atomic_save(Image.fromarray(overlay_rgb(image, saliency, alpha)), path)
