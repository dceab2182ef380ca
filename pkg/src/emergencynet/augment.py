"""Photometric and geometric transforms for training images.

Each transform fires independently with its policy probability, so most
images in a batch arrive lightly perturbed and some arrive untouched.
Images are (3, h, w) float32 in [0, 255]; every transform preserves that
shape and the final result is clipped back into range.  When nothing
fires the input array is returned as-is, bit for bit.

Sample pairing averages two images while keeping the first one's label;
it runs at a lower probability than the per-image transforms and only
inside the training split.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

TRANSFORM_ORDER = (
    "rotate", "translate", "mirror", "zoom", "brightness",
    "channel_shift", "blur", "sharpen", "shadow",
)


@dataclass
class AugmentPolicy:
    """Per-transform firing probabilities plus magnitude knobs."""

    rotate: float = 0.3
    translate: float = 0.3
    mirror: float = 0.3
    zoom: float = 0.3
    brightness: float = 0.3
    channel_shift: float = 0.3
    blur: float = 0.3
    sharpen: float = 0.3
    shadow: float = 0.3
    pairing: float = 0.1

    rotate_deg: float = 30.0
    translate_frac: float = 0.10
    zoom_range: tuple[float, float] = (0.9, 1.1)
    brightness_frac: float = 0.25
    channel_shift_max: float = 20.0
    blur_sigma: tuple[float, float] = (0.6, 1.2)
    sharpen_amount: tuple[float, float] = (0.5, 1.5)
    shadow_strength: tuple[float, float] = (0.4, 0.75)

    def __post_init__(self):
        for name in TRANSFORM_ORDER + ("pairing",):
            p = getattr(self, name)
            if not 0 <= p <= 1:
                raise ValueError(f"probability {name}={p} outside [0, 1]")
        for name in ("zoom_range", "blur_sigma", "sharpen_amount", "shadow_strength"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} bounds out of order: ({lo}, {hi})")

    @classmethod
    def disabled(cls) -> "AugmentPolicy":
        return cls(**{name: 0.0 for name in TRANSFORM_ORDER + ("pairing",)})


def _check_image(img: np.ndarray) -> np.ndarray:
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected a (3, h, w) image, got {arr.shape}")
    return arr


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    return ndimage.rotate(img, degrees, axes=(1, 2), reshape=False, order=1, mode="nearest")


def translate(img: np.ndarray, dy: float, dx: float) -> np.ndarray:
    return ndimage.shift(img, (0.0, dy, dx), order=1, mode="nearest")


def mirror(img: np.ndarray) -> np.ndarray:
    return img[:, :, ::-1].copy()


def zoom(img: np.ndarray, scale: float) -> np.ndarray:
    """Rescale about the center, then crop or edge-pad back to size."""
    if scale <= 0:
        raise ValueError("zoom scale must be positive")
    _, h, w = img.shape
    zh = max(1, round(h * scale))
    zw = max(1, round(w * scale))
    z = ndimage.zoom(img, (1.0, zh / h, zw / w), order=1)
    zh, zw = z.shape[1:]
    if zh >= h:
        top = (zh - h) // 2
        z = z[:, top : top + h, :]
    else:
        pad = h - zh
        z = np.pad(z, ((0, 0), (pad // 2, pad - pad // 2), (0, 0)), mode="edge")
    if zw >= w:
        left = (zw - w) // 2
        z = z[:, :, left : left + w]
    else:
        pad = w - zw
        z = np.pad(z, ((0, 0), (0, 0), (pad // 2, pad - pad // 2)), mode="edge")
    return z


def brightness(img: np.ndarray, gain: float) -> np.ndarray:
    return img * gain


def channel_shift(img: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    return img + np.asarray(offsets, dtype=img.dtype).reshape(3, 1, 1)


def blur(img: np.ndarray, sigma: float) -> np.ndarray:
    return ndimage.gaussian_filter(img, sigma=(0.0, sigma, sigma))


def sharpen(img: np.ndarray, amount: float) -> np.ndarray:
    # unsharp mask: push the image away from its own low-pass version
    return img + amount * (img - blur(img, 1.0))


def shadow(img: np.ndarray, rng: np.random.Generator, strength: tuple[float, float]) -> np.ndarray:
    """Darken one side of a random line through the central region."""
    _, h, w = img.shape
    theta = rng.uniform(0.0, 2.0 * np.pi)
    cy = rng.uniform(0.25, 0.75) * h
    cx = rng.uniform(0.25, 0.75) * w
    yy = np.arange(h, dtype=np.float64)[:, None]
    xx = np.arange(w, dtype=np.float64)[None, :]
    side = (yy - cy) * np.cos(theta) + (xx - cx) * np.sin(theta) > 0
    out = img.copy()
    out[:, side] *= rng.uniform(*strength)
    return out


def augment(img: np.ndarray, rng: np.random.Generator, policy: AugmentPolicy) -> np.ndarray:
    """Apply the policy's transforms in a fixed order; clip to [0, 255].

    Returns the input array untouched when no transform fires.
    """
    arr = _check_image(img)
    _, h, w = arr.shape
    out = arr
    fired = False
    for name in TRANSFORM_ORDER:
        if rng.random() >= getattr(policy, name):
            continue
        fired = True
        if name == "rotate":
            out = rotate(out, rng.uniform(-policy.rotate_deg, policy.rotate_deg))
        elif name == "translate":
            out = translate(out, rng.uniform(-policy.translate_frac, policy.translate_frac) * h,
                            rng.uniform(-policy.translate_frac, policy.translate_frac) * w)
        elif name == "mirror":
            out = mirror(out)
        elif name == "zoom":
            out = zoom(out, rng.uniform(*policy.zoom_range))
        elif name == "brightness":
            out = brightness(out, 1.0 + rng.uniform(-policy.brightness_frac, policy.brightness_frac))
        elif name == "channel_shift":
            out = channel_shift(out, rng.uniform(-policy.channel_shift_max,
                                                 policy.channel_shift_max, size=3))
        elif name == "blur":
            out = blur(out, rng.uniform(*policy.blur_sigma))
        elif name == "sharpen":
            out = sharpen(out, rng.uniform(*policy.sharpen_amount))
        else:
            out = shadow(out, rng, policy.shadow_strength)
    if not fired:
        return arr
    return np.clip(out, 0.0, 255.0).astype(np.float32, copy=False)


def sample_pairing(image_a: np.ndarray, image_b: np.ndarray) -> np.ndarray:
    """Pixel-wise mean of two images; the caller keeps image A's label."""
    a = np.asarray(image_a)
    b = np.asarray(image_b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return (0.5 * (a.astype(np.float64) + b)).astype(np.float32)


def batch_augmenter(policy: AugmentPolicy):
    """Adapt the per-image ops to the fit loop's (batch, rng) hook.

    Pairing partners are drawn from the current (already transformed)
    batch, so a pairing pass never mixes in validation or test pixels.
    """

    def fn(xb: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        n = xb.shape[0]
        for i in range(n):
            xb[i] = augment(xb[i], rng, policy)
        if policy.pairing > 0 and n > 1:
            for i in range(n):
                if rng.random() < policy.pairing:
                    j = int(rng.integers(n - 1))
                    if j >= i:
                        j += 1
                    xb[i] = sample_pairing(xb[i], xb[j])
        return xb

    return fn
