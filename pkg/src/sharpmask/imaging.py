"""Deterministic, learning-free image operations.

Image batches are numpy arrays of shape (B, 3, H, W) with square spatial
dims and every element in [0, 1]. This module provides the unsharp-mask
sharpening operator used to build training targets, the mask algebra
relating an input frame to a perturbed frame, and the 8-bit PNG codecs
used everywhere else in the pipeline.

All functions are pure; none keep state, so they are safe to call from
any number of workers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

MASK_STAGES = ("FDN", "VEN")


@dataclass(frozen=True)
class SharpenParams:
    """Unsharp-mask configuration.

    sigma:     Gaussian standard deviation in pixels (> 0).
    amount:    boost factor applied to the detail layer (>= 0).
    threshold: minimum |detail| that gets boosted; smaller detail values
               are left untouched (in [0, 1], default 0).
    """

    sigma: float = 1.0
    amount: float = 0.8
    threshold: float = 0.0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError(f"sigma must be finite and > 0, got {self.sigma}")
        if not (math.isfinite(self.amount) and self.amount >= 0):
            raise ValueError(f"amount must be finite and >= 0, got {self.amount}")
        if not (0.0 <= self.threshold <= 1.0):
            raise ValueError(f"threshold must lie in [0, 1], got {self.threshold}")

    def to_dict(self) -> dict:
        return {"sigma": self.sigma, "amount": self.amount, "threshold": self.threshold}


@dataclass
class AdversarialMask:
    """Per-pixel perturbation extracted from a composed image.

    ``data`` has the same (B, 3, H, W) layout as image batches but lives
    in [-1, 1]; ``stage`` records which network produced it.
    """

    data: np.ndarray
    stage: str

    def __post_init__(self) -> None:
        if self.stage not in MASK_STAGES:
            raise ValueError(f"stage must be one of {MASK_STAGES}, got {self.stage!r}")


def validate_batch(batch: np.ndarray, name: str = "batch") -> np.ndarray:
    """Check the image-batch contract; returns the array unchanged."""
    arr = np.asarray(batch)
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (B, 3, H, W), got {arr.shape}")
    if arr.shape[0] < 1:
        raise ValueError(f"{name} must contain at least one image")
    if arr.shape[2] != arr.shape[3]:
        raise ValueError(f"{name} must be square, got H={arr.shape[2]} W={arr.shape[3]}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    lo, hi = float(arr.min()), float(arr.max())
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1], got range [{lo}, {hi}]")
    return arr


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Discrete 1-D Gaussian, truncated at radius ceil(3*sigma), sum 1."""
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    radius = math.ceil(3.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return kernel / kernel.sum()


def _correlate1d(arr: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    """Same-size 1-D correlation along ``axis`` with reflect padding."""
    radius = len(kernel) // 2
    pads = [(0, 0)] * arr.ndim
    pads[axis] = (radius, radius)
    padded = np.pad(arr, pads, mode="reflect")
    out = np.zeros(arr.shape, dtype=np.float64)
    index = [slice(None)] * arr.ndim
    for i, weight in enumerate(kernel):
        index[axis] = slice(i, i + arr.shape[axis])
        out += weight * padded[tuple(index)]
    return out


def gaussian_blur(batch: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur of a (B, 3, H, W) batch, reflect borders.

    Internally float64; returns the input dtype.
    """
    arr = validate_batch(batch, "img")
    kernel = gaussian_kernel(sigma)
    blurred = _correlate1d(arr.astype(np.float64), kernel, axis=2)
    blurred = _correlate1d(blurred, kernel, axis=3)
    return blurred.astype(arr.dtype)


def unsharp_mask(img: np.ndarray, params: SharpenParams) -> np.ndarray:
    """Sharpen by boosting the high-frequency detail layer.

    output = clamp(img + amount * detail, 0, 1) where
    detail = img - gaussian_blur(img, sigma), zeroed wherever
    |detail| < threshold.
    """
    arr = validate_batch(img, "img")
    work = arr.astype(np.float64)
    kernel = gaussian_kernel(params.sigma)
    blurred = _correlate1d(work, kernel, axis=2)
    blurred = _correlate1d(blurred, kernel, axis=3)
    detail = work - blurred
    if params.threshold > 0.0:
        detail[np.abs(detail) < params.threshold] = 0.0
    out = np.clip(work + params.amount * detail, 0.0, 1.0)
    return out.astype(arr.dtype)


def extract_mask(base: np.ndarray, composed: np.ndarray, stage: str) -> AdversarialMask:
    """Mask such that base + mask.data == composed, element-exact.

    The mask is float64: differences of float32 image values are exactly
    representable there, which is what makes the round-trip identity
    hold bit-for-bit for the canonical float32 batches.
    """
    base_arr = validate_batch(base, "base")
    composed_arr = validate_batch(composed, "composed")
    if base_arr.shape != composed_arr.shape:
        raise ValueError(
            f"shape mismatch: base {base_arr.shape} vs composed {composed_arr.shape}"
        )
    diff = composed_arr.astype(np.float64) - base_arr.astype(np.float64)
    return AdversarialMask(data=diff, stage=stage)


def visualize_mask(mask: AdversarialMask) -> tuple[np.ndarray, dict]:
    """Affinely rescale mask values from [min, max] to [0, 1] for export.

    Returns the rescaled batch and the scale factors; an all-constant
    mask renders as mid-gray. Write the factors next to the exported
    image (see save_mask_visualization) so the rescale is invertible.
    """
    data = np.asarray(mask.data, dtype=np.float64)
    lo, hi = float(data.min()), float(data.max())
    if hi > lo:
        vis = (data - lo) / (hi - lo)
    else:
        vis = np.full(data.shape, 0.5)
    return vis.astype(np.float32), {"min": lo, "max": hi}


def save_mask_visualization(path: str | Path, mask: AdversarialMask) -> dict:
    """Export a mask as PNG plus a JSON sidecar with the rescale factors."""
    vis, scale = visualize_mask(mask)
    save_image(path, vis[0] if vis.shape[0] == 1 else vis)
    Path(path).with_suffix(".json").write_text(
        json.dumps(scale, sort_keys=True) + "\n", encoding="utf-8"
    )
    return scale


def _to_chw(img: np.ndarray) -> np.ndarray:
    arr = np.asarray(img)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError(f"expected a single image, got batch of {arr.shape[0]}")
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected shape (3, H, W), got {arr.shape}")
    return arr


def save_image(path: str | Path, img: np.ndarray) -> None:
    """Write a (3, H, W) unit-interval image as 8-bit RGB PNG.

    Quantization rounds half-to-even, so load(save(x)) differs from x by
    at most 1/510 per element.
    """
    arr = _to_chw(img)
    if not np.isfinite(arr).all():
        raise ValueError(f"refusing to save non-finite image to {path}")
    levels = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(levels.transpose(1, 2, 0), mode="RGB").save(Path(path), format="PNG")


def load_image(path: str | Path, expected_size: int | None = None) -> np.ndarray:
    """Read an 8-bit RGB raster into a (3, H, W) float32 array in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.mode != "RGB":
                raise ValueError(f"{path}: expected RGB image, got mode {im.mode!r}")
            arr = np.asarray(im, dtype=np.uint8)
    except (OSError, SyntaxError) as exc:
        raise ValueError(f"{path}: cannot decode image ({exc})") from exc
    if expected_size is not None and arr.shape[:2] != (expected_size, expected_size):
        raise ValueError(
            f"{path}: expected {expected_size}x{expected_size}, got {arr.shape[1]}x{arr.shape[0]}"
        )
    return arr.transpose(2, 0, 1).astype(np.float32) / 255.0


def load_batch(paths: list[str | Path], expected_size: int | None = None) -> np.ndarray:
    """Stack several images into a (B, 3, H, W) batch."""
    if not paths:
        raise ValueError("load_batch needs at least one path")
    return np.stack([load_image(p, expected_size) for p in paths], axis=0)
