"""Grad-CAM over the fused feature maps feeding the global average pool.

The class-activation map weights each fused channel by the spatial mean of the
target logit's gradient on it, sums, and rectifies. The low-res map is kept
raw (nonnegative); the input-resolution overlay is bilinearly upsampled and
min-max normalized to [0, 1]. An all-zero map (dead gradient) is flagged
degenerate rather than treated as an error.
"""

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import resize_bilinear


@dataclass
class SaliencyMap:
    map: np.ndarray  # nonnegative, final-feature resolution
    overlay: np.ndarray  # [0, 1], input resolution
    target_class: int
    site: object
    degenerate: bool


def grad_cam(model, image, site, target_class):
    """Saliency of one grayscale image [H, W] toward ``target_class``.

    Runs an eval-mode forward, backpropagates the target logit to the fused
    pre-GAP features, and combines channels with gradient-mean weights.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ad.ShapeError(f"grad_cam wants a single 2-D image, got {image.shape}")
    target_class = int(target_class)
    if not 0 <= target_class < model.config.num_classes:
        raise ValueError(
            f"target_class must be in [0, {model.config.num_classes}), got {target_class}"
        )
    x = Tensor(image[None, None, :, :])
    logits, _, feats = model.forward(x, site=site, training=False, return_features=True)
    mask = np.zeros_like(logits.data)
    mask[0, target_class] = 1.0
    for _, p in model.parameters():
        p.grad = None
    ad.tensor_sum(ad.mul(logits, Tensor(mask))).backward()
    acts = feats.data[0]
    grads = feats.grad[0]
    for _, p in model.parameters():
        p.grad = None
    weights = grads.mean(axis=(1, 2))
    cam = np.maximum((weights[:, None, None] * acts).sum(axis=0), 0.0)
    degenerate = not cam.max() > 0.0
    if degenerate:
        overlay = np.zeros(image.shape)
    else:
        up = resize_bilinear(cam, image.shape[0], image.shape[1])
        lo, hi = up.min(), up.max()
        overlay = (up - lo) / (hi - lo) if hi > lo else np.zeros(image.shape)
    return SaliencyMap(
        map=cam, overlay=overlay, target_class=target_class,
        site=site, degenerate=degenerate,
    )


def export_overlay(smap, image, path):
    """Write a P6 PPM blending the grayscale image with a red heat channel.

    Each channel is half the grayscale intensity; the red channel additionally
    carries half the normalized map, so a zero map leaves a pure (darkened)
    grayscale image.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.shape != smap.overlay.shape:
        raise ValueError(
            f"image {image.shape} does not match overlay {smap.overlay.shape}"
        )
    gray = np.clip(image, 0.0, 1.0)
    r = 0.5 * gray + 0.5 * smap.overlay
    g = 0.5 * gray
    b = 0.5 * gray
    rgb = np.stack([r, g, b], axis=-1)
    data = np.round(rgb * 255.0).astype(np.uint8)
    h, w = image.shape
    path = Path(path)
    try:
        with open(path, "wb") as f:
            f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            f.write(data.tobytes())
    except OSError as exc:
        raise OSError(f"failed writing overlay {path}: {exc}") from exc


def write_map_csv(smap, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in smap.map:
            f.write(",".join(repr(float(v)) for v in row) + "\n")


def lesion_mass_ratio(overlay, lesion_mask):
    """Mean overlay value inside the lesion mask over the mean outside.

    Returns inf when all mass is inside and nan when the overlay is empty.
    """
    lesion_mask = np.asarray(lesion_mask, dtype=bool)
    if lesion_mask.shape != overlay.shape:
        raise ValueError(
            f"mask {lesion_mask.shape} does not match overlay {overlay.shape}"
        )
    if not lesion_mask.any() or lesion_mask.all():
        raise ValueError("mask must have both inside and outside pixels")
    inside = overlay[lesion_mask].mean()
    outside = overlay[~lesion_mask].mean()
    if outside == 0.0:
        return math.inf if inside > 0 else math.nan
    return float(inside / outside)
