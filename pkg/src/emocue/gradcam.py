"""Grad-CAM heatmaps for the emotion classifier, plus resampling and overlay."""

import numpy as np

from .autodiff import backprop
from .errors import DomainError, GeometryError, StructureError
from .net import forward_logits


def target_layer_index(config):
    """Index of the layer whose output serves as the Grad-CAM activations.

    That is the last conv or residual block ahead of any global pooling,
    or the ReLU directly after it when there is one.
    """
    kinds = [l.kind for l in config.logit_layers]
    end = kinds.index("global_avg_pool") if "global_avg_pool" in kinds else len(kinds)
    for idx in range(end - 1, -1, -1):
        if kinds[idx] in ("conv", "residual_block"):
            return idx + 1 if idx + 1 < len(kinds) and kinds[idx + 1] == "relu" else idx
    raise StructureError("Grad-CAM needs a model with at least one convolutional layer")


def compute_gradcam(model, x, target_class):
    """Heatmap at the final conv layer's resolution, normalised so its max is 1.

    Activations are the final conv layer's rectified output. Channel weights
    are the spatial means of d(logit[target]) / d(activation), taken on the
    pre-softmax logit. An all-zero map is returned as is.
    """
    n_classes = model.config.shapes()[-1][0]
    if not 0 <= target_class < n_classes:
        raise DomainError(f"target class {target_class} out of range [0, {n_classes})")
    t = target_layer_index(model.config)
    tape = []
    z = forward_logits(model, np.asarray(x, dtype=model.dtype)[None], tape)
    dlogits = np.zeros_like(z)
    dlogits[0, target_class] = 1
    _, grad = backprop(model, tape, dlogits, stop=t + 1, want_params=False)
    acts = tape[t + 1][0][0].astype(np.float64)
    weights = grad[0].astype(np.float64).mean(axis=(1, 2))
    raw = np.maximum(np.tensordot(weights, acts, axes=1), 0.0)
    peak = raw.max()
    return raw / peak if peak > 0 else raw


def upsample_bilinear(heat, out_h, out_w):
    """Corner-aligned bilinear resample (first and last samples map onto each other)."""
    heat = np.asarray(heat, dtype=np.float64)
    if out_h < 1 or out_w < 1:
        raise GeometryError("upsample target must be at least 1x1")

    def grid(n_in, n_out):
        src = np.zeros(n_out) if n_out == 1 else np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.minimum(np.floor(src).astype(np.intp), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = grid(heat.shape[0], out_h)
    x0, x1, fx = grid(heat.shape[1], out_w)
    fy, fx = fy[:, None], fx[None, :]
    top = heat[y0][:, x0] * (1 - fx) + heat[y0][:, x1] * fx
    bot = heat[y1][:, x0] * (1 - fx) + heat[y1][:, x1] * fx
    return np.clip(top * (1 - fy) + bot * fy, 0.0, 1.0)


def colormap(heat):
    """Linear blue (0) -> green (0.5) -> red (1) ramp as float RGB in [0, 255]."""
    t = np.clip(np.asarray(heat, dtype=np.float64), 0.0, 1.0)
    low = t <= 0.5
    r = np.where(low, 0.0, 255.0 * (2 * t - 1))
    g = np.where(low, 255.0 * 2 * t, 255.0 * (2 - 2 * t))
    b = np.where(low, 255.0 * (1 - 2 * t), 0.0)
    return np.stack([r, g, b], axis=-1)


def overlay(image, heat, alpha=0.4):
    """Blend the colour-mapped heat onto a grayscale image; returns (H, W, 3) uint8."""
    img = np.asarray(image, dtype=np.float64)
    heat = np.asarray(heat)
    if img.shape != heat.shape:
        raise GeometryError(f"heatmap {heat.shape} does not match image {img.shape}; upsample first")
    if not 0.0 <= alpha <= 1.0:
        raise DomainError("alpha must lie in [0, 1]")
    out = (1 - alpha) * img[..., None] + alpha * colormap(heat)
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def heatmap_to_gray(heat):
    return np.clip(np.floor(np.asarray(heat) * 255.0 + 0.5), 0, 255).astype(np.uint8)
