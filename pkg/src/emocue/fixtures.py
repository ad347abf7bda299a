"""Handcrafted models, cascades and images with analytically known behaviour.

These back the self-checks in :mod:`emocue.verify`, the ``make-fixtures``
command and the test-suite. None of them is trained.
"""

import numpy as np

from . import net
from .haar import Cascade, HaarFeature, Rect, Stage, Stump
from .net import Arch, Conv, Dense, Flatten, MaxPool, NetworkConfig, ReLU, Softmax

BAND_W, BAND_H = 20, 10
DARK, LIGHT, BACKGROUND = 30, 225, 128


# ---------------------------------------------------------------- cascades

def _band_feature(x, w):
    half = BAND_H // 2
    return HaarFeature((Rect(x, 0, w, half, -1.0), Rect(x, half, w, half, 1.0)))


def band_cascade():
    """Fires on a dark band directly above a light band of the same size (20x10 window).

    Stage 1 needs the full-width bottom-minus-top response >= 0.7 (a perfect
    band scores 1.0). Stage 2 needs both the left and right halves to show
    the contrast (>= 0.35 each; a perfect band scores 0.5 per half).
    """
    stage1 = Stage((Stump(_band_feature(0, BAND_W), 0.7, -1.0, 1.0),), 0.0)
    half = BAND_W // 2
    stage2 = Stage((Stump(_band_feature(0, half), 0.35, -1.0, 1.0),
                    Stump(_band_feature(half, half), 0.35, -1.0, 1.0)), 1.5)
    return Cascade(BAND_W, BAND_H, (stage1, stage2))


def constant_cascade(threshold):
    """Single stump voting 0 either way; ``threshold`` alone decides accept/reject."""
    return Cascade(BAND_W, BAND_H, (Stage((Stump(_band_feature(0, BAND_W), 0.0, 0.0, 0.0),), threshold),))


def rejecting_cascade():
    return constant_cascade(1e9)


def accepting_cascade():
    return constant_cascade(-1e9)


def plant_band(image, x, y, scale=1):
    """Draw a dark-over-light band of ``scale`` times the base window at (x, y), in place."""
    w, h = BAND_W * scale, BAND_H * scale
    image[y:y + h // 2, x:x + w] = DARK
    image[y + h // 2:y + h, x:x + w] = LIGHT
    return (x, y, w, h)


def planted_image(width, height, origins, seed=0, noise=4):
    """Mid-gray noisy frame with one band planted at each (x, y) origin."""
    rng = np.random.Generator(np.random.PCG64(seed))
    img = np.clip(BACKGROUND + rng.integers(-noise, noise + 1, size=(height, width)), 0, 255)
    img = img.astype(np.uint8)
    boxes = [plant_band(img, x, y) for x, y in origins]
    return img, boxes


def two_eye_frame(seed=0):
    """96x72 frame with two bands side by side where eyes would be."""
    return planted_image(96, 72, [(14, 20), (60, 20)], seed)


def iou(a, b):
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    return inter / (aw * ah + bw * bh - inter)


# ---------------------------------------------------------------- models

def zero_head_model(config=None, seed=0):
    """Reference network whose final dense layer is all zeros: uniform output."""
    model = net.build_model(config or net.fernet9_config(), seed)
    params = dict(model.params)
    last = [k for k in params if "dense" in k][-2:]
    for k in last:
        params[k] = np.zeros_like(params[k])
    return model.with_params(params)


def happy_config():
    return NetworkConfig([Conv(1, 1, kernel=1, padding=0), ReLU(), Flatten(),
                          Dense(48 * 48, 7), Softmax()], Arch.CUSTOM, name="happy_router")


def happy_model():
    """Logit 3 (Happy) = mean(top half) - mean(bottom half); every other logit is 0."""
    cfg = happy_config()
    params = {k: np.zeros(v, dtype=np.float32) for k, v in cfg.param_shapes().items()}
    params["00_conv.weight"][0, 0, 0, 0] = 1.0
    row = np.zeros((48, 48), dtype=np.float32)
    row[:24] = 1.0 / (24 * 48)
    row[24:] = -1.0 / (24 * 48)
    params["03_dense.weight"][net.EmotionLabel.HAPPY] = row.ravel()
    return net.EmotionModel(cfg, params)


QUADRANTS = ("top_left", "top_right", "bottom_left", "bottom_right")
_QUAD_CELLS = 6     # the final conv map is 12x12
_QUAD_KERNEL = 25   # 2 * 12 + 1, so padding 12 reaches every offset
_GATE = 10.0


def quadrant_config():
    return NetworkConfig([
        Conv(2, 1, kernel=3, padding=1), ReLU(), MaxPool(4, 4),
        Conv(1, 2, kernel=_QUAD_KERNEL, padding=_QUAD_KERNEL // 2), ReLU(),
        Flatten(), Dense(144, 7), Softmax(),
    ], Arch.CUSTOM, name="quadrant_router")


def quadrant_model(quadrant=0, target=net.EmotionLabel.HAPPY, other_rows_seed=None):
    """Target logit = mean of one quadrant of the final conv channel.

    Layer 0 passes the image through (channel 0) and emits a constant 1
    (channel 1). The final conv reads channel 0 at its centre tap and
    channel 1 at an off-centre tap that only lands inside the zero-padded
    input for positions in the chosen quadrant; a -10 bias then pushes
    every position outside the quadrant negative. For inputs in [0, 1]
    the final conv activation is positive exactly on the quadrant.

    ``other_rows_seed`` fills the non-target dense rows with random values.
    """
    cfg = quadrant_config()
    params = {k: np.zeros(v, dtype=np.float32) for k, v in cfg.param_shapes().items()}
    params["00_conv.weight"][0, 0, 1, 1] = 1.0
    params["00_conv.bias"][1] = 1.0
    c = _QUAD_KERNEL // 2
    params["03_conv.weight"][0, 0, c, c] = 1.0
    top, left = quadrant in (0, 1), quadrant in (0, 2)
    di = c + _QUAD_CELLS if top else c - _QUAD_CELLS
    dj = c + _QUAD_CELLS if left else c - _QUAD_CELLS
    params["03_conv.weight"][0, 1, di, dj] = _GATE
    params["03_conv.bias"][0] = -_GATE
    mask = quadrant_mask(quadrant, 12)
    weights = params["06_dense.weight"]
    if other_rows_seed is not None:
        rng = np.random.Generator(np.random.PCG64(other_rows_seed))
        weights[:] = rng.uniform(-0.1, 0.1, size=weights.shape).astype(np.float32)
    weights[int(target)] = mask.ravel() / mask.sum()
    return net.EmotionModel(cfg, params)


def quadrant_mask(quadrant, size):
    half = size // 2
    mask = np.zeros((size, size), dtype=np.float32)
    rows = slice(0, half) if quadrant in (0, 1) else slice(half, size)
    cols = slice(0, half) if quadrant in (0, 2) else slice(half, size)
    mask[rows, cols] = 1
    return mask
