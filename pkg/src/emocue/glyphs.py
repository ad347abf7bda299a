"""Seeded synthetic 7-class glyph dataset used for desk-scale training.

Each class is a fixed 48x48 pattern; samples add a random translation of up
to +-3 px and independent per-pixel intensity jitter of up to +-16.
"""

import numpy as np

SIZE = 48
MAX_SHIFT = 3
JITTER = 16
LOW, HIGH = 40, 215

GLYPH_NAMES = ("hbar", "vbar", "cross", "ring", "quadrant", "checker", "ramp")


def _canvas_coords(dx, dy):
    # pattern is defined around the canvas centre; a shift moves the pattern
    y, x = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)
    c = (SIZE - 1) / 2
    return y - c - dy, x - c - dx


def render(cls, dx=0, dy=0):
    """Noise-free float image of glyph ``cls`` shifted by (dx, dy)."""
    y, x = _canvas_coords(dx, dy)
    name = GLYPH_NAMES[cls]
    if name == "hbar":
        on = np.abs(y) <= 4
    elif name == "vbar":
        on = np.abs(x) <= 4
    elif name == "cross":
        on = (np.abs(x - y) <= 3.5) | (np.abs(x + y) <= 3.5)
    elif name == "ring":
        r = np.hypot(x, y)
        on = (r >= 11) & (r <= 17)
    elif name == "quadrant":
        on = (x < 0) & (y < 0)
    elif name == "checker":
        on = ((np.floor(x / 8) + np.floor(y / 8)) % 2) == 0
    else:
        return np.clip(LOW + (x + SIZE / 2) * (HIGH - LOW) / SIZE, 0, 255)
    return np.where(on, HIGH, LOW).astype(np.float64)


def make_dataset(per_class, seed):
    """``per_class`` samples of each of the 7 glyphs as (uint8 image, label) pairs.

    Samples are ordered class-major; the generator is PCG64(``seed``).
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    out = []
    for cls in range(len(GLYPH_NAMES)):
        for _ in range(per_class):
            dx, dy = rng.integers(-MAX_SHIFT, MAX_SHIFT + 1, size=2)
            noise = rng.integers(-JITTER, JITTER + 1, size=(SIZE, SIZE))
            img = np.clip(render(cls, dx, dy) + noise, 0, 255)
            out.append((np.rint(img).astype(np.uint8), cls))
    return out


def train_test_split(seed, train_per_class=50, test_per_class=10):
    """350/70 train/test split with independent streams derived from ``seed``."""
    train_seed, test_seed = np.random.SeedSequence(seed).generate_state(2, dtype=np.uint64)
    return make_dataset(train_per_class, int(train_seed)), make_dataset(test_per_class, int(test_seed))
