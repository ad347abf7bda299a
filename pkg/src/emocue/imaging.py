"""8-bit grayscale images: Netpbm I/O, bilinear resize, clamped crops.

A grayscale image is a 2-D ``uint8`` array indexed ``[row, column]``.
"""

import re
from pathlib import Path

import numpy as np

from .errors import EmocueError, GeometryError


class ImageError(EmocueError):
    """Unreadable or malformed image file."""

    exit_code = 2


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _header(data, count):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, pos = [], 0
    for _ in range(count):
        m = _TOKEN.match(data, pos)
        if not m:
            raise ImageError("truncated Netpbm header")
        tokens.append(m.group(1))
        pos = m.end()
    return tokens, pos


def decode_pgm(data):
    """Decode a P5 (binary) or P2 (ASCII) graymap with maxval <= 255."""
    if data[:2] not in (b"P5", b"P2"):
        raise ImageError("not a PGM file (expected P5 or P2 magic)")
    try:
        (magic, w, h, maxval), pos = _header(data, 4)
        width, height, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise ImageError("malformed PGM header") from None
    if width < 1 or height < 1 or not 1 <= maxval <= 255:
        raise ImageError(f"unsupported PGM geometry {width}x{height} maxval {maxval}")
    n = width * height
    if magic == b"P5":
        body = data[pos + 1:pos + 1 + n]
        if len(body) != n:
            raise ImageError(f"PGM body has {len(body)} bytes, expected {n}")
        pixels = np.frombuffer(body, dtype=np.uint8)
    else:
        try:
            pixels = np.array(data[pos:].split()[:n], dtype=np.int64)
        except ValueError:
            raise ImageError("non-numeric sample in ASCII PGM") from None
        if pixels.size != n:
            raise ImageError(f"ASCII PGM has {pixels.size} samples, expected {n}")
    if pixels.max(initial=0) > maxval:
        raise ImageError("PGM sample exceeds maxval")
    if maxval != 255:
        pixels = np.rint(pixels.astype(np.float64) * 255.0 / maxval)
    return pixels.astype(np.uint8).reshape(height, width)


def read_pgm(path):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ImageError(f"cannot read {path}: {exc.strerror or exc}") from None
    return decode_pgm(data)


def encode_pgm(image):
    img = np.asarray(image, dtype=np.uint8)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def encode_pgm_ascii(image):
    img = np.asarray(image, dtype=np.uint8)
    h, w = img.shape
    rows = "\n".join(" ".join(str(v) for v in row) for row in img)
    return f"P2\n{w} {h}\n255\n{rows}\n".encode("ascii")


def encode_ppm(rgb):
    img = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def decode_ppm(data):
    if data[:2] != b"P6":
        raise ImageError("not a binary PPM (P6)")
    (_, w, h, maxval), pos = _header(data, 4)
    width, height = int(w), int(h)
    if int(maxval) != 255:
        raise ImageError("only maxval 255 PPM files are supported")
    body = data[pos + 1:pos + 1 + 3 * width * height]
    if len(body) != 3 * width * height:
        raise ImageError("truncated PPM body")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3)


def write_bytes(path, blob):
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise ImageError(f"cannot write {path}: {exc.strerror or exc}") from None


def _sample_grid(n_in, n_out):
    # half-pixel centres, clamped to the valid sample range
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(image, out_h, out_w):
    """Bilinear resample of a 2-D float array using pixel-centre alignment."""
    img = np.asarray(image, dtype=np.float64)
    if out_h < 1 or out_w < 1:
        raise GeometryError("resize target must be at least 1x1")
    y0, y1, fy = _sample_grid(img.shape[0], out_h)
    x0, x1, fx = _sample_grid(img.shape[1], out_w)
    fy, fx = fy[:, None], fx[None, :]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def resize_gray(image, width, height):
    """Resize a uint8 image to ``width`` x ``height``, rounding half up."""
    out = resize_bilinear(image, height, width)
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def crop_clamped(image, x, y, w, h):
    """Crop box (x, y, w, h) after clamping it to the image; never empty."""
    img_h, img_w = np.asarray(image).shape
    x0, y0 = min(max(int(x), 0), img_w - 1), min(max(int(y), 0), img_h - 1)
    x1, y1 = max(min(int(x + w), img_w), x0 + 1), max(min(int(y + h), img_h), y0 + 1)
    return np.asarray(image)[y0:y1, x0:x1]
