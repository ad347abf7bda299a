"""Haar cascade detection: integral images, stump cascades, multiscale scan.

Cascades use the OpenCV ``opencv-cascade-classifier`` XML layout restricted
to depth-1 trees (stumps) over upright Haar features. See
``docs/cascade_format.md`` for the accepted grammar.

Feature responses are variance normalised::

    value = sum(weight * rect_sum) / (window_area * window_stddev)

with ``window_stddev`` replaced by 1 when the window variance is not
positive. At non-integer scales the rounded rectangles are clipped to the
window and each rect sum is rescaled by (ideal area / rounded area), so a
feature that is zero-mean at scale 1 stays zero-mean; at integer scales
this correction is exactly 1.

A stump votes ``left`` when ``value < threshold`` and ``right`` otherwise,
which is the classic ``sum / area < threshold * stddev`` test.
"""

import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass

import numpy as np

from .errors import GeometryError, ParseError, SchemaError, UnsupportedFeatureError
from .imaging import crop_clamped, resize_gray

SCALE_FACTOR = 1.1
MIN_NEIGHBORS = 3
STEP = 1
GROUP_EPS = 0.2


def iround(v):
    """Round half up (Python's ``round`` is half-to-even)."""
    return int(math.floor(v + 0.5))


# ---------------------------------------------------------------- integral image

@dataclass(frozen=True)
class IntegralImage:
    sums: np.ndarray     # (h + 1, w + 1) uint64, zero first row and column
    squares: np.ndarray  # same shape, sums of squared pixels

    @property
    def width(self):
        return self.sums.shape[1] - 1

    @property
    def height(self):
        return self.sums.shape[0] - 1

    def rect_sum(self, x, y, w, h, squared=False):
        t = self.squares if squared else self.sums
        return int(t[y + h, x + w]) - int(t[y, x + w]) - int(t[y + h, x]) + int(t[y, x])


def integral(image):
    img = np.asarray(image, dtype=np.uint64)
    if img.ndim != 2:
        raise GeometryError(f"integral image needs a 2-D image, got shape {img.shape}")
    sums = np.zeros((img.shape[0] + 1, img.shape[1] + 1), dtype=np.uint64)
    squares = np.zeros_like(sums)
    sums[1:, 1:] = img.cumsum(axis=0).cumsum(axis=1)
    squares[1:, 1:] = (img * img).cumsum(axis=0).cumsum(axis=1)
    return IntegralImage(sums, squares)


# ---------------------------------------------------------------- cascade model

def _as_f32(v):
    # cascade reals are 32-bit, however they were constructed, so parse/serialize round-trips exactly
    return float(np.float32(v))


@dataclass(frozen=True)
class Rect:
    x: int
    y: int
    w: int
    h: int
    weight: float

    def __post_init__(self):
        object.__setattr__(self, "weight", _as_f32(self.weight))


@dataclass(frozen=True)
class HaarFeature:
    rects: tuple


@dataclass(frozen=True)
class Stump:
    feature: HaarFeature
    threshold: float
    left: float
    right: float

    def __post_init__(self):
        for name in ("threshold", "left", "right"):
            object.__setattr__(self, name, _as_f32(getattr(self, name)))


@dataclass(frozen=True)
class Stage:
    stumps: tuple
    threshold: float

    def __post_init__(self):
        object.__setattr__(self, "stumps", tuple(self.stumps))
        object.__setattr__(self, "threshold", _as_f32(self.threshold))


@dataclass(frozen=True)
class Cascade:
    width: int
    height: int
    stages: tuple

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise SchemaError("cascade window must be at least 1x1")
        if not self.stages or any(not s.stumps for s in self.stages):
            raise SchemaError("cascade needs at least one stage, each with at least one stump")
        for stage in self.stages:
            for stump in stage.stumps:
                for r in stump.feature.rects:
                    if r.w < 1 or r.h < 1 or r.x < 0 or r.y < 0 \
                            or r.x + r.w > self.width or r.y + r.h > self.height:
                        raise SchemaError(f"rect {r} lies outside the {self.width}x{self.height} window")
                    if r.weight == 0:
                        raise SchemaError(f"rect {r} has zero weight")


@dataclass(frozen=True)
class Detection:
    x: int
    y: int
    w: int
    h: int
    scale: float = 1.0
    neighbors: int = 1

    @property
    def box(self):
        return (self.x, self.y, self.w, self.h)

    def to_json(self):
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h, "neighbors": self.neighbors}


# ---------------------------------------------------------------- evaluation

def window_size(cascade, scale):
    return iround(cascade.width * scale), iround(cascade.height * scale)


def _box_sums(table, x, y, w, h):
    # vectorised 4-lookup rectangle sum; int64 is exact for 8-bit images far beyond any practical size
    return table[y + h, x + w] - table[y, x + w] - table[y + h, x] + table[y, x]


class _Scanner:
    """Evaluates a cascade on arrays of window origins at one scale."""

    def __init__(self, ii, cascade, scale):
        self.cascade = cascade
        self.scale = scale
        self.ww, self.wh = window_size(cascade, scale)
        if self.ww < 1 or self.wh < 1:
            raise GeometryError(f"scale {scale} shrinks the window to nothing")
        self.sums = ii.sums.astype(np.int64)
        self.squares = ii.squares.astype(np.int64)
        self.img_w, self.img_h = ii.width, ii.height

    def check(self, xs, ys):
        if np.any(xs < 0) or np.any(ys < 0) or np.any(xs + self.ww > self.img_w) \
                or np.any(ys + self.wh > self.img_h):
            raise GeometryError(f"{self.ww}x{self.wh} window does not fit the "
                                f"{self.img_w}x{self.img_h} image")

    def scaled_rect(self, r):
        s = self.scale
        rx = min(iround(r.x * s), self.ww - 1)
        ry = min(iround(r.y * s), self.wh - 1)
        rw = max(1, min(iround(r.w * s), self.ww - rx))
        rh = max(1, min(iround(r.h * s), self.wh - ry))
        return rx, ry, rw, rh, (r.w * r.h * s * s) / (rw * rh)

    def norm(self, xs, ys):
        area = self.ww * self.wh
        s = _box_sums(self.sums, xs, ys, self.ww, self.wh).astype(np.float64)
        q = _box_sums(self.squares, xs, ys, self.ww, self.wh).astype(np.float64)
        var = (q * area - s * s) / (float(area) * area)
        ideal = self.cascade.width * self.cascade.height * self.scale * self.scale
        return ideal * np.where(var > 0, np.sqrt(np.maximum(var, 0)), 1.0)

    def feature(self, feature, xs, ys, norm):
        total = np.zeros(len(xs))
        for r in feature.rects:
            rx, ry, rw, rh, corr = self.scaled_rect(r)
            total = total + (r.weight * corr) * _box_sums(self.sums, xs + rx, ys + ry, rw, rh)
        return total / norm

    def stage_sum(self, stage, xs, ys, norm):
        total = np.zeros(len(xs))
        for stump in stage.stumps:
            v = self.feature(stump.feature, xs, ys, norm)
            total = total + np.where(v < stump.threshold, stump.left, stump.right)
        return total

    def accept(self, xs, ys):
        """Staged evaluation: windows leave the active set at the first failing stage."""
        xs, ys = np.asarray(xs, dtype=np.int64), np.asarray(ys, dtype=np.int64)
        self.check(xs, ys)
        alive = np.arange(len(xs))
        norm = self.norm(xs, ys)
        for stage in self.cascade.stages:
            if not alive.size:
                break
            passed = self.stage_sum(stage, xs[alive], ys[alive], norm[alive]) >= stage.threshold
            alive = alive[passed]
        out = np.zeros(len(xs), dtype=bool)
        out[alive] = True
        return out


def eval_feature(ii, feature, window_origin, window_scale, window=None):
    """Normalised response of ``feature`` in one window.

    ``window`` is the base (unscaled) window size; it defaults to the
    feature's bounding box measured from the window origin.
    """
    if window is None:
        window = (max(r.x + r.w for r in feature.rects), max(r.y + r.h for r in feature.rects))
    shell = Cascade(window[0], window[1], (Stage((Stump(feature, 0.0, 0.0, 0.0),), 0.0),))
    sc = _Scanner(ii, shell, window_scale)
    xs, ys = np.array([window_origin[0]]), np.array([window_origin[1]])
    sc.check(xs, ys)
    return float(sc.feature(feature, xs, ys, sc.norm(xs, ys))[0])


def run_cascade(ii, cascade, window_origin, window_scale):
    sc = _Scanner(ii, cascade, window_scale)
    return bool(sc.accept([window_origin[0]], [window_origin[1]])[0])


# ---------------------------------------------------------------- grouping

def _similar(a, b, eps=GROUP_EPS):
    dw = eps * min(a.w, b.w)
    dh = eps * min(a.h, b.h)
    return (abs(a.x - b.x) <= dw and abs(a.y - b.y) <= dh
            and abs(a.w - b.w) <= dw and abs(a.h - b.h) <= dh)


def group_detections(raw, min_neighbors):
    """Cluster raw hits (transitive closure of ``_similar``) and average each cluster."""
    n = len(raw)
    label = [-1] * n
    groups = []
    for i in range(n):
        if label[i] >= 0:
            continue
        label[i] = len(groups)
        members, frontier = [i], [i]
        while frontier:
            j = frontier.pop()
            for k in range(n):
                if label[k] < 0 and _similar(raw[j], raw[k]):
                    label[k] = label[i]
                    members.append(k)
                    frontier.append(k)
        groups.append(sorted(members))
    out = []
    for members in groups:
        if len(members) < min_neighbors:
            continue
        m = len(members)
        out.append(Detection(
            iround(sum(raw[k].x for k in members) / m),
            iround(sum(raw[k].y for k in members) / m),
            iround(sum(raw[k].w for k in members) / m),
            iround(sum(raw[k].h for k in members) / m),
            sum(raw[k].scale for k in members) / m,
            m,
        ))
    return sort_detections(out)


def sort_detections(dets):
    return sorted(dets, key=lambda d: (d.y, d.x, d.w, d.h, -d.neighbors, d.scale))


# ---------------------------------------------------------------- scanning

def scan_raw(ii, cascade, scale_factor=SCALE_FACTOR, step=STEP):
    """Every accepted window over all scales, before grouping."""
    if scale_factor <= 1:
        raise GeometryError("scale_factor must exceed 1")
    if step < 1:
        raise GeometryError("step must be positive")
    if ii.width < cascade.width or ii.height < cascade.height:
        raise GeometryError(f"image {ii.width}x{ii.height} is smaller than the "
                            f"{cascade.width}x{cascade.height} cascade window")
    raw = []
    k = 0
    while True:
        scale = scale_factor ** k
        ww, wh = window_size(cascade, scale)
        if ww > ii.width or wh > ii.height:
            break
        stride = max(1, iround(step * scale))
        gy, gx = np.mgrid[0:ii.height - wh + 1:stride, 0:ii.width - ww + 1:stride]
        xs, ys = gx.ravel(), gy.ravel()
        hits = _Scanner(ii, cascade, scale).accept(xs, ys)
        raw.extend(Detection(int(x), int(y), ww, wh, scale) for x, y in zip(xs[hits], ys[hits]))
        k += 1
    return raw


def detect_multiscale(image, cascade, scale_factor=SCALE_FACTOR, min_neighbors=MIN_NEIGHBORS, step=STEP):
    if min_neighbors < 0:
        raise GeometryError("min_neighbors must be nonnegative")
    ii = image if isinstance(image, IntegralImage) else integral(image)
    return group_detections(scan_raw(ii, cascade, scale_factor, step), min_neighbors)


def extract_eye_rois(image, eye_cascade, target_size=(48, 48), scale_factor=SCALE_FACTOR,
                     min_neighbors=MIN_NEIGHBORS, step=STEP):
    """Crop up to two detections (highest neighbour counts), left to right, resized to ``target_size``.

    Returns ``(crops, detections)``; an empty list means the caller should
    classify the whole frame instead.
    """
    img = np.asarray(image)
    if img.shape[0] < eye_cascade.height or img.shape[1] < eye_cascade.width:
        return [], []
    dets = detect_multiscale(img, eye_cascade, scale_factor, min_neighbors, step)
    best = sorted(dets, key=lambda d: -d.neighbors)[:2]  # stable: keeps canonical order among ties
    best.sort(key=lambda d: (d.x, d.y))
    tw, th = target_size
    return [resize_gray(crop_clamped(img, *d.box), tw, th) for d in best], best


# ---------------------------------------------------------------- XML

def _f32(text, what):
    try:
        return float(np.float32(text))
    except (TypeError, ValueError):
        raise SchemaError(f"{what}: expected a real number, got {text!r}") from None


def _fmt(v):
    return str(np.float32(v))


def _child(node, tag, where):
    el = node.find(tag)
    if el is None:
        raise SchemaError(f"missing required element <{tag}> in {where}")
    return el


def _int(el, what):
    try:
        return int((el.text or "").strip())
    except ValueError:
        raise SchemaError(f"{what}: expected an integer, got {el.text!r}") from None


def parse_cascade(xml_text):
    """Parse the stump-cascade XML subset into a :class:`Cascade`."""
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        line, col = exc.position
        raise ParseError(f"malformed cascade XML: {exc.msg if hasattr(exc, 'msg') else exc}",
                         line, col) from None
    node = root if root.tag == "cascade" else root.find("cascade")
    if node is None:
        raise SchemaError("missing required element <cascade>")
    for tag, expected in (("stageType", "BOOST"), ("featureType", "HAAR")):
        el = node.find(tag)
        if el is not None and (el.text or "").strip() != expected:
            raise UnsupportedFeatureError(f"<{tag}> {el.text!r} is not supported (only {expected})")
    width = _int(_child(node, "width", "<cascade>"), "width")
    height = _int(_child(node, "height", "<cascade>"), "height")

    features = []
    for i, fnode in enumerate(_child(node, "features", "<cascade>").findall("_")):
        tilted = fnode.find("tilted")
        if tilted is not None and (tilted.text or "0").strip() != "0":
            raise UnsupportedFeatureError(f"feature {i} is tilted; only upright features are supported")
        rects = []
        for rnode in _child(fnode, "rects", f"feature {i}").findall("_"):
            parts = (rnode.text or "").split()
            if len(parts) != 5:
                raise SchemaError(f"feature {i}: rect needs 'x y w h weight', got {rnode.text!r}")
            try:
                x, y, w, h = (int(p) for p in parts[:4])
            except ValueError:
                raise SchemaError(f"feature {i}: non-integer rect coordinate in {rnode.text!r}") from None
            rects.append(Rect(x, y, w, h, _f32(parts[4], f"feature {i} rect weight")))
        if not 2 <= len(rects) <= 3:
            raise SchemaError(f"feature {i}: expected 2 or 3 rects, found {len(rects)}")
        features.append(HaarFeature(tuple(rects)))

    stages = []
    for si, snode in enumerate(_child(node, "stages", "<cascade>").findall("_")):
        where = f"stage {si}"
        threshold = _f32(_child(snode, "stageThreshold", where).text, f"{where} stageThreshold")
        stumps = []
        for wi, wnode in enumerate(_child(snode, "weakClassifiers", where).findall("_")):
            wwhere = f"{where} weak classifier {wi}"
            nodes = (_child(wnode, "internalNodes", wwhere).text or "").split()
            leaves = (_child(wnode, "leafValues", wwhere).text or "").split()
            if len(nodes) > 4 or len(leaves) > 2:
                raise UnsupportedFeatureError(f"{wwhere}: trees deeper than one split are not supported")
            if len(nodes) != 4 or len(leaves) != 2:
                raise SchemaError(f"{wwhere}: internalNodes needs 4 values and leafValues 2")
            try:
                fidx = int(nodes[2])
            except ValueError:
                raise SchemaError(f"{wwhere}: feature index {nodes[2]!r} is not an integer") from None
            if not 0 <= fidx < len(features):
                raise SchemaError(f"{wwhere}: feature index {fidx} out of range")
            stumps.append(Stump(features[fidx], _f32(nodes[3], f"{wwhere} threshold"),
                                _f32(leaves[0], f"{wwhere} left value"),
                                _f32(leaves[1], f"{wwhere} right value")))
        stages.append(Stage(tuple(stumps), threshold))
    return Cascade(width, height, tuple(stages))


def serialize_cascade(cascade):
    """Inverse of :func:`parse_cascade`; one feature entry per stump, in stage order."""
    lines = ['<?xml version="1.0" encoding="UTF-8"?>', "<opencv_storage>",
             '<cascade type_id="opencv-cascade-classifier">',
             "  <stageType>BOOST</stageType>", "  <featureType>HAAR</featureType>",
             f"  <height>{cascade.height}</height>", f"  <width>{cascade.width}</width>",
             f"  <stageNum>{len(cascade.stages)}</stageNum>", "  <stages>"]
    features = []
    for stage in cascade.stages:
        lines += ["    <_>", f"      <maxWeakCount>{len(stage.stumps)}</maxWeakCount>",
                  f"      <stageThreshold>{_fmt(stage.threshold)}</stageThreshold>",
                  "      <weakClassifiers>"]
        for stump in stage.stumps:
            lines += ["        <_>",
                      f"          <internalNodes>0 -1 {len(features)} {_fmt(stump.threshold)}</internalNodes>",
                      f"          <leafValues>{_fmt(stump.left)} {_fmt(stump.right)}</leafValues>",
                      "        </_>"]
            features.append(stump.feature)
        lines += ["      </weakClassifiers>", "    </_>"]
    lines += ["  </stages>", "  <features>"]
    for feature in features:
        lines += ["    <_>", "      <rects>"]
        lines += [f"        <_>{r.x} {r.y} {r.w} {r.h} {_fmt(r.weight)}</_>" for r in feature.rects]
        lines += ["      </rects>", "      <tilted>0</tilted>", "    </_>"]
    lines += ["  </features>", "</cascade>", "</opencv_storage>", ""]
    return "\n".join(lines)
