import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from emocue import fixtures, haar
from emocue.errors import GeometryError, ParseError, SchemaError, UnsupportedFeatureError
from emocue.haar import Cascade, HaarFeature, Rect, Stage, Stump


def brute_sum(img, x, y, w, h):
    total = 0
    for r in range(y, y + h):
        for c in range(x, x + w):
            total += int(img[r, c])
    return total


def window_std(img, x, y, w, h):
    vals = [int(img[r, c]) for r in range(y, y + h) for c in range(x, x + w)]
    mean = sum(vals) / len(vals)
    var = sum(v * v for v in vals) / len(vals) - mean * mean
    return math.sqrt(var) if var > 0 else 1.0


def all_stages_verdict(img, cascade, ox, oy):
    """Scale-1 oracle: evaluate every stage from raw pixel loops, then require all to pass."""
    w, h = cascade.width, cascade.height
    norm = w * h * window_std(img, ox, oy, w, h)
    results = []
    for stage in cascade.stages:
        total = 0.0
        for s in stage.stumps:
            v = sum(r.weight * brute_sum(img, ox + r.x, oy + r.y, r.w, r.h) for r in s.feature.rects) / norm
            total += s.left if v < s.threshold else s.right
        results.append(total >= stage.threshold)
    return all(results)


def lr_feature(w, h):
    half = w // 2
    return HaarFeature((Rect(0, 0, half, h, -1.0), Rect(half, 0, half, h, 1.0)))


# ---------------------------------------------------------------- integral image

def test_integral_zero_image():
    ii = haar.integral(np.zeros((4, 5), np.uint8))
    assert ii.sums.shape == (5, 6) and not ii.sums.any() and not ii.squares.any()


def test_integral_three_by_three_ones():
    ii = haar.integral(np.ones((3, 3), np.uint8))
    assert ii.rect_sum(0, 0, 3, 3) == 9
    assert ii.rect_sum(1, 1, 2, 2, squared=True) == 4


def test_integral_thousand_rectangles_exact(rng):
    img = rng.integers(0, 256, size=(32, 32)).astype(np.uint8)
    ii = haar.integral(img)
    for _ in range(1000):
        x, y = int(rng.integers(0, 32)), int(rng.integers(0, 32))
        w, h = int(rng.integers(1, 33 - x)), int(rng.integers(1, 33 - y))
        assert ii.rect_sum(x, y, w, h) == brute_sum(img, x, y, w, h)


@given(seed=st.integers(0, 2**32 - 1), h=st.integers(1, 12), w=st.integers(1, 12))
def test_integral_squares_and_monotone(seed, h, w):
    r = np.random.Generator(np.random.PCG64(seed))
    img = r.integers(0, 256, size=(h, w)).astype(np.uint8)
    ii = haar.integral(img)
    assert ii.sums.dtype == np.uint64
    assert np.all(np.diff(ii.sums.astype(np.int64), axis=0) >= 0)
    assert np.all(np.diff(ii.sums.astype(np.int64), axis=1) >= 0)
    y, x = int(r.integers(0, h)), int(r.integers(0, w))
    sq = sum(int(v) ** 2 for v in img[y:, x:].ravel())
    assert ii.rect_sum(x, y, w - x, h - y, squared=True) == sq


def test_integral_saturated_large_image_exact():
    img = np.full((300, 300), 255, np.uint8)
    ii = haar.integral(img)
    assert ii.rect_sum(0, 0, 300, 300, squared=True) == 300 * 300 * 255 * 255


# ---------------------------------------------------------------- eval_feature

def test_constant_image_balanced_feature_is_zero():
    img = np.full((12, 12), 77, np.uint8)
    feat = HaarFeature((Rect(0, 0, 6, 4, 1.0), Rect(6, 0, 3, 4, -2.0)))
    assert abs(haar.eval_feature(haar.integral(img), feat, (2, 3), 1.0)) <= 1e-6


def test_left_dark_right_light_is_positive():
    img = np.zeros((8, 8), np.uint8)
    img[:, 4:] = 200
    feat = lr_feature(8, 8)
    got = haar.eval_feature(haar.integral(img), feat, (0, 0), 1.0)
    expect = (brute_sum(img, 4, 0, 4, 8) - brute_sum(img, 0, 0, 4, 8)) / (64 * window_std(img, 0, 0, 8, 8))
    assert got > 0
    assert got == pytest.approx(expect, abs=1e-12)


def test_scale_two_on_upsampled_image_matches_scale_one(rng):
    img = rng.integers(0, 256, size=(16, 16)).astype(np.uint8)
    big = np.repeat(np.repeat(img, 2, axis=0), 2, axis=1)
    feat = HaarFeature((Rect(1, 2, 6, 3, -1.0), Rect(1, 5, 6, 3, 1.0), Rect(7, 2, 2, 6, 0.5)))
    small_v = haar.eval_feature(haar.integral(img), feat, (3, 4), 1.0, window=(10, 10))
    big_v = haar.eval_feature(haar.integral(big), feat, (6, 8), 2.0, window=(10, 10))
    assert big_v == pytest.approx(small_v, abs=1e-3)


def test_eval_feature_out_of_bounds():
    with pytest.raises(GeometryError):
        haar.eval_feature(haar.integral(np.zeros((8, 8), np.uint8)), lr_feature(8, 8), (2, 0), 1.0)


# ---------------------------------------------------------------- run_cascade

def test_threshold_extremes(rng):
    img = rng.integers(0, 256, size=(30, 40)).astype(np.uint8)
    ii = haar.integral(img)
    for x, y in ((0, 0), (5, 7), (20, 20)):
        assert haar.run_cascade(ii, fixtures.accepting_cascade(), (x, y), 1.0)
        assert not haar.run_cascade(ii, fixtures.rejecting_cascade(), (x, y), 1.0)


def _random_cascade(r, n_stages=3, win=16):
    stages = []
    for _ in range(n_stages):
        stumps = []
        for _ in range(int(r.integers(1, 4))):
            w, h = int(r.integers(1, win // 2 + 1)) * 2, int(r.integers(1, win + 1))
            x, y = int(r.integers(0, win - w + 1)), int(r.integers(0, win - h + 1))
            feat = HaarFeature((Rect(x, y, w, h, -1.0), Rect(x + w // 2, y, w // 2, h, 2.0)))
            stumps.append(Stump(feat, float(np.float32(r.normal(0, 0.05))), -1.0, 1.0))
        stages.append(Stage(tuple(stumps), 0.0))
    return Cascade(win, win, tuple(stages))


def test_staged_equals_unstaged_on_500_windows(rng):
    cascade = _random_cascade(rng)
    img = rng.integers(0, 256, size=(40, 40)).astype(np.uint8)
    ii = haar.integral(img)
    verdicts = []
    for _ in range(500):
        x, y = int(rng.integers(0, 25)), int(rng.integers(0, 25))
        staged = haar.run_cascade(ii, cascade, (x, y), 1.0)
        assert staged == all_stages_verdict(img, cascade, x, y)
        verdicts.append(staged)
    assert any(verdicts) and not all(verdicts)


def test_run_cascade_window_outside_image():
    ii = haar.integral(np.zeros((10, 20), np.uint8))
    with pytest.raises(GeometryError):
        haar.run_cascade(ii, fixtures.band_cascade(), (1, 0), 1.0)


# ---------------------------------------------------------------- detect_multiscale

def test_rejecting_cascade_finds_nothing(rng):
    img = rng.integers(0, 256, size=(50, 60)).astype(np.uint8)
    assert haar.detect_multiscale(img, fixtures.rejecting_cascade()) == []


def test_planted_band_single_detection():
    img, boxes = fixtures.planted_image(80, 60, [(31, 22)])
    dets = haar.detect_multiscale(img, fixtures.band_cascade())
    assert len(dets) == 1
    assert fixtures.iou(dets[0].box, boxes[0]) >= 0.5
    assert dets[0].neighbors >= haar.MIN_NEIGHBORS


def test_single_raw_hit_is_dropped_by_min_neighbors():
    # a window-sized image admits exactly one window at one scale
    img = np.full((fixtures.BAND_H, fixtures.BAND_W), 100, np.uint8)
    assert len(haar.scan_raw(haar.integral(img), fixtures.accepting_cascade())) == 1
    assert haar.detect_multiscale(img, fixtures.accepting_cascade(), min_neighbors=3) == []
    assert len(haar.detect_multiscale(img, fixtures.accepting_cascade(), min_neighbors=1)) == 1


def test_image_smaller_than_window():
    with pytest.raises(GeometryError):
        haar.detect_multiscale(np.zeros((5, 5), np.uint8), fixtures.band_cascade())


def test_bad_scan_parameters():
    img = np.zeros((30, 30), np.uint8)
    with pytest.raises(GeometryError):
        haar.detect_multiscale(img, fixtures.band_cascade(), scale_factor=1.0)
    with pytest.raises(GeometryError):
        haar.detect_multiscale(img, fixtures.band_cascade(), step=0)


def test_detection_is_deterministic_and_sorted():
    img, _ = fixtures.planted_image(120, 80, [(10, 10), (70, 10), (40, 50)], seed=3)
    a = haar.detect_multiscale(img, fixtures.band_cascade())
    b = haar.detect_multiscale(img, fixtures.band_cascade())
    assert a == b and len(a) == 3
    assert [(d.y, d.x, d.w) for d in a] == sorted((d.y, d.x, d.w) for d in a)


@given(dx=st.integers(1, 12), dy=st.integers(1, 12))
def test_detections_translate_with_the_image(dx, dy):
    img, _ = fixtures.planted_image(70, 50, [(20, 15)], seed=1)
    shifted = np.full((50 + dy, 70 + dx), fixtures.BACKGROUND, np.uint8)
    shifted[dy:, dx:] = img
    a = haar.detect_multiscale(img, fixtures.band_cascade())
    b = haar.detect_multiscale(shifted, fixtures.band_cascade())
    assert len(a) == len(b) == 1
    assert abs(b[0].x - (a[0].x + dx)) <= haar.STEP
    assert abs(b[0].y - (a[0].y + dy)) <= haar.STEP
    assert (b[0].w, b[0].h) == (a[0].w, a[0].h)


def test_grouping_mean_box_and_similarity():
    raw = [haar.Detection(10, 10, 20, 10, 1.0), haar.Detection(11, 10, 20, 10, 1.0),
           haar.Detection(12, 11, 22, 11, 1.1), haar.Detection(60, 10, 20, 10, 1.0)]
    out = haar.group_detections(raw, min_neighbors=2)
    assert len(out) == 1
    d = out[0]
    assert (d.x, d.y, d.w, d.h, d.neighbors) == (11, 10, 21, 10, 3)


# ---------------------------------------------------------------- extract_eye_rois

def test_no_detections_means_empty_list():
    img = np.full((40, 40), 128, np.uint8)
    crops, dets = haar.extract_eye_rois(img, fixtures.band_cascade())
    assert crops == [] and dets == []


def test_two_planted_eyes_ordered_left_to_right():
    img, boxes = fixtures.two_eye_frame()
    crops, dets = haar.extract_eye_rois(img, fixtures.band_cascade(), target_size=(48, 48))
    assert len(crops) == 2
    assert all(c.shape == (48, 48) and c.dtype == np.uint8 for c in crops)
    assert dets[0].x < dets[1].x
    assert fixtures.iou(dets[0].box, boxes[0]) >= 0.5 and fixtures.iou(dets[1].box, boxes[1]) >= 0.5


def test_more_than_two_detections_keeps_two():
    img, _ = fixtures.planted_image(120, 80, [(10, 10), (70, 10), (40, 50)], seed=3)
    crops, dets = haar.extract_eye_rois(img, fixtures.band_cascade(), target_size=(24, 12))
    assert len(crops) == 2 and all(c.shape == (12, 24) for c in crops)
    assert dets[0].x <= dets[1].x


def test_edge_band_crop_is_clamped_but_full_size():
    img = np.full((30, 40), fixtures.BACKGROUND, np.uint8)
    img[0:5, 20:40] = fixtures.DARK
    img[5:10, 20:40] = fixtures.LIGHT
    crops, dets = haar.extract_eye_rois(img, fixtures.band_cascade(), target_size=(32, 16), min_neighbors=1)
    assert crops and all(c.shape == (16, 32) for c in crops)
    from emocue.imaging import crop_clamped
    part = crop_clamped(img, 30, 25, 20, 10)
    assert part.shape == (5, 10)


# ---------------------------------------------------------------- XML

MINIMAL = """<?xml version="1.0"?>
<opencv_storage>
<cascade>
  <width>20</width>
  <height>20</height>
  <stages>
    <_>
      <stageThreshold>-1.25</stageThreshold>
      <weakClassifiers>
        <_>
          <internalNodes>0 -1 0 0.5</internalNodes>
          <leafValues>-0.75 0.875</leafValues>
        </_>
      </weakClassifiers>
    </_>
  </stages>
  <features>
    <_>
      <rects>
        <_>2 3 8 4 -1.</_>
        <_>2 5 8 2 2.</_>
      </rects>
    </_>
  </features>
</cascade>
</opencv_storage>
"""


def test_minimal_document_exact_values():
    c = haar.parse_cascade(MINIMAL)
    feat = HaarFeature((Rect(2, 3, 8, 4, -1.0), Rect(2, 5, 8, 2, 2.0)))
    assert c == Cascade(20, 20, (Stage((Stump(feat, 0.5, -0.75, 0.875),), -1.25),))
    assert c.stages[0].stumps[0].threshold == 0.5


def test_bare_cascade_root_accepted():
    bare = MINIMAL.replace("<opencv_storage>", "").replace("</opencv_storage>", "")
    assert haar.parse_cascade(bare) == haar.parse_cascade(MINIMAL)


def test_truncated_document_is_parse_error():
    with pytest.raises(ParseError) as err:
        haar.parse_cascade(MINIMAL[:200])
    assert err.value.line is not None and err.value.column is not None


@pytest.mark.parametrize("tag", ["width", "height", "stageThreshold", "internalNodes", "leafValues", "rects"])
def test_missing_element_is_schema_error_naming_it(tag):
    start = MINIMAL.index(f"<{tag}>")
    end = MINIMAL.index(f"</{tag}>") + len(f"</{tag}>")
    with pytest.raises(SchemaError, match=tag):
        haar.parse_cascade(MINIMAL[:start] + MINIMAL[end:])


def test_deeper_tree_is_unsupported():
    deep = MINIMAL.replace("<internalNodes>0 -1 0 0.5</internalNodes>",
                           "<internalNodes>1 -1 0 0.5 0 -2 0 0.1</internalNodes>")
    deep = deep.replace("<leafValues>-0.75 0.875</leafValues>", "<leafValues>-0.75 0.875 0.1</leafValues>")
    with pytest.raises(UnsupportedFeatureError):
        haar.parse_cascade(deep)


def test_tilted_and_lbp_are_unsupported():
    tilted = MINIMAL.replace("</rects>", "</rects><tilted>1</tilted>")
    with pytest.raises(UnsupportedFeatureError):
        haar.parse_cascade(tilted)
    lbp = MINIMAL.replace("<width>", "<featureType>LBP</featureType><width>")
    with pytest.raises(UnsupportedFeatureError):
        haar.parse_cascade(lbp)


@pytest.mark.parametrize("old,new", [("2 3 8 4 -1.", "2 3 8 -1."), ("2 3 8 4 -1.", "2 3 8 4 0"),
                                     ("2 3 8 4 -1.", "2 3 30 4 -1."), ("0 -1 0 0.5", "0 -1 3 0.5"),
                                     ("-1.25", "abc")])
def test_invalid_values_are_schema_errors(old, new):
    with pytest.raises(SchemaError):
        haar.parse_cascade(MINIMAL.replace(old, new, 1))


def test_empty_stages_rejected():
    start, end = MINIMAL.index("<stages>"), MINIMAL.index("</stages>")
    with pytest.raises(SchemaError):
        haar.parse_cascade(MINIMAL[:start] + "<stages></stages>" + MINIMAL[end + len("</stages>"):])


def test_band_cascade_roundtrip():
    c = fixtures.band_cascade()
    text = haar.serialize_cascade(c)
    assert haar.parse_cascade(text) == c
    assert haar.serialize_cascade(haar.parse_cascade(text)) == text


_real = st.floats(-1e6, 1e6, allow_nan=False, width=32)


@st.composite
def cascades(draw):
    win = draw(st.integers(4, 30))
    stages = []
    for _ in range(draw(st.integers(1, 3))):
        stumps = []
        for _ in range(draw(st.integers(1, 3))):
            rects = []
            for _ in range(draw(st.integers(2, 3))):
                x, y = draw(st.integers(0, win - 1)), draw(st.integers(0, win - 1))
                w, h = draw(st.integers(1, win - x)), draw(st.integers(1, win - y))
                rects.append(Rect(x, y, w, h, draw(_real.filter(lambda v: v != 0))))
            stumps.append(Stump(HaarFeature(tuple(rects)), draw(_real), draw(_real), draw(_real)))
        stages.append(Stage(tuple(stumps), draw(_real)))
    return Cascade(win, win, tuple(stages))


@given(c=cascades())
def test_parse_serialize_fixed_point(c):
    text = haar.serialize_cascade(c)
    back = haar.parse_cascade(text)
    assert back == c
    assert haar.serialize_cascade(back) == text
