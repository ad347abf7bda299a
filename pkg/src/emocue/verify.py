"""Self-contained verification suites behind ``emocue verify``.

Every check compares the production path against an independently written
reference (plain loops, direct pixel sums, finite differences) on seeded
random fixtures, and reports the measured error next to its tolerance.
"""

import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff, fixtures, gradcam, haar, net, recommend
from . import tensor_core as tc
from .net import Arch, Conv, Dense, Flatten, GlobalAvgPool, MaxPool, NetworkConfig, ReLU, Residual, Softmax


@dataclass
class Check:
    suite: str
    name: str
    passed: bool
    measured: float
    tolerance: str
    seconds: float = 0.0


def _rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


# ---------------------------------------------------------------- naive references

def naive_conv2d(x, k, b, stride, pad):
    c_in, h, w = x.shape
    c_out, _, kh, kw = k.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((c_out, oh, ow))
    for o in range(c_out):
        for y in range(oh):
            for xx in range(ow):
                acc = float(b[o])
                for c in range(c_in):
                    for i in range(kh):
                        for j in range(kw):
                            yy, xi = y * stride + i - pad, xx * stride + j - pad
                            if 0 <= yy < h and 0 <= xi < w:
                                acc += float(x[c, yy, xi]) * float(k[o, c, i, j])
                out[o, y, xx] = acc
    return out


def naive_maxpool(x, window, stride):
    c, h, w = x.shape
    oh, ow = (h - window) // stride + 1, (w - window) // stride + 1
    out = np.zeros((c, oh, ow), dtype=x.dtype)
    for ch in range(c):
        for y in range(oh):
            for xx in range(ow):
                best = -math.inf
                for i in range(window):
                    for j in range(window):
                        best = max(best, x[ch, y * stride + i, xx * stride + j])
                out[ch, y, xx] = best
    return out


def naive_dense(x, wts, b):
    return np.array([float(b[m]) + sum(float(wts[m, n]) * float(x[n]) for n in range(len(x)))
                     for m in range(wts.shape[0])])


def direct_rect_sum(img, x, y, w, h):
    return int(img[y:y + h, x:x + w].astype(np.int64).sum())


def unstaged_cascade(img, cascade, ox, oy):
    """Evaluate every stage on one scale-1 window from raw pixels and require all to pass."""
    win = img[oy:oy + cascade.height, ox:ox + cascade.width].astype(np.int64)
    area = win.size
    s, q = int(win.sum()), int((win * win).sum())
    var = (q * area - s * s) / float(area * area)
    norm = area * (math.sqrt(var) if var > 0 else 1.0)
    verdicts = []
    for stage in cascade.stages:
        total = 0.0
        for stump in stage.stumps:
            v = sum(r.weight * direct_rect_sum(win, r.x, r.y, r.w, r.h) for r in stump.feature.rects) / norm
            total += stump.left if v < stump.threshold else stump.right
        verdicts.append(total >= stage.threshold)
    return all(verdicts)


# ---------------------------------------------------------------- fixtures

def kink_free(rng, shape, gap=0.02):
    """Distinct values at least ``gap`` apart and away from zero, randomly arranged."""
    n = math.prod(shape)
    vals = (np.arange(n) - n / 2 + 0.5) * gap
    return rng.permutation(vals).reshape(shape)


def toy_two_conv_config():
    return NetworkConfig([Conv(3, 1, stride=2), ReLU(), Conv(4, 3, stride=2), ReLU(), MaxPool(2, 2),
                          Flatten(), Dense(4 * 6 * 6, 7), Softmax()], Arch.CUSTOM, name="toy2conv")


def linear_config():
    return NetworkConfig([Flatten(), Dense(48 * 48, 7), Softmax()], Arch.CUSTOM, name="linear")


def synthetic_cascade(seed=0, window=24, stages=3, stumps=3):
    rng = _rng(seed)
    out = []
    for _ in range(stages):
        st = []
        for _ in range(stumps):
            w = int(rng.integers(4, window // 2 + 1)) * 2
            h = int(rng.integers(2, window + 1))
            x = int(rng.integers(0, window - w + 1))
            y = int(rng.integers(0, window - h + 1))
            if rng.random() < 0.5:
                rects = (haar.Rect(x, y, w, h, -1.0), haar.Rect(x + w // 2, y, w // 2, h, 2.0))
            else:
                third = w // 2
                rects = (haar.Rect(x, y, w, h, -1.0), haar.Rect(x + third // 2, y, third, h, 2.0))
            thr = float(np.float32(rng.normal(0, 0.05)))
            st.append(haar.Stump(haar.HaarFeature(rects), thr, -1.0, 1.0))
        out.append(haar.Stage(tuple(st), 0.0))
    return haar.Cascade(window, window, tuple(out))


# ---------------------------------------------------------------- suites

def suite_gradcheck():
    rng = _rng(1)
    h = 1e-3
    checks = []
    dtype = np.float64
    conv = Conv(4, 3, kernel=3, stride=2, padding=1)
    layers = {
        "conv2d": (conv, {"weight": rng.normal(size=conv.spec.kernel_shape),
                          "bias": rng.normal(size=4)}, rng.normal(size=(2, 3, 7, 7))),
        "maxpool2d": (MaxPool(2, 2), {}, kink_free(rng, (2, 3, 6, 6))),
        "relu": (ReLU(), {}, kink_free(rng, (2, 3, 4, 4))),
        "dense": (Dense(11, 5), {"weight": rng.normal(size=(5, 11)), "bias": rng.normal(size=5)},
                  rng.normal(size=(2, 11))),
        "global_avg_pool": (GlobalAvgPool(), {}, rng.normal(size=(2, 4, 5, 5))),
    }
    res = Residual(3)
    res_params = {"conv1.weight": 0.3 * rng.normal(size=res.spec.kernel_shape), "conv1.bias": 0.5 + rng.random(3),
                  "conv2.weight": 0.3 * rng.normal(size=res.spec.kernel_shape), "conv2.bias": 0.5 + rng.random(3)}
    layers["residual_block"] = (res, res_params, 1.0 + rng.random((1, 3, 5, 5)))
    for name, (layer, params, x) in layers.items():
        t0 = time.perf_counter()
        err = autodiff.layer_grad_check(layer, params, x.astype(dtype), h=h)
        checks.append(Check("gradcheck", f"layer {name}", err <= 1e-3, err, "<= 1e-3", time.perf_counter() - t0))

    x = rng.random((1, 48, 48)).astype(np.float32)
    for label, cfg, budget in (("linear model", linear_config(), 400),
                               ("toy 2-conv model", toy_two_conv_config(), None),
                               ("FERNET9 model", net.fernet9_config(), 400),
                               ("RESNET_MINI model", net.resnet_mini_config(), 400)):
        t0 = time.perf_counter()
        model = net.build_model(cfg, seed=3)
        tol = 1e-6 if label == "linear model" else 1e-3
        rep = autodiff.grad_check_report(model, x, 4, h=h, max_scalars=budget)
        ok = rep.max_error <= tol and rep.checked >= min(200, cfg.param_count())
        checks.append(Check("gradcheck", f"{label} ({rep.checked} scalars)", ok, rep.max_error,
                            f"<= {tol:g}", time.perf_counter() - t0))
    return checks


def suite_kernels(instances=100):
    rng = _rng(2)
    worst = {"conv2d": 0.0, "maxpool2d": 0.0, "dense": 0.0}
    t0 = time.perf_counter()
    for _ in range(instances):
        c, o = int(rng.integers(1, 4)), int(rng.integers(1, 5))
        k, s, p = int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(0, 2))
        hh, ww = int(rng.integers(k, 9)), int(rng.integers(k, 9))
        x = rng.normal(size=(c, hh, ww)).astype(np.float32)
        kern = rng.normal(size=(o, c, k, k)).astype(np.float32)
        b = rng.normal(size=o).astype(np.float32)
        got = tc.conv2d(x, kern, b, tc.ConvSpec(o, c, k, k, s, p))
        worst["conv2d"] = max(worst["conv2d"], float(np.abs(got - naive_conv2d(x, kern, b, s, p)).max()))

        win, st = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        x = rng.normal(size=(c, int(rng.integers(win, 10)), int(rng.integers(win, 10)))).astype(np.float32)
        worst["maxpool2d"] = max(worst["maxpool2d"],
                                 float(np.abs(tc.maxpool2d(x, win, st) - naive_maxpool(x, win, st)).max()))

        m, n = int(rng.integers(1, 9)), int(rng.integers(1, 17))
        x = rng.normal(size=n).astype(np.float32)
        wts = rng.normal(size=(m, n)).astype(np.float32)
        b = rng.normal(size=m).astype(np.float32)
        worst["dense"] = max(worst["dense"], float(np.abs(tc.dense(x, wts, b) - naive_dense(x, wts, b)).max()))
    secs = time.perf_counter() - t0
    checks = [Check("kernels", f"{k} x{instances} vs loop oracle", v <= 1e-5, v, "<= 1e-5 abs") for k, v in worst.items()]
    checks.append(Check("kernels", "kernel oracle runtime", secs < 10, secs, "< 10 s", secs))
    return checks


def suite_softmax(n=10_000):
    rng = _rng(3)
    scale = rng.choice([1.0, 10.0, 80.0], size=(n, 1))
    logits = rng.uniform(-1, 1, size=(n, 7)) * scale
    probs = tc.softmax(logits, axis=1)
    err = float(np.abs(probs.sum(axis=1) - 1).max())
    ok = err <= 1e-6 and bool(np.all(probs > 0)) and bool(np.all(np.isfinite(probs)))
    return [Check("softmax", f"{n} vectors sum to 1, |logit| <= 80", ok, err, "<= 1e-6")]


def suite_integral(n=1000):
    rng = _rng(4)
    bad = 0
    for trial in range(n):
        if trial % 100 == 0:
            img = rng.integers(0, 256, size=(32, 32)).astype(np.uint8)
            ii = haar.integral(img)
        x, y = int(rng.integers(0, 32)), int(rng.integers(0, 32))
        w, h = int(rng.integers(1, 33 - x)), int(rng.integers(1, 33 - y))
        bad += ii.rect_sum(x, y, w, h) != direct_rect_sum(img, x, y, w, h)
        sq = int((img[y:y + h, x:x + w].astype(np.int64) ** 2).sum())
        bad += ii.rect_sum(x, y, w, h, squared=True) != sq
    return [Check("integral", f"{n} random rectangles exact", bad == 0, float(bad), "== 0 mismatches")]


def suite_cascade(n=500):
    rng = _rng(5)
    cascade = synthetic_cascade(seed=5)
    img = rng.integers(0, 256, size=(64, 64)).astype(np.uint8)
    ii = haar.integral(img)
    disagree, accepted = 0, 0
    for _ in range(n):
        ox, oy = int(rng.integers(0, 64 - 24 + 1)), int(rng.integers(0, 64 - 24 + 1))
        staged = haar.run_cascade(ii, cascade, (ox, oy), 1.0)
        disagree += staged != unstaged_cascade(img, cascade, ox, oy)
        accepted += staged
    checks = [Check("cascade", f"staged vs unstaged, {n} windows ({accepted} accepted)",
                    disagree == 0 and 0 < accepted < n, float(disagree), "== 0 disagreements")]
    frame, boxes = fixtures.planted_image(80, 60, [(31, 22)], seed=5)
    dets = haar.detect_multiscale(frame, fixtures.band_cascade())
    best = max((fixtures.iou(d.box, boxes[0]) for d in dets), default=0.0)
    checks.append(Check("cascade", f"planted band detection ({len(dets)} found)", len(dets) == 1 and best >= 0.5,
                        best, ">= 0.5 IoU"))
    return checks


def suite_shuffle(seeds=10_000):
    items = ["a", "b", "c", "d", "e"]
    firsts = {k: 0 for k in items}
    for seed in range(seeds):
        firsts[recommend.fisher_yates(items, _rng(seed))[0]] += 1
    freqs = [v / seeds for v in firsts.values()]
    ok = all(0.15 <= f <= 0.25 for f in freqs)
    return [Check("shuffle", f"first-position frequency over {seeds} seeds", ok, max(abs(f - 0.2) for f in freqs),
                  "each in [0.15, 0.25]")]


def suite_gradcam():
    rng = _rng(6)
    checks = []
    worst_mass = 1.0
    for quadrant in range(4):
        model = fixtures.quadrant_model(quadrant)
        for _ in range(5):
            x = rng.uniform(0.05, 1.0, size=(1, 48, 48)).astype(np.float32)
            heat = gradcam.compute_gradcam(model, x, net.EmotionLabel.HAPPY)
            mask = fixtures.quadrant_mask(quadrant, heat.shape[0])
            worst_mass = min(worst_mass, float((heat * mask).sum() / heat.sum()))
    checks.append(Check("gradcam", "quadrant localization mass", worst_mass >= 0.9, worst_mass, ">= 0.9"))

    model = net.build_model(net.fernet9_config(), seed=6)
    x = rng.random((1, 48, 48)).astype(np.float32)
    base = gradcam.compute_gradcam(model, x, 3)
    params = dict(model.params)
    params["24_dense.bias"] = params["24_dense.bias"] + np.float32(3.25)
    shifted = gradcam.compute_gradcam(model.with_params(params), x, 3)
    checks.append(Check("gradcam", "bit-invariant under output-bias shift", bool(np.array_equal(base, shifted)),
                        float(np.abs(base - shifted).max()), "== 0"))
    ok = bool(base.min() >= 0 and base.max() <= 1 and (base.max() == 1.0 or not base.any()))
    checks.append(Check("gradcam", "values in [0, 1], max exactly 1", ok, float(base.max()), "max == 1"))
    return checks


def suite_roundtrip():
    checks = []
    with tempfile.TemporaryDirectory() as tmp:
        model = net.build_model(net.fernet9_config(), seed=7)
        path = Path(tmp) / "m.femr"
        net.save_weights(model, path)
        back = net.load_weights(path, net.fernet9_config())
        same = list(back.params) == list(model.params) and all(
            np.array_equal(back.params[k].view(np.uint32), v.view(np.uint32)) for k, v in model.params.items())
        checks.append(Check("roundtrip", "weights save/load bit-exact", same, 0.0 if same else 1.0, "identical"))

    cascade = synthetic_cascade(seed=7)
    text = haar.serialize_cascade(cascade)
    again = haar.parse_cascade(text)
    ok = again == cascade and haar.serialize_cascade(again) == text
    checks.append(Check("roundtrip", "cascade parse/serialize fixed point", ok, 0.0 if ok else 1.0, "identical"))

    catalog = recommend.load_catalog(recommend.bundled_catalog_text())
    again = recommend.load_catalog(recommend.serialize_catalog(catalog))
    ok = again.songs == catalog.songs and len(catalog.songs) == 146
    checks.append(Check("roundtrip", "catalog CSV load/serialize identity", ok, 0.0 if ok else 1.0, "identical"))
    return checks


SUITES = {
    "gradcheck": suite_gradcheck,
    "kernels": suite_kernels,
    "softmax": suite_softmax,
    "integral": suite_integral,
    "cascade": suite_cascade,
    "shuffle": suite_shuffle,
    "gradcam": suite_gradcam,
    "roundtrip": suite_roundtrip,
}


def run(only=None):
    names = list(SUITES) if not only else list(only)
    checks = []
    for name in names:
        t0 = time.perf_counter()
        got = SUITES[name]()
        elapsed = time.perf_counter() - t0
        for c in got:
            c.seconds = c.seconds or elapsed / len(got)
        checks.extend(got)
    return checks


def format_table(checks):
    width = max(len(c.name) for c in checks) + 2
    lines = [f"{'':4} {'suite':<10} {'check':<{width}} {'measured':>12}  tolerance"]
    for c in checks:
        mark = "PASS" if c.passed else "FAIL"
        lines.append(f"{mark:4} {c.suite:<10} {c.name:<{width}} {c.measured:>12.3g}  {c.tolerance}")
    failed = [c for c in checks if not c.passed]
    lines.append(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return "\n".join(lines)
