"""``emocue`` command line: detect, classify, explain, recommend, pipeline, verify, train-toy, make-fixtures.

Machine output (JSON, CSV, images) goes to stdout or to the paths given;
diagnostics go to stderr. Exit codes: 0 ok, 1 verification failure,
2 I/O, 3 parse, 4 format, 5 argument.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff, fixtures, glyphs, gradcam, haar, imaging, net, recommend, verify
from .errors import DomainError, EmocueError

EXIT_OK, EXIT_VERIFY, EXIT_IO, EXIT_PARSE, EXIT_FORMAT, EXIT_ARGS = 0, 1, 2, 3, 4, 5


class UsageError(EmocueError):
    exit_code = EXIT_ARGS


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; this tool reserves 2 for I/O."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- helpers

def _emit(args, obj):
    sys.stdout.write(json.dumps(obj, indent=args.json_indent) + "\n")


def _read_text(path, what):
    try:
        return Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise imaging.ImageError(f"cannot read {what} {path}: {getattr(exc, 'strerror', None) or exc}") from None


def _load_cascade(path):
    return haar.parse_cascade(_read_text(path, "cascade"))


def _load_catalog(path):
    return recommend.load_catalog(_read_text(path, "catalog"))


def _load_model(weights_path, config_name):
    config = net.resolve_config(config_name)
    try:
        return net.load_weights(weights_path, config)
    except OSError as exc:
        raise imaging.ImageError(f"cannot read weights {weights_path}: {exc.strerror or exc}") from None


def _write(path, blob):
    try:
        imaging.write_bytes(path, blob)
    except OSError as exc:
        raise imaging.ImageError(f"cannot write {path}: {exc.strerror or exc}") from None


def _emotion(name):
    try:
        return net.EmotionLabel.parse(name)
    except DomainError as exc:
        raise UsageError(str(exc)) from None


def _check_class(value):
    if value is not None and not 0 <= value < net.NUM_CLASSES:
        raise UsageError(f"--class must lie in [0, {net.NUM_CLASSES - 1}], got {value}")
    return value


def _detect_kwargs(args):
    return {"scale_factor": args.scale_factor, "min_neighbors": args.min_neighbors, "step": args.step}


def _heat_overlay(model, frame, target, alpha):
    heat = gradcam.compute_gradcam(model, net.preprocess(frame), int(target))
    up = gradcam.upsample_bilinear(heat, *frame.shape)
    return heat, gradcam.overlay(frame, up, alpha)


# ---------------------------------------------------------------- commands

def cmd_detect(args):
    image = imaging.read_pgm(args.image)
    cascade = _load_cascade(args.cascade)
    dets = haar.detect_multiscale(image, cascade, **_detect_kwargs(args))
    _emit(args, [d.to_json() for d in dets])
    return EXIT_OK


def cmd_classify(args):
    image = imaging.read_pgm(args.image)
    model = _load_model(args.weights, args.config)
    _emit(args, net.classify(model, image).to_json())
    return EXIT_OK


def cmd_explain(args):
    _check_class(args.target_class)
    image = imaging.read_pgm(args.image)
    model = _load_model(args.weights, args.config)
    pred = net.classify(model, image)
    target = pred.label if args.target_class is None else net.EmotionLabel(args.target_class)
    heat, rgb = _heat_overlay(model, image, target, args.alpha)
    _write(args.out, imaging.encode_ppm(rgb))
    if args.raw_out:
        _write(args.raw_out, imaging.encode_pgm_ascii(gradcam.heatmap_to_gray(heat)))
    _emit(args, {"label": target.display, "heatmap_path": str(args.out)})
    return EXIT_OK


def cmd_recommend(args):
    emotion = _emotion(args.emotion)
    if args.count < 1:
        raise UsageError("--count must be positive")
    catalog = _load_catalog(args.catalog)
    playlist = recommend.recommend(catalog, emotion, args.count, args.seed)
    _emit(args, recommend.playlist_json(catalog, playlist))
    return EXIT_OK


class StageError(EmocueError):
    def __init__(self, stage, exc):
        super().__init__(f"pipeline stage '{stage}' failed: {exc}")
        self.exit_code = getattr(exc, "exit_code", EXIT_IO)


def cmd_pipeline(args):
    if args.count < 1:
        raise UsageError("--count must be positive")
    out_dir = Path(args.out_dir)
    written = []

    def write(name, blob):
        path = out_dir / name
        _write(path, blob)
        written.append(path)
        return path

    stage = "load"
    try:
        frame = imaging.read_pgm(args.image)
        model = _load_model(args.weights, args.config)
        cascade = _load_cascade(args.eye_cascade)
        catalog = _load_catalog(args.catalog)
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise imaging.ImageError(f"cannot create {out_dir}: {exc.strerror or exc}") from None

        stage = "detect"
        crops, dets = haar.extract_eye_rois(frame, cascade, (48, 48), **_detect_kwargs(args))

        stage = "classify"
        if crops:
            pred = net.classify_eyes(model, crops)
            for i, crop in enumerate(crops):
                write(f"eye_{i}.pgm", imaging.encode_pgm(crop))
        else:
            pred = net.classify(model, frame)
        label = recommend.map_prediction(pred)

        stage = "explain"
        _, rgb = _heat_overlay(model, frame, label, args.alpha)
        heat_path = write("heatmap.ppm", imaging.encode_ppm(rgb))

        stage = "recommend"
        playlist = recommend.recommend(catalog, label, args.count, args.seed)
    except (EmocueError, OSError, ValueError) as exc:
        for path in written:
            path.unlink(missing_ok=True)
        raise StageError(stage, exc) from exc

    report = {
        "input": str(args.image),
        "detections": [d.to_json() for d in dets],
        "roi_used": "EYES" if crops else "FULL_FRAME",
        "probabilities": pred.to_json()["probabilities"],
        "label": pred.label.display,
        "playlist": recommend.playlist_json(catalog, playlist),
        "heatmap_path": str(heat_path),
    }
    _emit(args, report)
    return EXIT_OK


def cmd_verify(args):
    only = None
    if args.only:
        only = [s.strip() for s in args.only.split(",") if s.strip()]
        unknown = [s for s in only if s not in verify.SUITES]
        if unknown:
            raise UsageError(f"unknown suite(s) {', '.join(unknown)}; choose from {', '.join(verify.SUITES)}")
    checks = verify.run(only)
    print(verify.format_table(checks))
    failed = [c for c in checks if not c.passed]
    for c in failed:
        print(f"failed: {c.suite}: {c.name}", file=sys.stderr)
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_train_toy(args):
    if args.epochs < 0:
        raise UsageError("--epochs must be nonnegative")
    config = net.resolve_config(args.config)
    train, test = glyphs.train_test_split(args.seed)
    model = net.build_model(config, args.seed)
    history = []
    if args.epochs > 0:
        cfg = autodiff.TrainConfig(args.lr, args.epochs, args.batch_size, args.seed)
        model, history = autodiff.train_toy(model, train, cfg)
    _write(args.out, net.encode_weights(model.params))
    loss_path = Path(args.loss_csv) if args.loss_csv else Path(args.out).with_suffix(".losses.csv")
    _write(loss_path, autodiff.losses_csv(history).encode())
    _emit(args, {
        "config": config.name,
        "epochs": args.epochs,
        "train_accuracy": autodiff.accuracy(model, train),
        "test_accuracy": autodiff.accuracy(model, test),
        "final_loss": history[-1] if history else None,
        "weights_path": str(args.out),
        "loss_csv": str(loss_path),
    })
    return EXIT_OK


def cmd_make_fixtures(args):
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise imaging.ImageError(f"cannot create {out}: {exc.strerror or exc}") from None
    files = {}

    def put(name, blob):
        _write(out / name, blob)
        files[name] = str(out / name)

    put("band_cascade.xml", haar.serialize_cascade(fixtures.band_cascade()).encode())
    put("rejecting_cascade.xml", haar.serialize_cascade(fixtures.rejecting_cascade()).encode())
    put("catalog.csv", recommend.bundled_catalog_text().encode())
    frame, _ = fixtures.planted_image(80, 60, [(31, 22)], seed=args.seed)
    put("planted.pgm", imaging.encode_pgm(frame))
    put("two_eye.pgm", imaging.encode_pgm(fixtures.two_eye_frame(args.seed)[0]))
    gray = np.full((48, 48), 128, dtype=np.uint8)
    put("gray.pgm", imaging.encode_pgm(gray))
    bright_top = gray.copy()
    bright_top[:24], bright_top[24:] = 230, 20
    put("bright_top.pgm", imaging.encode_pgm(bright_top))
    put("zero_fernet9.femr", net.encode_weights(fixtures.zero_head_model(seed=args.seed).params))
    for name, model in (("happy", fixtures.happy_model()), ("quadrant", fixtures.quadrant_model(0))):
        put(f"{name}.json", (json.dumps(model.config.to_json(), indent=2) + "\n").encode())
        put(f"{name}.femr", net.encode_weights(model.params))
    _emit(args, files)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _common():
    # shared by the top-level parser and every subcommand, so global flags work in either position
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="RNG seed (default 0)")
    p.add_argument("--json-indent", type=int, default=argparse.SUPPRESS, help="JSON indent (default 2)")
    return p


def _detection_flags(p):
    p.add_argument("--scale-factor", type=float, default=haar.SCALE_FACTOR)
    p.add_argument("--min-neighbors", type=int, default=haar.MIN_NEIGHBORS)
    p.add_argument("--step", type=int, default=haar.STEP)


def build_parser():
    common = _common()
    parser = _Parser(prog="emocue", description="Facial-emotion to music pipeline.", parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("detect", parents=[common], help="Haar cascade detection on a PGM image")
    p.add_argument("image")
    p.add_argument("cascade")
    _detection_flags(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("classify", parents=[common], help="classify a PGM image")
    p.add_argument("image")
    p.add_argument("weights")
    p.add_argument("--config", default="fernet9", help="named config or .json file (default fernet9)")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("explain", parents=[common], help="Grad-CAM overlay for a PGM image")
    p.add_argument("image")
    p.add_argument("weights")
    p.add_argument("out", help="output PPM (P6) overlay")
    p.add_argument("--config", default="fernet9")
    p.add_argument("--class", dest="target_class", type=int, default=None, help="target class index 0-6")
    p.add_argument("--alpha", type=float, default=0.4)
    p.add_argument("--raw-out", default=None, help="also write the raw heatmap as ASCII PGM (P2)")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("recommend", parents=[common], help="seeded playlist for an emotion")
    p.add_argument("catalog")
    p.add_argument("--emotion", required=True)
    p.add_argument("--count", type=int, default=20)
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("pipeline", parents=[common], help="detect, classify, explain and recommend")
    p.add_argument("image")
    p.add_argument("weights")
    p.add_argument("eye_cascade")
    p.add_argument("catalog")
    p.add_argument("out_dir")
    p.add_argument("--config", default="fernet9")
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--alpha", type=float, default=0.4)
    _detection_flags(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("verify", parents=[common], help="run the self-check suites")
    p.add_argument("--only", default=None, help=f"comma-separated subset of: {', '.join(verify.SUITES)}")
    p.set_defaults(func=cmd_verify)

    defaults = autodiff.TrainConfig()
    p = sub.add_parser("train-toy", parents=[common], help="train on the synthetic 7-glyph dataset")
    p.add_argument("out", help="output weights file")
    p.add_argument("--config", default="fernet9")
    p.add_argument("--epochs", type=int, default=defaults.epochs)
    p.add_argument("--lr", type=float, default=defaults.learning_rate)
    p.add_argument("--batch-size", type=int, default=defaults.batch_size)
    p.add_argument("--loss-csv", default=None, help="default: <out>.losses.csv")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("make-fixtures", parents=[common], help="write fixture weights, cascades and images")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_make_fixtures)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        args.seed = getattr(args, "seed", 0)
        args.json_indent = getattr(args, "json_indent", 2)
        return args.func(args)
    except EmocueError as exc:
        print(f"emocue: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"emocue: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
