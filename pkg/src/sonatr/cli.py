"""Command-line entry point: ``sonatr <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data or format error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import benchmark as bm
from . import detector as dt
from . import network as nw
from . import noise
from . import svm
from . import synthgen as sg
from . import weights_io as wio
from .errors import SonatrError

log = logging.getLogger("sonatr")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
DETECT_COLUMNS = ("origin_x", "origin_y", "size", "class", "score")
REGION_COLUMNS = ("class", "x0", "y0", "x1", "y1", "score")
TRUTH_COLUMNS = ("class", "x0", "y0", "x1", "y1")
CALIBRATE_COLUMNS = ("tau", "detections", "tp", "fp", "fn", "precision", "recall")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- file helpers ------------------------------------------------------------

def _need(path, flag: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{flag}: file not found: {p}")
    return p


def read_manifest(path) -> sg.LabeledChipSet:
    """Chip set from a ``path,label`` CSV; paths are relative to the manifest."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or set(rows[0]) < {"path", "label"}:
        raise wio.FormatError(f"{path}: manifest needs a header with 'path' and 'label' columns")
    names = []
    for r in rows:
        if r["label"] not in names:
            names.append(r["label"])
    order = [c for c in sg.CLASS_NAMES if c in names] + [c for c in names if c not in sg.CLASS_NAMES]
    images = [wio.read_image(_need(path.parent / r["path"], str(path))) for r in rows]
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise wio.FormatError(f"{path}: chips have differing shapes {sorted(shapes)}")
    labels = np.array([order.index(r["label"]) for r in rows], dtype=np.intp)
    return sg.LabeledChipSet(np.array(images), labels, tuple(order))


def write_manifest(out_dir: Path, dataset: sg.LabeledChipSet, fmt: str) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (img, lab) in enumerate(zip(dataset.images, dataset.labels)):
        name = f"chip_{i:05d}.{fmt}"
        wio.write_image(out_dir / name, img)
        rows.append({"path": name, "label": dataset.class_names[lab]})
    manifest = out_dir / "manifest.csv"
    wio.write_results_csv(manifest, rows, ("path", "label"))
    return manifest


def read_features(path) -> svm.FeatureSet:
    with open(_need(path, "--features"), newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        rows = list(reader)
    if not header or header[0] != "label" or not rows:
        raise wio.FormatError(f"{path}: feature CSV needs a 'label,f0,...' header and at least one row")
    names = []
    for r in rows:
        if r[0] not in names:
            names.append(r[0])
    order = [c for c in sg.CLASS_NAMES if c in names] + [c for c in names if c not in sg.CLASS_NAMES]
    try:
        vectors = np.array([[float(v) for v in r[1:]] for r in rows])
    except ValueError as exc:
        raise wio.FormatError(f"{path}: non-numeric feature value ({exc})") from exc
    return svm.FeatureSet(vectors, [order.index(r[0]) for r in rows], order)


def _parse_targets(text: str) -> tuple[sg.PlacedTarget, ...]:
    """``cls:x:y[:orientation[:scale]]`` items separated by commas."""
    out = []
    for item in filter(None, text.split(",")):
        parts = item.split(":")
        if len(parts) < 3 or parts[0] not in sg.CLASS_NAMES:
            raise UsageError(f"--targets: bad item {item!r}; expected class:x:y[:orientation[:scale]]")
        try:
            vals = [float(v) for v in parts[1:]]
        except ValueError:
            raise UsageError(f"--targets: non-numeric value in {item!r}") from None
        out.append(sg.PlacedTarget(parts[0], *vals))
    return tuple(out)


def _load_pipeline(args):
    net = wio.load_model(_need(args.model, "--model"))
    model = wio.load_svm(_need(args.svm, "--svm"))
    return net, model


# -- commands ----------------------------------------------------------------

def cmd_gen_data(args):
    config = sg.DatasetConfig(jitter=args.jitter, speckle_sigma=args.speckle, clutter_density=args.clutter)
    dataset = sg.generate_dataset(args.per_class, args.seed, config)
    manifest = write_manifest(Path(args.out), dataset, args.format)
    print(manifest)


def cmd_gen_scene(args):
    if args.targets is None:
        spec = sg.standard_scene_spec(args.seed)
    else:
        spec = sg.SceneSpec(args.width, args.height, _parse_targets(args.targets),
                            args.clutter, args.speckle, args.seed)
    scene, truths = sg.generate_scene(spec)
    wio.write_image(args.out, scene)
    if args.truth:
        rows = [dict(zip(TRUTH_COLUMNS, (t.cls, *t.box))) for t in truths]
        wio.write_results_csv(args.truth, rows, TRUTH_COLUMNS)


def _train_config(args, base: nw.FineTuneConfig) -> nw.FineTuneConfig:
    """``base`` with every hyperparameter flag the user gave applied on top."""
    given = {"learning_rate": args.lr, "momentum": args.momentum, "epochs": args.epochs,
             "batch_size": args.batch_size, "seed": args.seed, "freeze_depth": args.freeze_depth}
    return replace(base, **{k: v for k, v in given.items() if v is not None})


def cmd_fine_tune(args):
    if args.pretrain_base:
        net = bm.pretrain_base(config=_train_config(args, bm.PRETRAIN_CONFIG))
    else:
        config = _train_config(args, nw.FineTuneConfig())
        if not args.data:
            raise UsageError("--data is required unless --pretrain-base is given")
        data = read_manifest(_need(args.data, "--data"))
        if args.model:
            net = nw.replace_head(wio.load_model(_need(args.model, "--model")), data.class_names, seed=config.seed)
        else:
            net = nw.Network.initialize(nw.mini_cnn_spec(data.class_names), seed=config.seed)
        net, history = nw.fine_tune(net, data, config)
        for epoch, loss in enumerate(history):
            log.info("epoch %d loss %.6f", epoch, loss)
    wio.save_model(net, args.out)


def cmd_extract_features(args):
    net = wio.load_model(_need(args.model, "--model"))
    data = read_manifest(_need(args.data, "--data"))
    feats = nw.extract_features_batch(net, data.images, tap=args.tap)
    columns = ["label"] + [f"f{i}" for i in range(feats.shape[1])]
    rows = [{"label": data.class_names[lab], **{f"f{i}": float(v) for i, v in enumerate(f)}}
            for f, lab in zip(feats, data.labels)]
    wio.write_results_csv(args.out, rows, columns)


def cmd_train_svm(args):
    model = svm.train(read_features(args.features), C=args.C, seed=args.seed)
    for w in model.warnings:
        print(f"warning: {w}", file=sys.stderr)
    wio.save_svm(model, args.out)


def cmd_classify(args):
    net, model = _load_pipeline(args)
    chip = wio.read_image(_need(args.chip, "--chip"))[None]  # single grayscale channel
    name, score = svm.classify(model, nw.extract_features(net, chip))
    print(f"{name},{score:.6f}")


def cmd_corrupt(args):
    if (args.psnr is None) == (args.sigma is None):
        raise UsageError("give exactly one of --psnr and --sigma")
    src = _need(args.input, "--in")
    img = wio.read_pgm(src) if src.suffix.lower() == ".pgm" else wio.read_sasr(src)
    out, achieved, sigma = noise.corrupt_rayleigh(img, noise.NoiseConfig(args.psnr, args.sigma, args.seed))
    if Path(args.out).suffix.lower() == ".pgm":
        wio.write_pgm(args.out, out if out.dtype == np.uint8 else wio.to_uint8(out))
    else:
        wio.write_sasr(args.out, out)
    print(f"psnr_db,sigma\n{achieved:.6f},{sigma:.6f}")


def _scan(args):
    net, model = _load_pipeline(args)
    scene = wio.read_image(_need(args.scene, "--scene"))
    grid = dt.build_grid(scene.shape[1], scene.shape[0], args.patch, args.stride)
    return scene, net, model, grid


def cmd_detect(args):
    scene, net, model, grid = _scan(args)
    report = dt.scan(scene, net, model, grid, args.tau, scene_id=str(args.scene), merge=bool(args.merge))
    rows = [dict(zip(DETECT_COLUMNS, (d.x, d.y, d.size, d.cls, d.score))) for d in report.detections]
    wio.write_results_csv(args.out, rows, DETECT_COLUMNS)
    if args.merge:
        rows = [dict(zip(REGION_COLUMNS, (r.cls, *r.box, r.score))) for r in report.regions]
        wio.write_results_csv(args.merge, rows, REGION_COLUMNS)
    if args.overlay:
        wio.write_pgm(args.overlay, wio.to_uint8(dt.overlay(scene, report)))
    print(f"{len(report.detections)} flagged patches of {len(grid)}")


def read_truth(path) -> list[sg.Truth]:
    with open(_need(path, "--truth"), newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    try:
        return [sg.Truth(r["class"], tuple(int(r[c]) for c in TRUTH_COLUMNS[1:])) for r in rows]
    except (KeyError, ValueError) as exc:
        raise wio.FormatError(f"{path}: truth CSV needs columns {','.join(TRUTH_COLUMNS)} ({exc})") from exc


def cmd_calibrate(args):
    scene, net, model, grid = _scan(args)
    truths = read_truth(args.truth)
    taus = np.round(np.arange(args.tau_min, args.tau_max + 1e-9, args.tau_step), 6)
    if len(taus) == 0:
        raise UsageError("--tau-min must not exceed --tau-max")
    raw = dt.score_patches(scene, net, model, grid)
    best, rows = dt.calibrate_tau(raw, grid, model.class_names, truths, taus)
    if args.out:
        wio.write_results_csv(args.out, rows, CALIBRATE_COLUMNS)
    print(f"tau,{best:.6f}")


def cmd_benchmark(args):
    data = read_manifest(_need(args.data, "--data")) if args.data else sg.standard_dataset(args.per_class)
    methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    try:
        config = bm.BenchmarkConfig(args.trials, args.train_per_class, args.test_per_class, methods, args.seed, args.C)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    base = None
    if {"cnn_svm", "finetuned_cnn"} & set(methods):
        base = wio.load_model(_need(args.model, "--model")) if args.model else bm.pretrain_base()
    result = bm.run_benchmark(data, base, config)
    wio.write_results_csv(args.out, result.rows, bm.CSV_COLUMNS)
    for m in methods:
        p, r = result.summary(m)
        print(f"{m},{wio._fmt(p)},{wio._fmt(r)}")


def cmd_dump_activations(args):
    net = wio.load_model(_need(args.model, "--model"))
    chip = wio.read_image(_need(args.chip, "--chip"))[None]  # single grayscale channel
    try:
        layers = [int(v) for v in args.layers.split(",")]
    except ValueError:
        raise UsageError(f"--layers: expected comma-separated integers, got {args.layers!r}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for idx, chans in nw.dump_activations(net, chip, layers).items():
        for c, img in enumerate(chans):
            wio.write_pgm(out / f"layer{idx:02d}_ch{c:03d}.pgm", img)


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sonatr", description="Sonar target recognition toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, fn, help_text, seed_default=0, seed_help=None):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--seed", type=int, default=seed_default,
                        help=seed_help or f"random seed (default {seed_default})")
        sp.set_defaults(func=fn)
        return sp

    sp = command("gen-data", cmd_gen_data, "Generate a labeled synthetic chip set.", sg.STANDARD_DATASET_SEED)
    sp.add_argument("--out", required=True, help="output directory (chips plus manifest.csv)")
    sp.add_argument("--per-class", type=int, default=60, help="chips per class (default 60)")
    sp.add_argument("--jitter", type=float, default=4.0, help="max positional jitter in pixels")
    sp.add_argument("--speckle", type=float, default=0.6, help="background speckle sigma")
    sp.add_argument("--clutter", type=float, default=1.0, help="clutter blobs per 1000 pixels")
    sp.add_argument("--format", choices=("sasr", "pgm"), default="sasr", help="chip file format")

    sp = command("gen-scene", cmd_gen_scene, "Render a synthetic scene and its ground truth.",
                 sg.STANDARD_SCENE_SEED)
    sp.add_argument("--out", required=True, help="scene raster (.sasr or .pgm)")
    sp.add_argument("--truth", help="ground-truth CSV (class,x0,y0,x1,y1)")
    sp.add_argument("--targets", help="class:x:y[:orientation[:scale]],... (default: standard two-target scene)")
    sp.add_argument("--width", type=int, default=352, help="scene width with --targets")
    sp.add_argument("--height", type=int, default=192, help="scene height with --targets")
    sp.add_argument("--clutter", type=float, default=1.0, help="clutter blobs per 1000 pixels")
    sp.add_argument("--speckle", type=float, default=0.6, help="background speckle sigma")

    sp = command("fine-tune", cmd_fine_tune, "Train or fine-tune the mini-CNN with SGD.", None,
                 "seed for head initialization and example order (default 0)")
    sp.add_argument("--data", help="chip manifest CSV (path,label)")
    sp.add_argument("--model", help="starting network; its head is replaced (default: fresh mini-CNN)")
    sp.add_argument("--out", required=True, help="output network (.satr)")
    sp.add_argument("--pretrain-base", action="store_true",
                    help="ignore --data and train the synthetic base network used by benchmark; "
                         "unset hyperparameters take the pretraining recipe instead of the defaults below")
    sp.add_argument("--epochs", type=int, help="training epochs (default 30)")
    sp.add_argument("--lr", type=float, help="learning rate (default 0.01)")
    sp.add_argument("--momentum", type=float, help="momentum (default 0.9)")
    sp.add_argument("--batch-size", type=int, help="mini-batch size (default 8)")
    sp.add_argument("--freeze-depth", type=int, help="layers below this index are frozen (default 0)")

    sp = command("extract-features", cmd_extract_features, "Write penultimate-layer features to CSV.")
    sp.add_argument("--data", required=True, help="chip manifest CSV")
    sp.add_argument("--model", required=True, help="network (.satr)")
    sp.add_argument("--out", required=True, help="feature CSV (label,f0,...)")
    sp.add_argument("--tap", type=int, help="layer index to read features from (default: penultimate)")

    sp = command("train-svm", cmd_train_svm, "Train the one-vs-rest linear SVM.")
    sp.add_argument("--features", required=True, help="feature CSV from extract-features")
    sp.add_argument("--out", required=True, help="output SVM (.ssvm)")
    sp.add_argument("--C", type=float, default=1.0, help="regularization constant (default 1.0)")

    sp = command("classify", cmd_classify, "Classify one chip; prints class,score.")
    sp.add_argument("--chip", required=True, help="chip raster")
    sp.add_argument("--model", required=True, help="network (.satr)")
    sp.add_argument("--svm", required=True, help="SVM (.ssvm)")

    sp = command("corrupt", cmd_corrupt, "Apply Rayleigh speckle at a target PSNR or sigma.")
    sp.add_argument("--in", dest="input", required=True, help="input raster (.pgm or .sasr)")
    sp.add_argument("--out", required=True, help="output raster")
    sp.add_argument("--psnr", type=float, help="target PSNR in dB")
    sp.add_argument("--sigma", type=float, help="Rayleigh sigma")

    for name, fn, text in (("detect", cmd_detect, "Scan a scene with overlapping patches."),
                           ("calibrate", cmd_calibrate, "Sweep tau on a validation scene.")):
        sp = command(name, fn, text)
        sp.add_argument("--scene", required=True, help="scene raster")
        sp.add_argument("--model", required=True, help="network (.satr)")
        sp.add_argument("--svm", required=True, help="SVM (.ssvm)")
        sp.add_argument("--patch", type=int, default=64, help="patch size (default 64)")
        sp.add_argument("--stride", type=int, default=32, help="patch stride (default 32)")
        if name == "detect":
            sp.add_argument("--tau", type=float, default=dt.DEFAULT_TAU, help="threshold (default 0.9)")
            sp.add_argument("--out", required=True, help="detections CSV")
            sp.add_argument("--merge", metavar="PATH", help="also write merged regions CSV here")
            sp.add_argument("--overlay", help="PGM with flagged patches brightened")
        else:
            sp.add_argument("--truth", required=True, help="ground-truth CSV from gen-scene")
            sp.add_argument("--out", help="sweep table CSV")
            sp.add_argument("--tau-min", type=float, default=0.5, help="lowest tau (default 0.5)")
            sp.add_argument("--tau-max", type=float, default=0.99, help="highest tau (default 0.99)")
            sp.add_argument("--tau-step", type=float, default=0.01, help="tau step (default 0.01)")

    sp = command("benchmark", cmd_benchmark, "Run the seeded precision/recall benchmark.")
    sp.add_argument("--data", help="chip manifest (default: standard synthetic dataset)")
    sp.add_argument("--per-class", type=int, default=60, help="standard dataset size per class")
    sp.add_argument("--model", help="base network (default: pretrain one)")
    sp.add_argument("--out", required=True, help="results CSV")
    sp.add_argument("--trials", type=int, default=4, help="trials (default 4)")
    sp.add_argument("--train-per-class", type=int, default=20, help="training chips per class (default 20)")
    sp.add_argument("--test-per-class", type=int, default=10, help="test chips per class (default 10)")
    sp.add_argument("--methods", default=",".join(bm.METHODS), help="comma-separated subset of methods")
    sp.add_argument("--C", type=float, default=1.0, help="SVM regularization constant")

    sp = command("dump-activations", cmd_dump_activations, "Write each channel of chosen layers as PGM.")
    sp.add_argument("--chip", required=True, help="chip raster")
    sp.add_argument("--model", required=True, help="network (.satr)")
    sp.add_argument("--layers", required=True, help="comma-separated layer indices")
    sp.add_argument("--out", required=True, help="output directory")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors exit 1, --help exits 0
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"sonatr {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SonatrError, OSError, ValueError, KeyError) as exc:
        print(f"sonatr {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
