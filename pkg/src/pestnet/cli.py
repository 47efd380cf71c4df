"""``pestnet`` command-line interface.

Every subcommand that produces files writes them into a run directory
(``--out``, default ``runs/<command>-<timestamp>-<pid>``) together with
``settings.txt``, a ``key = value`` manifest of the effective settings.
Tables go to standard output as tab-separated text.

Architecture precedence: built-in canonical layout < ``--config`` file <
individual flags (``--classes``, ``--ratio``, ``--attention``,
``--no-attention``, ``--width``).

Exit codes: 0 success, 1 validation error (bad flags, bad config, missing
or malformed data), 2 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .errors import ConfigError, ContractError, DimensionError, FormatError, NumericError, ValidationError

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
VALIDATION_ERRORS = (ValidationError, ConfigError, FormatError, DimensionError, FileNotFoundError)

log = logging.getLogger("pestnet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Argument errors raise instead of exiting with argparse's code 2."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- flag parsing helpers ----------------------------------------------------

def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _hw(text: str) -> tuple[int, int, int]:
    """``224x224`` or ``224x224x3`` -> (h, w, c)."""
    parts = text.lower().split("x")
    try:
        dims = [int(p) for p in parts]
    except ValueError:
        dims = []
    if len(dims) not in (2, 3) or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"expected HxW or HxWxC, got {text!r}")
    return (dims[0], dims[1], dims[2] if len(dims) == 3 else 3)


def _pairs(text: str) -> list[tuple[int, int]]:
    out = []
    for chunk in text.split(";"):
        vals = _int_list(chunk)
        if len(vals) != 2:
            raise argparse.ArgumentTypeError(f"expected 'a,b;c,d' location pairs, got {text!r}")
        out.append((vals[0], vals[1]))
    return out


def _add_arch(p: argparse.ArgumentParser, classes_default=None) -> None:
    g = p.add_argument_group("architecture")
    g.add_argument("--config", help="architecture file (default: built-in canonical layout)")
    g.add_argument("--classes", type=int, default=classes_default, help="classifier width k")
    g.add_argument("--ratio", type=int, help="attention reduction ratio r")
    g.add_argument("--attention", type=_int_list, metavar="L1,L2", help="rows carrying double attention")
    g.add_argument("--no-attention", action="store_true", help="plain inverted residuals everywhere")
    g.add_argument("--width", type=float, help="channel width multiplier")


def _add_sgd(p: argparse.ArgumentParser) -> None:
    from .train import SgdConfig

    d = SgdConfig()
    g = p.add_argument_group("optimizer")
    g.add_argument("--epochs", type=int, default=d.epochs)
    g.add_argument("--batch-size", type=int, default=d.batch_size)
    g.add_argument("--lr", type=float, default=d.learning_rate)
    g.add_argument("--momentum", type=float, default=d.momentum)
    g.add_argument("--weight-decay", type=float, default=d.weight_decay)


def _add_out(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", help="run directory (default: runs/<command>-<timestamp>-<pid>)")


def _add_data(p: argparse.ArgumentParser, required=True) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--dataset", required=required, help="root with one sub-directory per class")
    g.add_argument("--input", type=int, default=224, help="square crop size fed to the network")
    g.add_argument("--resize", type=int, help="shorter-side resize before cropping (default input*256/224)")


# -- shared plumbing ---------------------------------------------------------

def resolve_config(args):
    from .architecture import canonical_config, load_config

    cfg = load_config(args.config) if args.config else canonical_config()
    if getattr(args, "classes", None) is not None:
        cfg = cfg.with_classes(args.classes)
    if args.no_attention:
        if args.attention:
            raise ConfigError("--attention and --no-attention are mutually exclusive")
        cfg = cfg.without_attention()
    elif args.attention is not None or args.ratio is not None:
        locs = args.attention if args.attention is not None else cfg.attention_locations
        cfg = cfg.with_attention(locs, args.ratio)
    if args.width is not None:
        cfg = cfg.with_width(args.width)
    cfg.validate()
    return cfg


def run_dir(args) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
        out = Path("runs") / f"{args.command}-{stamp}-{os.getpid()}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_settings(out: Path, args, **extra) -> Path:
    items = {"command": args.command, "version": __version__}
    items.update({k: v for k, v in vars(args).items() if k not in ("command", "func")})
    items.update(extra)
    lines = []
    for k, v in items.items():
        if isinstance(v, (list, tuple)):
            v = ",".join(";".join(map(str, x)) if isinstance(x, (list, tuple)) else str(x) for x in v)
        lines.append(f"{k} = {'' if v is None else v}")
    path = out / "settings.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def _sgd_config(args):
    from .train import SgdConfig

    return SgdConfig(learning_rate=args.lr, momentum=args.momentum, weight_decay=args.weight_decay,
                     epochs=args.epochs, batch_size=args.batch_size, seed=args.seed)


def _load_images(args, manifest):
    """Decode every image once when it fits comfortably in memory."""
    from .data import FileImageSet

    images = FileImageSet(manifest, size=args.input, resize=args.resize)
    if len(images) * 3 * args.input ** 2 * 4 <= (1 << 31):
        return images.materialize()
    return images


def _scan(root):
    from .data import scan_dataset

    if not Path(root).is_dir():
        raise ValidationError(f"dataset root {root} does not exist")
    manifest = scan_dataset(root)
    for w in manifest.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return manifest


def _read_labels(path, k: int) -> list[str]:
    if path is None:
        return [f"class_{i:02d}" for i in range(k)]
    names = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if len(names) != k:
        raise ValidationError(f"{path}: {len(names)} labels for a {k}-way classifier")
    return names


# -- commands ----------------------------------------------------------------

def cmd_describe(args) -> int:
    from .architecture import infer_shapes

    cfg = resolve_config(args)
    rows = infer_shapes(cfg, args.input)
    fmt = lambda s: "x".join(map(str, s))  # noqa: E731
    print("index\tkind\tin_shape\tout_shape\tstride")
    for r in rows:
        print(f"{r.index}\t{r.kind}\t{fmt(r.in_shape)}\t{fmt(r.out_shape)}\t{'-' if r.stride is None else r.stride}")
    if args.out:
        out = run_dir(args)
        write_settings(out, args)
    return EXIT_OK


def cmd_count(args) -> int:
    from .accounting import gmac, layer_costs, total_cost

    cfg = resolve_config(args)
    if args.per_layer:
        print("index\tkind\tparams\tgmac")
        for lc in layer_costs(cfg, args.input):
            print(f"{lc.index}\t{lc.kind}\t{lc.cost.params}\t{gmac(lc.cost.ops(args.convention)):.4f}")
    cost = total_cost(cfg, args.input)
    print("params\tgmac\tconvention")
    print(f"{cost.params}\t{gmac(cost.ops(args.convention)):.4f}\t{args.convention}")
    if args.out:
        write_settings(run_dir(args), args)
    return EXIT_OK


def cmd_synth(args) -> int:
    from .data import scan_dataset, stratified_kfold, synth_dataset, write_manifest

    out = run_dir(args)
    ds = synth_dataset(args.classes, args.per_class, args.size, seed=args.seed)
    root = ds.write_tree(out / "data")
    manifest = scan_dataset(root)
    if args.per_class >= 5:
        write_manifest(manifest, stratified_kfold(manifest.labels, 5, args.seed), out / "manifest.tsv")
    write_settings(out, args, dataset=root)
    print(f"{root}\t{manifest.total} images\t{len(manifest.classes)} classes")
    return EXIT_OK


def cmd_train(args) -> int:
    from . import plotting
    from .data import D1_ROSTER, D2_ROSTER, make_d1_500, validate_manifest
    from .train import evaluate, fold_seeds, run_cv, train_fold, write_reports
    from .model import build
    from .weights import load_weights, save_weights

    manifest = _scan(args.dataset)
    if args.roster:
        for problem in validate_manifest(manifest, {"d1": D1_ROSTER, "d2": D2_ROSTER}[args.roster]):
            print(f"warning: {problem}", file=sys.stderr)
    if args.per_class_subset:
        try:
            manifest = make_d1_500(manifest, args.seed, per_class=args.per_class_subset)
        except ContractError as exc:
            raise ValidationError(str(exc)) from None
    args.classes = len(manifest.classes) if args.classes is None else args.classes
    if args.classes != len(manifest.classes):
        raise ValidationError(f"--classes {args.classes} but the dataset has {len(manifest.classes)} classes")
    cfg = resolve_config(args)
    sgd = _sgd_config(args)
    out = run_dir(args)
    data = _load_images(args, manifest)
    classes = list(manifest.classes)
    (out / "classes.txt").write_text("\n".join(classes) + "\n")

    if args.fit_all:
        model = build(cfg, seed=args.seed)
        if args.init_weights:
            load_weights(model, args.init_weights, reinit_head=True, seed=args.seed)
        write_settings(out, args, model_seed=args.seed)
        report = train_fold(model, data, data, sgd, fold=0,
                            on_epoch=lambda e, l: log.info("epoch %d loss %.4f", e + 1, l))
        m = evaluate(model.eval(), data)
        summary = {"train_accuracy": m.accuracy, "train_macro_f1": m.macro_f1,
                   "final_loss": report.epoch_losses[-1], "eval_loss": m.loss,
                   "report": report.to_dict(), "classes": classes}
        (out / "summary.json").write_text(json.dumps(summary, indent=2))
        plotting.plot_confusion(m.confusion, classes, out / "confusion_train.png", "training set")
        plotting.plot_losses({"train": report.epoch_losses}, out / "losses.png")
        if not args.no_save_weights:
            save_weights(model, out / "model.a2lw")
        print("accuracy\tmacro_f1\tfinal_loss")
        print(f"{m.accuracy:.4f}\t{m.macro_f1:.4f}\t{report.epoch_losses[-1]:.6f}")
        return EXIT_OK

    if args.only_fold is not None and not 0 <= args.only_fold < args.folds:
        raise ValidationError(f"--only-fold must lie in [0, {args.folds})")
    seeds = fold_seeds(args.seed, args.folds)
    write_settings(out, args, fold_seeds=seeds)

    def on_fold(report, model):
        plotting.plot_confusion(report.confusion, classes, out / f"confusion_fold{report.fold}.png",
                                f"fold {report.fold}")
        if not args.no_save_weights:
            save_weights(model, out / f"fold{report.fold}.a2lw")
        print(f"{report.fold}\t{report.accuracy:.4f}\t{report.macro_f1:.4f}\t{report.epoch_losses[-1]:.6f}",
              flush=True)

    print("fold\taccuracy\tmacro_f1\tfinal_loss", flush=True)
    result = run_cv(cfg, data, sgd, k=args.folds,
                    folds=None if args.only_fold is None else [args.only_fold],
                    init_weights=args.init_weights, on_fold=on_fold)
    write_reports(result, out, classes)
    plotting.plot_losses({f"fold {r.fold}": r.epoch_losses for r in result.reports}, out / "losses.png")
    s = result.summary()
    print(f"mean\t{s['accuracy_mean']:.4f}\t{s['macro_f1_mean']:.4f}\t{s['accuracy_pm']}")
    return EXIT_OK


def _build_for_inference(args, cfg):
    from .model import build
    from .weights import load_weights

    model = build(cfg, seed=args.seed)
    if args.weights:
        load_weights(model, args.weights)
    return model.eval()


def cmd_eval(args) -> int:
    from . import plotting
    from .train import evaluate

    manifest = _scan(args.dataset)
    args.classes = len(manifest.classes) if args.classes is None else args.classes
    cfg = resolve_config(args)
    model = _build_for_inference(args, cfg)
    data = _load_images(args, manifest)
    out = run_dir(args)
    write_settings(out, args)
    m = evaluate(model, data)
    classes = list(manifest.classes)
    (out / "metrics.json").write_text(json.dumps(
        {"accuracy": m.accuracy, "macro_f1": m.macro_f1, "loss": m.loss,
         "per_class_f1": m.per_class_f1().tolist(), "confusion": m.confusion.tolist(), "classes": classes},
        indent=2))
    np.savetxt(out / "confusion.csv", m.confusion, fmt="%d", delimiter=",")
    plotting.plot_confusion(m.confusion, classes, out / "confusion.png")
    print("accuracy\tmacro_f1\tloss")
    print(f"{m.accuracy:.4f}\t{m.macro_f1:.4f}\t{m.loss:.6f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    from .data import preprocess
    from .imageio import read_image

    cfg = resolve_config(args)
    labels = _read_labels(args.labels, cfg.num_classes)
    model = _build_for_inference(args, cfg)
    out = run_dir(args)
    write_settings(out, args)
    x = np.stack([preprocess(read_image(p), args.input, args.resize) for p in args.images])
    probs = model.predict(x)
    lines = ["path\tclass\tprobability"]
    for path, p in zip(args.images, probs):
        top = int(np.argmax(p))
        lines.append(f"{path}\t{labels[top]}\t{p[top]:.6f}")
    (out / "predictions.tsv").write_text("\n".join(lines) + "\n")
    np.savetxt(out / "probabilities.csv", probs, fmt="%.6f", delimiter=",")
    print("\n".join(lines))
    return EXIT_OK


def cmd_activations(args) -> int:
    from . import plotting
    from .activations import export_activations
    from .data import MEAN, STD, preprocess, synth_dataset
    from .imageio import read_image

    cfg = resolve_config(args)
    model = _build_for_inference(args, cfg)
    if args.image:
        pixels = read_image(args.image)
    else:
        pixels = synth_dataset(1, 1, args.input, seed=args.seed).pixels[0]
    x = preprocess(pixels, args.input, args.resize)
    out = run_dir(args)
    write_settings(out, args)
    written = export_activations(model, x, args.layers, out)
    shown = np.clip(x.transpose(1, 2, 0) * STD + MEAN, 0, 1)
    plotting.plot_activation_maps({i: w["map"] for i, w in written.items()}, out / "activations.png", shown)
    print("layer\theight\twidth\tpgm\tcsv")
    for i, w in written.items():
        h, wd = w["map"].shape
        print(f"{i}\t{h}\t{wd}\t{w['pgm']}\t{w['csv']}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from . import plotting
    from .ablation import ablation_grid, write_ablation_csv

    base = resolve_config(args)
    dataset = None
    if args.dataset:
        manifest = _scan(args.dataset)
        dataset = _load_images(args, manifest)
    out = run_dir(args)
    write_settings(out, args)
    rows = ablation_grid(base, args.locations, args.ratios, num_classes=args.classes,
                         input_shape=(args.input, args.input, 3), include_direct=not args.no_direct,
                         convention=args.convention, dataset=dataset,
                         sgd=_sgd_config(args) if dataset is not None else None, folds=args.folds)
    path = write_ablation_csv(rows, out / "ablation.csv")
    plotting.plot_ablation(rows, out / "ablation.png")
    print(path.read_text().replace(",", "\t"), end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import CHECKS, TOLERANCE, run_gradchecks

    names = args.blocks or list(CHECKS)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise ValidationError(f"unknown blocks {unknown}; choose from {sorted(CHECKS)}")
    out = run_dir(args)
    write_settings(out, args, tolerance=TOLERANCE)
    failed = False
    lines = ["block\tmax_rel_error\tstatus"]
    print(lines[0], flush=True)
    for name in names:
        err = run_gradchecks(args.seeds, [name], first_seed=args.seed)[name]
        ok = err <= TOLERANCE
        failed |= not ok
        lines.append(f"{name}\t{err:.3e}\t{'ok' if ok else 'FAIL'}")
        print(lines[-1], flush=True)
    (out / "gradcheck.tsv").write_text("\n".join(lines) + "\n")
    return EXIT_RUNTIME if failed else EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    from .accounting import CONVENTIONS
    from .ablation import LOCATIONS, RATIOS
    from .activations import DEFAULT_LAYERS

    parser = _Parser(prog="pestnet", description="Double-attention lightweight pest recognition network.")
    parser.add_argument("--version", action="version", version=f"pestnet {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("describe", help="print the layer/shape table")
    _add_arch(p)
    p.add_argument("--input", type=_hw, default=(224, 224, 3), metavar="HxW")
    p.add_argument("--out")
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("count", help="parameter and GMAC totals")
    _add_arch(p)
    p.add_argument("--input", type=_hw, default=(224, 224, 3), metavar="HxW")
    p.add_argument("--convention", choices=CONVENTIONS, default="profiler")
    p.add_argument("--per-layer", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("synth", help="write a synthetic PPM dataset tree")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=8)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--seed", type=int, default=0)
    _add_out(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="stratified k-fold training (or --fit-all)")
    _add_arch(p)
    _add_data(p)
    _add_sgd(p)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--only-fold", type=int)
    p.add_argument("--fit-all", action="store_true", help="train on every sample and report training metrics")
    p.add_argument("--seed", type=int, default=0, help="master seed (splits, fold seeds, init, shuffling)")
    p.add_argument("--init-weights", help="weight file to start from; the classifier head is re-initialized")
    p.add_argument("--per-class-subset", type=int, metavar="N", help="draw N images per class first (e.g. 50)")
    p.add_argument("--roster", choices=("d1", "d2"), help="warn when class counts differ from a known roster")
    p.add_argument("--no-save-weights", action="store_true")
    _add_out(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score saved weights on a dataset")
    _add_arch(p)
    _add_data(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_out(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="classify individual images")
    _add_arch(p)
    p.add_argument("images", nargs="+")
    p.add_argument("--weights")
    p.add_argument("--labels", help="class names, one per line (e.g. a training run's classes.txt)")
    p.add_argument("--input", type=int, default=224)
    p.add_argument("--resize", type=int)
    p.add_argument("--seed", type=int, default=0)
    _add_out(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("activations", help="export per-layer activation maps")
    _add_arch(p)
    p.add_argument("--image", help="RGB image (default: a synthetic sample)")
    p.add_argument("--weights")
    p.add_argument("--layers", type=_int_list, default=list(DEFAULT_LAYERS))
    p.add_argument("--input", type=int, default=224)
    p.add_argument("--resize", type=int)
    p.add_argument("--seed", type=int, default=0)
    _add_out(p)
    p.set_defaults(func=cmd_activations)

    p = sub.add_parser("ablate", help="attention location / ratio grid")
    _add_arch(p, classes_default=1000)
    p.add_argument("--locations", type=_pairs, default=list(LOCATIONS), metavar="A,B;C,D")
    p.add_argument("--ratios", type=_int_list, default=list(RATIOS))
    p.add_argument("--no-direct", action="store_true")
    p.add_argument("--convention", choices=CONVENTIONS, default="profiler")
    _add_data(p, required=False)
    _add_sgd(p)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    _add_out(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every block")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--blocks", type=lambda s: [t for t in s.split(",") if t])
    _add_out(p)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericError, ContractError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the runtime exit code
        log.debug("unhandled", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
