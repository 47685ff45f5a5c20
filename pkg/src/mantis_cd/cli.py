"""Command line interface: chip, train, infer, eval, gradcheck, landscape.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
import argparse
import copy
import json
from pathlib import Path
import sys

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS = {
    "model": {"depth": 4, "nf": 8, "variant": "fractal_resnet", "ft_depth": 5, "num_classes": 2,
              "in_channels": 3, "attention": True, "seed": 0},
    "data": {"root": None, "synthetic": 0, "chip_size": 64, "val_synthetic": 8, "window": 256, "stride": 128},
    "schedule": {"stages": [[1e-3, 0], [1e-4, 10], [1e-5, 20]], "patience": 10, "epochs": 200, "batch_size": 4,
                 "seed": 0, "val_depth": None},
    "augment": {"enabled": False, "p_time_reversal": 0.5, "p_random_identity": 0.5},
    "inference": {"window": 256, "stride": 64, "threshold": 0.5, "batch_size": 4},
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def load_config(path=None):
    """Defaults overlaid with the sections of a JSON file; unknown keys are rejected."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is None:
        return cfg
    try:
        user = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(user, dict):
        raise UsageError("config must be a JSON object")
    for section, values in user.items():
        if section not in cfg:
            raise UsageError(f"unknown config section {section!r}")
        if not isinstance(values, dict):
            raise UsageError(f"section {section!r} must be an object")
        if section == "augment":
            cfg[section].update(values)
            continue
        unknown = set(values) - set(cfg[section])
        if unknown:
            raise UsageError(f"unknown keys in {section!r}: {sorted(unknown)}")
        cfg[section].update(values)
    return cfg


def _override(section, **flags):
    for key, value in flags.items():
        if value is not None:
            section[key] = value


# subcommands ----------------------------------------------------------------------------

def cmd_chip(args):
    from .pipeline import chip_tile, read_image, read_mask, split_train_val, write_split

    try:
        a, b, label = read_image(args.a), read_image(args.b), read_mask(args.label)
    except (FileNotFoundError, OSError) as exc:
        raise DataError(str(exc)) from exc
    if a.shape != b.shape or a.shape[1:] != label.shape:
        raise DataError("A, B and label rasters are not co-registered")
    F, stride = args.window, args.stride or args.window // 2
    h, w = label.shape
    if args.split:
        train, val_rects = split_train_val(w, h, F)
        ys, xs = train.slices()
        chips = {"train": chip_tile(a[:, ys, xs], b[:, ys, xs], label[ys, xs], F, stride)}
        chips["val"] = []
        for r in val_rects:
            ys, xs = r.slices()
            if r.w >= F and r.h >= F:
                chips["val"] += chip_tile(a[:, ys, xs], b[:, ys, xs], label[ys, xs], F, stride)
    else:
        chips = {"train": chip_tile(a, b, label, F, stride)}
    for split, items in chips.items():
        if items:
            write_split(args.out, split, items)
        print(f"{split}: {len(items)} chips")
    return EXIT_OK


def _load_chips(cfg, split):
    from .pipeline import read_split, synth_dataset

    data = cfg["data"]
    if data["root"]:
        try:
            return read_split(data["root"], split)
        except (FileNotFoundError, OSError) as exc:
            raise DataError(str(exc)) from exc
    n = data["synthetic"] if split == "train" else data["val_synthetic"]
    if not n:
        raise UsageError("set data.root or data.synthetic")
    return synth_dataset(n, data["chip_size"], seed=0 if split == "train" else 1)


def cmd_train(args):
    from .mantis import Mantis, MantisConfig
    from .pipeline import AugmentConfig
    from .trainer import EvolveSchedule, TrainConfig, pareto_front, train

    cfg = load_config(args.config)
    _override(cfg["data"], root=args.data, synthetic=args.synthetic)
    _override(cfg["schedule"], epochs=args.epochs, batch_size=args.batch_size, patience=args.patience)
    try:
        model_cfg = MantisConfig(**cfg["model"])
        sched = cfg["schedule"]
        schedule = EvolveSchedule(tuple(map(tuple, sched["stages"])), sched["patience"])
        aug = dict(cfg["augment"])
        augment = AugmentConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in aug.items()
                                   if k != "enabled"}) if aug.pop("enabled") else None
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    train_chips, val_chips = _load_chips(cfg, "train"), _load_chips(cfg, "val")
    if not train_chips or not val_chips:
        raise DataError("empty train or validation set")
    try:
        model_cfg.check_input(*train_chips[0].size)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    model = Mantis(model_cfg)
    tcfg = TrainConfig(epochs=sched["epochs"], batch_size=sched["batch_size"], seed=sched["seed"],
                       augment=augment, out_dir=args.out, val_depth=sched["val_depth"])

    def log(r):
        print(f"epoch {r.epoch:4d} stage {r.stage} lr {r.lr:.0e} d {r.depth:2d} "
              f"train {r.train_loss:.4f} val {r.val_loss:.4f} mcc {r.mcc:.4f} ft {r.ftnmt:.4f}", flush=True)

    run = train(model, train_chips, val_chips, schedule, tcfg, log=None if args.quiet else log)
    front = pareto_front(run.records)
    Path(args.out, "pareto.json").write_text(json.dumps([r.path for r in front], indent=2))
    print(f"pareto front: {[r.epoch for r in front]}")
    return EXIT_OK


def _load_models(paths):
    from .mantis import Mantis, MantisConfig
    from .substrate import load_checkpoint, read_manifest

    models = []
    for p in paths:
        try:
            manifest = read_manifest(p)
        except (FileNotFoundError, ValueError) as exc:
            raise DataError(f"cannot read checkpoint {p}: {exc}") from exc
        try:
            model = Mantis(MantisConfig.from_dict(manifest["config"]))
            load_checkpoint(p, model)
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"checkpoint {p} does not match its config: {exc}") from exc
        models.append(model)
    return models


def cmd_infer(args):
    from .inference import InferenceConfig, confusion_map, ensemble_inference
    from .pipeline import read_image, read_mask, write_image, write_mask

    cfg = load_config(args.config)
    _override(cfg["inference"], window=args.window, stride=args.stride, threshold=args.threshold)
    try:
        icfg = InferenceConfig(**cfg["inference"])
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    try:
        a, b = read_image(args.a), read_image(args.b)
    except (FileNotFoundError, OSError) as exc:
        raise DataError(str(exc)) from exc
    models = _load_models(args.checkpoints)
    try:
        prob = ensemble_inference(models, a, b, icfg)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    if not np.all(np.isfinite(prob)):
        raise FloatingPointError("non-finite probabilities")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mask = prob > icfg.threshold
    write_image(out / "probability.png", prob[None])
    write_mask(out / "mask.png", mask)
    write_image(out / "confidence.png", (np.abs(prob - 0.5) * 2.0)[None])
    prob.astype("<f4").tofile(out / "probability.f32")
    (out / "probability.json").write_text(json.dumps({"shape": list(prob.shape), "dtype": "<f4"}))
    if args.label:
        from PIL import Image

        try:
            gt = read_mask(args.label)
        except (FileNotFoundError, OSError) as exc:
            raise DataError(str(exc)) from exc
        if gt.shape != mask.shape:
            raise DataError(f"label {gt.shape} does not match raster {mask.shape}")
        Image.fromarray(confusion_map(mask, gt)).save(out / "confusion.png")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_eval(args):
    from .pipeline import read_mask
    from .trainer import confusion_counts, metrics_from_counts

    pred_dir, label_dir = Path(args.pred), Path(args.label)
    names = sorted(p.name for p in label_dir.glob("*.png"))
    if not names:
        raise DataError(f"no label images in {label_dir}")
    total = np.zeros(4, dtype=np.int64)
    print(f"{'name':<24} {'precision':>9} {'recall':>9} {'f1':>9} {'mcc':>9} {'iou':>9}")
    for name in names:
        if not (pred_dir / name).exists():
            raise DataError(f"missing prediction for {name}")
        counts = confusion_counts(read_mask(pred_dir / name), read_mask(label_dir / name))
        total += counts
        m = metrics_from_counts(*counts)
        print(f"{name:<24} " + " ".join(f"{m[k]:9.4f}" for k in ("precision", "recall", "f1", "mcc", "iou")))
    m = metrics_from_counts(*total)
    print(f"{'total':<24} " + " ".join(f"{m[k]:9.4f}" for k in ("precision", "recall", "f1", "mcc", "iou")))
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradsuite import run_suite

    try:
        results = run_suite(args.seed, full_network=not args.quick, names=args.only)
    except KeyError as exc:
        raise UsageError(str(exc)) from exc
    failed = 0
    for name, report in results:
        print(f"{name:<22} {report}")
        failed += not report.passed
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_landscape(args):
    from .inference import landscape_emit

    try:
        text = landscape_emit(tuple(args.l), tuple(args.depths), args.grid)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="mantis-cd", description="Change detection with fractal Tanimoto attention.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("chip", help="cut a tile pair and label into chips")
    p.add_argument("--a", required=True, help="date 1 raster")
    p.add_argument("--b", required=True, help="date 2 raster")
    p.add_argument("--label", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=256)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--split", action="store_true", help="also write a val split from the tile remainder")
    p.set_defaults(func=cmd_chip)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("--config")
    p.add_argument("--data", help="dataset root with train/ and val/")
    p.add_argument("--synthetic", type=int, help="train on this many synthetic chips")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="sliding-window inference on a raster pair")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--label")
    p.add_argument("--config")
    p.add_argument("--window", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="metrics for predicted vs label masks")
    p.add_argument("--pred", required=True)
    p.add_argument("--label", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quick", action="store_true", help="skip the full network check")
    p.add_argument("--only", nargs="+")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("landscape", help="emit the <FT>^d landscape as CSV")
    p.add_argument("--l", type=float, nargs=2, default=[0.4, 0.6])
    p.add_argument("--depths", type=int, nargs="+", default=[0, 3, 5])
    p.add_argument("--grid", type=int, default=101)
    p.add_argument("--out")
    p.set_defaults(func=cmd_landscape)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
