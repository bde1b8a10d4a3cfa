"""Command-line entry point.

Subcommands: synth-data, train, eval, analyze, gradcheck, export-maps.
Flag values override config-file entries, which override built-in defaults.
Exit codes: 0 success, 1 validation error, 2 internal error.
"""
import argparse
import os
import sys

import numpy as np

from .analysis import GraphError, analyze, stats_report
from .config import ConfigError, get_typed, parse_config_file
from .data import (FormatError, SynthCfg, export_maps, generate_dataset,
                   load_batch, read_meta)
from .gradcheck import run_suite
from .losses import DataError, MetricError, metric_report
from .model import ModelCfg, SegModel, parse_model_name, predict_labels
from .params import ParamStore
from .tensor import ShapeError, UsageError
from .train import TrainAbort, TrainCfg, evaluate, load_checkpoint, train

GRADCHECK_TOLERANCE = 1e-4


class _Parser(argparse.ArgumentParser):
    # validation failures exit 1, not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _fmt(prog):
    return argparse.HelpFormatter(prog, width=78)


def build_parser():
    parser = _Parser(prog="sanet", formatter_class=_fmt,
                     description="Squeeze-attention segmentation toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("synth-data", formatter_class=_fmt,
                       help="generate a synthetic shapes dataset")
    p.add_argument("--out", required=True, help="dataset directory to create")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, help="master random seed")

    p = sub.add_parser("train", formatter_class=_fmt,
                       help="train a model on a dataset directory")
    p.add_argument("--model", help="model name, e.g. sanet-desk")
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--out", help="output directory for checkpoints and log")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, help="master random seed")
    p.add_argument("--epochs", type=int, help="training epochs")
    p.add_argument("--alpha", type=float, help="categorical loss weight")
    p.add_argument("--beta", type=float, help="dense loss weight")
    p.add_argument("--sa-activation", choices=("relu", "sigmoid"),
                   help="attention mask activation")
    p.add_argument("--sa-pool", choices=("avg", "max"),
                   help="attention channel pooling")

    p = sub.add_parser("eval", formatter_class=_fmt,
                       help="evaluate a checkpoint on a dataset directory")
    p.add_argument("--model", required=True, help="checkpoint directory")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--report", help="write the metric report here")

    p = sub.add_parser("analyze", formatter_class=_fmt,
                       help="static parameter and MAC counts for a model")
    p.add_argument("--model", required=True, help="model name, e.g. sanet-resnet101")
    p.add_argument("--input-size", type=int, nargs=2, default=(512, 512),
                   metavar=("H", "W"), help="input height and width")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--report", help="write the layer report here")

    p = sub.add_parser("gradcheck", formatter_class=_fmt,
                       help="finite-difference check of all backward rules")
    p.add_argument("--seed", type=int, help="master random seed")

    p = sub.add_parser("export-maps", formatter_class=_fmt,
                       help="export attention and feature maps as images")
    p.add_argument("--model", required=True, help="checkpoint directory")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output file prefix")
    p.add_argument("--seed", type=int, help="sample selection seed")

    return parser


def _entries(args):
    if getattr(args, "config", None):
        return parse_config_file(args.config)
    return {}


def _resolve(args, entries, attr, key, kind, default):
    flag = getattr(args, attr, None)
    if flag is not None:
        return flag
    return get_typed(entries, key, kind, default)


def _model_options(args, entries):
    name = _resolve(args, entries, "model", "model", str, None)
    if name is None:
        name = "sanet-desk"
    family, variant = parse_model_name(name)
    variant = get_typed(entries, "backbone.variant", str, variant)
    name = f"{family}-{variant}"
    parse_model_name(name)
    return {
        "name": name,
        "classes": get_typed(entries, "model.classes", int, None),
        "sa_ratio": get_typed(entries, "model.sa.ratio", int, None),
        "sa_activation": _resolve(args, entries, "sa_activation",
                                  "model.sa.activation", str, "sigmoid"),
        "sa_pool": _resolve(args, entries, "sa_pool", "model.sa.pool",
                            str, "avg"),
    }


def _cmd_synth_data(args):
    entries = _entries(args)
    seed = _resolve(args, entries, "seed", "seed", int, 0)
    cfg = SynthCfg(
        classes=get_typed(entries, "data.classes", int, 3),
        image_size=get_typed(entries, "data.size", int, 64),
        shapes_min=get_typed(entries, "data.shapes_min", int, 1),
        shapes_max=get_typed(entries, "data.shapes_max", int, 4),
        noise_std=get_typed(entries, "data.noise_std", float, 0.05),
        seed=seed,
    )
    count = get_typed(entries, "data.count", int, 200)
    generate_dataset(cfg, count, args.out)
    print(f"wrote {count} samples ({cfg.classes} classes, "
          f"{cfg.image_size}x{cfg.image_size}) to {args.out}")
    return 0


def _cmd_train(args):
    entries = _entries(args)
    dataset = _resolve(args, entries, "dataset", "dataset", str, None)
    out = _resolve(args, entries, "out", "out", str, None)
    if dataset is None or out is None:
        raise ConfigError("train needs --dataset and --out (flag or config)")
    opts = _model_options(args, entries)
    tc = TrainCfg(
        epochs=_resolve(args, entries, "epochs", "epochs", int, 30),
        batch_size=get_typed(entries, "batch_size", int, 8),
        base_lr=get_typed(entries, "base_lr", float, 0.001),
        lr_power=get_typed(entries, "lr_power", float, 0.9),
        momentum=get_typed(entries, "momentum", float, 0.9),
        weight_decay=get_typed(entries, "weight_decay", float, 1e-4),
        seed=_resolve(args, entries, "seed", "seed", int, 0),
        alpha=_resolve(args, entries, "alpha", "alpha", float, 0.2),
        beta=_resolve(args, entries, "beta", "beta", float, 0.8),
        eval_every=get_typed(entries, "eval_every", int, 1),
    )
    log_text, final_dir, best_dir = train(
        opts["name"], dataset, out, tc, classes=opts["classes"],
        sa_ratio=opts["sa_ratio"], sa_activation=opts["sa_activation"],
        sa_pool=opts["sa_pool"])
    sys.stdout.write(log_text)
    print(f"final checkpoint: {final_dir}")
    print(f"best checkpoint: {best_dir}")
    return 0


def _cmd_eval(args):
    per_class, mean_iou, pacc = evaluate(args.model, args.dataset)
    report = metric_report(per_class, mean_iou, pacc)
    sys.stdout.write(report)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as f:
            f.write(report)
    return 0


def _cmd_analyze(args):
    entries = _entries(args)
    opts = _model_options(args, entries)
    cfg = ModelCfg.from_name(opts["name"], classes=opts["classes"],
                             sa_ratio=opts["sa_ratio"],
                             sa_activation=opts["sa_activation"],
                             sa_pool=opts["sa_pool"])
    store = ParamStore(seed=0)
    model = SegModel(store, cfg)
    h, w = args.input_size
    stats = analyze(model.graph(h, w))
    report = stats_report(stats)
    sys.stdout.write(report)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as f:
            f.write(report)
    return 0


def _cmd_gradcheck(args):
    seed = args.seed if args.seed is not None else 0
    failed = False
    for name, err in run_suite(seed):
        ok = err < GRADCHECK_TOLERANCE
        failed = failed or not ok
        print(f"{name} {err:.3e} {'ok' if ok else 'FAIL'}")
    return 1 if failed else 0


def _cmd_export_maps(args):
    store, model, _ = load_checkpoint(args.model)
    if model.cfg.family != "sanet":
        raise ConfigError(
            f"export-maps needs an attention model, got {model.cfg.name}")
    meta = read_meta(args.dataset)
    seed = args.seed if args.seed is not None else 0
    rng = np.random.default_rng(np.random.SeedSequence((seed, 2)))
    index = int(rng.integers(meta["count"]))
    batch = load_batch(args.dataset, [index], model.cfg.classes)
    outputs = model.forward(batch.images, training=False)
    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    written = export_maps(outputs, predict_labels(outputs), args.out,
                          meta["size"])
    for path in written:
        print(path)
    return 0


_COMMANDS = {
    "synth-data": _cmd_synth_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "analyze": _cmd_analyze,
    "gradcheck": _cmd_gradcheck,
    "export-maps": _cmd_export_maps,
}


def _run(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    return _COMMANDS[args.command](args)


def main(argv=None):
    try:
        return _run(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else int(e.code)
    except (ConfigError, FormatError, DataError, MetricError, GraphError,
            ShapeError, UsageError, FileNotFoundError, NotADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except TrainAbort as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # anything unforeseen is an internal error
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
