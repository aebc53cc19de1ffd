"""Command-line entry point: ``hook <subcommand> [flags] [key=value ...]``.

Every subcommand writes its results to files and exits 0 on success; any
failure prints a single ``hook: error: ...`` line and exits 1.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import analysis, netpbm
from . import tensor as T
from .config import SHAPE_KINDS, ConfigError, RunConfig, load_run_config
from .data import SceneSpec, load_manifest, write_dataset
from .macs import count_macs, instrumented_macs
from .model import HookModel
from .training import evaluate, load_checkpoint, save_checkpoint, train_loop


class CliError(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"hook: error: {message}\n")


def scene_spec(cfg: RunConfig) -> SceneSpec:
    d = cfg.data
    if not 1 <= d.classes <= len(SHAPE_KINDS):
        raise ConfigError(f"data.classes must be in [1, {len(SHAPE_KINDS)}], got {d.classes}")
    return SceneSpec(height=d.size, width=d.size, kinds=SHAPE_KINDS[:d.classes],
                     min_objects=d.min_objects, max_objects=d.max_objects,
                     min_object_size=d.min_object_size, max_object_size=d.max_object_size,
                     texture=d.texture, jitter=d.jitter, seed_size=cfg.model.opm.seed_size).validate()


def _run_config(args, **flag_overrides) -> RunConfig:
    pairs = list(args.overrides)
    for bad in pairs:
        if "=" not in bad:
            raise ConfigError(f"override {bad!r} is not of the form key=value")
    extra = [f"{k} = {v}" for k, v in flag_overrides.items() if v is not None]
    return load_run_config(args.config, extra + pairs)


def _read_image(path):
    return netpbm.dequantize(netpbm.read_ppm(path)).transpose(2, 0, 1)


def _require(path, what):
    if not Path(path).exists():
        raise CliError(f"{what} not found: {path}")
    return path


# ------------------------------------------------------------------ commands


def cmd_generate_data(args):
    cfg = _run_config(args, **{"data.count": args.count, "data.size": args.size,
                               "data.classes": args.classes, "data.seed": args.seed})
    rows = write_dataset(args.out, cfg.data.count, scene_spec(cfg), cfg.data.seed)
    print(f"wrote {len(rows)} scenes to {args.out}")


def metrics_path(checkpoint) -> Path:
    p = Path(checkpoint)
    return p.with_name(p.stem + ".metrics.csv")


def cmd_train(args):
    cfg = _run_config(args, **{"train.epochs": args.epochs, "train.seed": args.seed})
    cfg.train.warmup_epochs = min(cfg.train.warmup_epochs, cfg.train.epochs)
    dataset = load_manifest(_require(args.data, "dataset"))
    size = dataset.images.shape[-1]
    if size != cfg.model.image_size:
        raise CliError(f"dataset images are {size}px but the model expects {cfg.model.image_size}px")
    model = HookModel(cfg.model, cfg.train.seed)
    log_path = Path(args.log) if args.log else metrics_path(args.out)
    log = train_loop(model, dataset, cfg.train, log_path=log_path)
    save_checkpoint(args.out, model)
    last = f", final metric {log.rows[-1][3]!r}" if log.rows else ""
    print(f"trained {len(log.rows)} epochs{last}; checkpoint {args.out}, log {log_path}")


def cmd_eval(args):
    model = load_checkpoint(_require(args.model, "checkpoint"))
    dataset = load_manifest(_require(args.data, "dataset"))
    metrics = evaluate(model, dataset)
    text = "".join(f"{k},{v!r}\n" for k, v in metrics.items())
    if args.out:
        Path(args.out).write_text("metric,value\n" + text)
    sys.stdout.write(text)


def _assignment(model, image):
    with T.no_grad():
        tok = model.tokenize(image)
    grid = tok.grid
    return analysis.region_of_token(tok.attention.data[0], grid.rows, grid.cols, grid.seed_size)


def cmd_tokenize_viz(args):
    model = load_checkpoint(_require(args.model, "checkpoint"))
    image = _read_image(_require(args.image, "image"))
    model.eval()
    legend = analysis.write_region_map(args.out, _assignment(model, image))
    print(f"wrote {args.out} and {legend}")


def cmd_analyze(args):
    model = load_checkpoint(_require(args.model, "checkpoint"))
    image = _read_image(_require(args.image, "image"))
    instance = netpbm.read_pgm(_require(args.objects, "object mask"))
    if instance.shape != image.shape[1:]:
        raise CliError(f"object mask {instance.shape} does not match image {image.shape[1:]}")
    objects = analysis.objects_from_instance_mask(instance)
    model.eval()
    assignment = _assignment(model, image)
    regions = assignment.masks()
    label = analysis.classify_scenario(regions, objects)
    scores = analysis.homogeneity_score(regions, objects)
    Path(args.out).write_text(analysis.format_report(label, scores))
    if args.map:
        analysis.write_region_map(args.map, assignment)
    print(f"scenario {label.value}; report {args.out}")


def cmd_count_macs(args):
    if args.model:
        model = load_checkpoint(_require(args.model, "checkpoint"))
        config = model.config
    else:
        config = _run_config(args).model
        model = None
    report = count_macs(config)
    text = report.format()
    if args.verify:
        model = model or HookModel(config, 0)
        counted = instrumented_macs(model)
        if counted != report.total:
            raise CliError(f"analytic MACs {report.total} differ from instrumented {counted}")
        text += f"instrumented,{counted},\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)


# -------------------------------------------------------------------- parser


_CONFIGURABLE = ("generate-data", "train", "count-macs")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hook", description="Homogeneous object tokenizer toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND", parser_class=_Parser)

    def command(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.set_defaults(func=func)
        return p

    def common(p, config=True):
        if config:
            p.add_argument("--config", metavar="PATH", help="key = value config file")
            p.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides (win over --config)")

    p = command("generate-data", cmd_generate_data, "Write a synthetic shape dataset (PPM/PGM + manifest.csv).")
    common(p)
    p.add_argument("--out", required=True, metavar="DIR", help="output directory")
    p.add_argument("--count", type=int, help="number of scenes (data.count)")
    p.add_argument("--size", type=int, help="image side in pixels (data.size)")
    p.add_argument("--classes", type=int, help="number of shape kinds (data.classes)")
    p.add_argument("--seed", type=int, help="generation seed (data.seed)")

    p = command("train", cmd_train, "Train a model and write a checkpoint plus an epoch,loss,lr,metric CSV.")
    common(p)
    p.add_argument("--data", required=True, metavar="DIR", help="dataset directory or manifest.csv")
    p.add_argument("--out", required=True, metavar="PATH", help="checkpoint path")
    p.add_argument("--log", metavar="PATH", help="metric CSV (default: <out stem>.metrics.csv)")
    p.add_argument("--epochs", type=int, help="train.epochs")
    p.add_argument("--seed", type=int, help="init and shuffle seed (train.seed)")

    p = command("eval", cmd_eval, "Evaluate a checkpoint: top1 (classify) or miou (segment).")
    p.add_argument("--model", required=True, metavar="PATH", help="checkpoint")
    p.add_argument("--data", required=True, metavar="DIR", help="dataset directory or manifest.csv")
    p.add_argument("--out", metavar="PATH", help="metric,value CSV")

    p = command("tokenize-viz", cmd_tokenize_viz, "Render the token region map of one image (P6 + legend).")
    p.add_argument("--model", required=True, metavar="PATH", help="checkpoint")
    p.add_argument("--image", required=True, metavar="PATH", help="input P6 image")
    p.add_argument("--out", required=True, metavar="PATH", help="region map P6 output")

    p = command("analyze", cmd_analyze, "Scenario label and homogeneity scores for one image.")
    p.add_argument("--model", required=True, metavar="PATH", help="checkpoint")
    p.add_argument("--image", required=True, metavar="PATH", help="input P6 image")
    p.add_argument("--objects", required=True, metavar="PATH", help="P5 instance-id mask (0 = none)")
    p.add_argument("--out", required=True, metavar="PATH", help="text report")
    p.add_argument("--map", metavar="PATH", help="also write the region map here")

    p = command("count-macs", cmd_count_macs, "Per-module MACs and parameter counts as CSV.")
    common(p)
    p.add_argument("--model", metavar="PATH", help="take the model config from a checkpoint")
    p.add_argument("--out", metavar="PATH", help="CSV output")
    p.add_argument("--verify", action="store_true", help="cross-check against an instrumented forward pass")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    if not hasattr(args, "overrides"):
        args.overrides = []
    # key=value overrides may sit between flags; anything else left over is an error
    stray = [a for a in extra if a.startswith("-") or "=" not in a or args.command not in _CONFIGURABLE]
    if stray:
        parser.error(f"unrecognized arguments: {' '.join(stray)}")
    args.overrides = list(args.overrides) + extra
    try:
        args.func(args)
    except (CliError, ConfigError, OSError, ValueError, FloatingPointError, T.ContractError,
            T.DimensionError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"hook: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
