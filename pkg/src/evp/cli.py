"""``evp`` command-line interface.

Subcommands: decompose, synth, train, eval, compare, params.  Exit codes:
0 success, 2 usage or validation failure, 3 numerical failure (a
non-finite loss; the partial run record is still written).  Outputs go
to ``--out`` when given, otherwise under ``$EVP_OUT_DIR`` (default
``./evp_out``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import checkpoint
from .backbone import Backbone
from .config import RunConfig
from .errors import ConfigError, DomainError, IntegrityError, NumericalError
from .frequency import extract_hfc, extract_lfc, hfc_complement, make_hfc_mask, make_lfc_mask
from .metrics import evaluate_dataset
from .prompting import build_strategy, count_params, resolve_strategy, stage_breakdown
from .synthdata import REGIONS, TASKS, SynthSpec, generate, load_dataset, save_dataset, stack
from .tensor import ShapeError
from .training import (
    comparison_table,
    compare,
    fit,
    predict,
    pretrain_backbone,
)

log = logging.getLogger("evp")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
RULE = "=" * 72


def out_dir(path, default_name):
    target = path or os.path.join(os.environ.get("EVP_OUT_DIR", "evp_out"), default_name)
    os.makedirs(target, exist_ok=True)
    return target


def write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def section(title, body):
    print(f"{RULE}\n{title}\n{RULE}\n{body.rstrip()}\n")


def load_config(args):
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return cfg.update(overrides)


def load_split(cfg, split):
    """(images, masks) for a split: the configured directory or a synthetic set."""
    directory = cfg[f"{split}_dir"]
    samples = load_dataset(directory) if directory else generate(cfg.synth_spec(split))
    return stack(samples)


def build_backbone(cfg, train_images=None):
    bb = Backbone.create(cfg.backbone_config(), cfg["seed"])
    if cfg["pretrain_steps"] > 0:
        if train_images is None:
            raise ConfigError("pretraining needs training images")
        pretrain_backbone(bb, train_images, cfg["pretrain_steps"], cfg["seed"])
    return bb


# ---------------------------------------------------------------- decompose


def read_image(path):
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise ConfigError(f"cannot read image {path}: {exc}") from None
    return arr.transpose(2, 0, 1)


def save_png(path, x, stretch=True):
    x = np.asarray(x, dtype=np.float64)
    if stretch:
        lo, hi = x.min(), x.max()
        x = (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)
    x = np.round(np.clip(x, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(x.transpose(1, 2, 0) if x.ndim == 3 else x).save(path)


def cmd_decompose(args):
    from .plotting import decomposition_figure

    if not 0.0 <= args.tau <= 100.0:
        raise DomainError(f"tau is a percentage in [0, 100], got {args.tau:g}")
    tau = args.tau / 100.0
    image = read_image(args.input)
    h, w = image.shape[-2:]
    hfc, lfc = extract_hfc(image, tau), extract_lfc(image, tau)
    mask_h, mask_l = make_hfc_mask(h, w, tau).cells, make_lfc_mask(h, w, tau).cells
    residual = float(np.max(np.abs(hfc + hfc_complement(image, tau) - image)))
    target = out_dir(args.out, "decompose")
    save_png(os.path.join(target, "hfc.png"), hfc)
    save_png(os.path.join(target, "lfc.png"), lfc)
    save_png(os.path.join(target, "mask_h.png"), mask_h, stretch=False)
    save_png(os.path.join(target, "mask_l.png"), mask_l, stretch=False)
    for name, arr in (("hfc", hfc), ("lfc", lfc)):
        np.ascontiguousarray(arr, dtype="<f8").tofile(os.path.join(target, f"{name}.f64"))
    figure = decomposition_figure(os.path.join(target, "decomposition.png"), image, hfc, lfc, mask_h, mask_l, tau)
    body = "\n".join([
        f"input                 {args.input} ({image.shape[0]}x{h}x{w})",
        f"tau                   {args.tau:g}%",
        f"hfc max |value|       {np.max(np.abs(hfc)):.3e}",
        f"reconstruction error  {residual:.3e}",
        f"high-pass kept cells  {int(mask_h.sum())}/{h * w}",
        f"low-pass kept cells   {int(mask_l.sum())}/{h * w}",
        f"sidecars              hfc.f64, lfc.f64 (float64 little-endian, shape {image.shape})",
        f"figure                {figure}",
    ])
    section("frequency decomposition", body)
    return EXIT_OK


# ---------------------------------------------------------------- synth


def cmd_synth(args):
    spec = SynthSpec(task=args.task, count=args.count, size=args.size, seed=args.seed,
                     region=args.region, severity=args.severity)
    samples = generate(spec)
    target = out_dir(args.out, f"{spec.task}_{spec.seed}")
    save_dataset(target, samples)
    frac = np.mean([s.mask.mean() for s in samples])
    degenerate = sum(s.degenerate for s in samples)
    section("synthetic dataset", "\n".join([
        f"task        {spec.task}",
        f"count       {spec.count}",
        f"size        {spec.size}",
        f"seed        {spec.seed}",
        f"severity    {spec.severity:g}",
        f"mask mean   {frac:.4f}",
        f"degenerate  {degenerate}",
        f"directory   {target}",
    ]))
    return EXIT_OK


# ---------------------------------------------------------------- train / eval


def model_from_config(cfg, backbone=None):
    backbone = backbone or Backbone.create(cfg.backbone_config(), cfg["seed"])
    return build_strategy(backbone, cfg.strategy(), cfg["seed"])


def record_paths(ckpt_path):
    stem = os.path.splitext(ckpt_path)[0]
    return stem + ".record.json", stem + ".losses.png"


def cmd_train(args):
    from .plotting import loss_figure

    cfg = load_config(args)
    strategy = cfg.strategy()
    train_cfg = cfg.train_config()
    train = load_split(cfg, "train")
    test = load_split(cfg, "test")
    model = build_strategy(build_backbone(cfg, train[0]), strategy, cfg["seed"])
    ckpt = args.out or os.path.join(out_dir(None, "train"), "model.ckpt")
    os.makedirs(os.path.dirname(os.path.abspath(ckpt)), exist_ok=True)
    record_path, figure_path = record_paths(ckpt)
    try:
        record = fit(model, train[0], train[1], train_cfg, {"train": train, "test": test})
    except NumericalError as exc:
        write_text(record_path, exc.record.to_text())
        raise
    checkpoint.save(ckpt, model.state().items(), cfg.to_text())
    write_text(record_path, record.to_text())
    loss_figure(figure_path, [record])
    section("training run", "\n".join([
        f"strategy    {record.strategy}",
        f"trainable   {record.trainable}",
        f"frozen      {record.frozen}",
        f"final loss  {record.epoch_losses[-1]:.6f}",
        f"checkpoint  {ckpt}",
        f"record      {record_path}",
        f"figure      {figure_path}",
    ]))
    section("metrics (train split)", comparison_table([record], "train"))
    section("metrics (test split)", comparison_table([record], "test"))
    return EXIT_OK


def load_model(path):
    config_text, arrays = checkpoint.load(path)
    cfg = RunConfig.parse(config_text, f"{path}[config]")
    model = model_from_config(cfg)
    try:
        model.load_state(arrays)
    except (KeyError, ValueError) as exc:
        raise IntegrityError(f"{path}: checkpoint does not match its config: {exc}") from None
    return cfg, model


def read_predictions(directory, count):
    preds = []
    for i in range(count):
        path = os.path.join(directory, f"{i:05d}.png")
        if not os.path.exists(path):
            raise IntegrityError(f"missing prediction {path}")
        with Image.open(path) as im:
            preds.append(np.asarray(im.convert("L"), dtype=np.float64) / 255.0)
    return preds


def metric_table(report):
    d = report.as_dict()
    lines = [f"{'metric':<10} {'value':>12}", "-" * 23]
    for key in ("f_beta", "f1", "mae", "ber", "auc"):
        lines.append(f"{key:<10} {d[key]:>12.6f}")
    lines.append(f"{'threshold':<10} {d['threshold']:>12g}")
    lines.append(f"{'pixels':<10} {d['pixels']:>12d}")
    lines.append(f"{'flags':<10} {','.join(d['flags']) or '-':>12}")
    return "\n".join(lines) + "\n"


def cmd_eval(args):
    if (args.checkpoint is None) == (args.predictions is None):
        raise ConfigError("eval needs exactly one of --checkpoint or --predictions")
    if args.checkpoint:
        cfg, model = load_model(args.checkpoint)
        images, masks = stack(load_dataset(args.data)) if args.data else load_split(cfg, "test")
        preds = list(predict(model, images))
        threshold, aggregate = cfg["threshold"], cfg["aggregate"]
    else:
        if not args.data:
            raise ConfigError("--predictions needs --data for the ground-truth masks")
        masks = stack(load_dataset(args.data))[1]
        preds = read_predictions(args.predictions, len(masks))
        threshold, aggregate = 0.5, "per_image"
    report = evaluate_dataset(preds, list(masks), threshold, aggregate)
    text = metric_table(report)
    report_path = args.report or os.path.join(out_dir(None, "eval"), "report.txt")
    os.makedirs(os.path.dirname(os.path.abspath(report_path)), exist_ok=True)
    write_text(report_path, text)
    doc = dict(report.as_dict(), images=len(masks), aggregate=aggregate, source=args.checkpoint or args.predictions)
    write_text(os.path.splitext(report_path)[0] + ".json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    section("evaluation", text + f"report      {report_path}\n")
    return EXIT_OK


# ---------------------------------------------------------------- compare / params


def cmd_compare(args):
    from .plotting import comparison_figure, loss_figure

    cfg = load_config(args)
    base = cfg.strategy()
    names = [s.strip() for s in args.strategies.split(",") if s.strip()]
    if not names:
        raise ConfigError("--strategies is empty")
    strategies = [resolve_strategy(n, base) for n in names]
    train = load_split(cfg, "train")
    test = load_split(cfg, "test")
    backbone = build_backbone(cfg, train[0])
    records = compare(backbone, strategies, train, test, cfg.train_config(), cfg["seed"])
    target = out_dir(args.out, "compare")
    table = comparison_table(records)
    write_text(os.path.join(target, "comparison.txt"), table)
    write_text(os.path.join(target, "comparison.json"),
               "[\n" + ",\n".join(r.to_text().rstrip() for r in records) + "\n]\n")
    comparison_figure(os.path.join(target, "comparison.png"), records)
    loss_figure(os.path.join(target, "losses.png"), records)
    section("strategy comparison (test split)", table)
    section("outputs", "\n".join(os.path.join(target, f) for f in
                                 ("comparison.txt", "comparison.json", "comparison.png", "losses.png")))
    return EXIT_OK


def cmd_params(args):
    cfg = load_config(args)
    model = model_from_config(cfg)
    frozen, trainable = count_params(model)
    lines = [f"{'group':<10} {'frozen':>10} {'trainable':>10}", "-" * 32]
    for key, (f, t) in stage_breakdown(model).items():
        lines.append(f"{key:<10} {f:>10d} {t:>10d}")
    lines.append("-" * 32)
    lines.append(f"{'total':<10} {frozen:>10d} {trainable:>10d}")
    section(f"parameter counts: {model.strategy.label}", "\n".join(lines))
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser():
    parser = argparse.ArgumentParser(prog="evp", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decompose", help="split an image into high/low frequency components")
    p.add_argument("--input", required=True)
    p.add_argument("--tau", type=float, default=25.0, help="mask ratio in percent")
    p.add_argument("--out")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("synth", help="generate a synthetic segmentation dataset")
    p.add_argument("--task", choices=TASKS, default="blur")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--region", choices=REGIONS, default="any")
    p.add_argument("--severity", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)

    for name, func, helptext in (
        ("train", cmd_train, "train one strategy and write a checkpoint"),
        ("compare", cmd_compare, "train several strategies from one backbone"),
        ("params", cmd_params, "print frozen/trainable parameter counts"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        if name != "params":
            p.add_argument("--out")
        if name == "compare":
            p.add_argument("--strategies", required=True, help="comma-separated strategy or variant names")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="evaluate a checkpoint or a directory of predictions")
    p.add_argument("--checkpoint")
    p.add_argument("--predictions", help="directory of %%05d.png probability maps")
    p.add_argument("--data", help="dataset directory (default: the checkpoint's synthetic test split)")
    p.add_argument("--report")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"evp: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DomainError, IntegrityError, ShapeError, OSError) as exc:
        print(f"evp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
