"""Command-line entry point: gen-data, train, eval, predict, plot and ablate.

Exit codes: 0 success, 2 invalid configuration, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from ssp_sam.errors import ConfigError, DataError, InvalidInputError, NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
SEED_ENV = "SSP_SEED"
HELP_WIDTH = 100

log = logging.getLogger("ssp_sam")


def _formatter(prog: str) -> argparse.HelpFormatter:
    # fixed width keeps --help output independent of the terminal
    return argparse.ArgumentDefaultsHelpFormatter(prog, width=HELP_WIDTH)


def env_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from exc


def parse_sets(pairs: list[str] | None) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value
    return out


def resolve_config(args: argparse.Namespace, extra: dict | None = None):
    """Defaults <- config file <- SSP_SEED (when the file sets no seed) <- command line."""
    import yaml

    from ssp_sam.config import flatten, load_config

    overrides: dict = {}
    file_keys: set[str] = set()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        raw = yaml.safe_load(path.read_text()) or {}
        file_keys = set(flatten(raw)) if isinstance(raw, dict) else set()
    seed = getattr(args, "seed", None)
    if seed is None and "train.seed" not in file_keys:
        seed = env_seed()
    if seed is not None:
        overrides["train.seed"] = seed
    overrides.update(extra or {})
    overrides.update(parse_sets(getattr(args, "set", None)))
    return load_config(getattr(args, "config", None), overrides)


def _load_split(root: str, split: str, cfg):
    from ssp_sam.synthdata import load_dataset

    samples = load_dataset(root, split, max_tokens=cfg.backbone.max_tokens)
    if not samples:
        raise DataError(f"no {split} samples under {root}")
    size = samples[0].image.shape[-1]
    if size != cfg.backbone.image_size:
        raise DataError(f"dataset images are {size}px but the model expects {cfg.backbone.image_size}px")
    return samples


# ---------------------------------------------------------------- commands


def cmd_gen_data(args: argparse.Namespace) -> int:
    from ssp_sam.synthdata import write_dataset

    seed = args.seed if args.seed is not None else (env_seed() or 0)
    if args.size < 1:
        raise ConfigError("--size must be >= 1")
    counts = write_dataset(args.out, args.size, args.regime, seed=seed, image_size=args.image_size,
                           val_fraction=args.val_fraction, test_fraction=args.test_fraction)
    print(" ".join(f"{k}={counts.get(k, 0)}" for k in ("train", "val", "test")))
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    from ssp_sam.metrics import write_report
    from ssp_sam.trainer import Trainer, cache_features, evaluate, load_model
    from ssp_sam.warmstart import build_backbones

    extra = {}
    if args.data:
        extra["data.root"] = args.data
    if args.out:
        extra["out_dir"] = args.out
    cfg = resolve_config(args, extra)
    out = Path(cfg.out_dir)
    train = _load_split(cfg.data.root, "train", cfg)
    val = _load_split(cfg.data.root, "val", cfg)
    bb = build_backbones(cfg.backbone, cfg.backbone_cache)
    trainer = Trainer(cfg, bb, cache_features(bb, train), cache_features(bb, val), out)
    phases = ("pretrain", "finetune") if args.phase == "all" else (args.phase,)
    if args.init:
        trainer.load(args.init, resume=False)
    elif args.phase == "finetune":
        print("warning: finetuning without --init; starting from scratch", file=sys.stderr)
    trainer.run(phases)
    best = out / "best"
    model = load_model(best)[0] if best.exists() else trainer.model
    report, _, _ = evaluate(model, trainer.val_data, cfg.train.eval_batch_size)
    write_report(report, out, "val_metrics")
    print(json.dumps(report.to_flat(), sort_keys=True))
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    from PIL import Image

    from ssp_sam.config import save_config
    from ssp_sam.metrics import write_per_sample, write_report
    from ssp_sam.trainer import cache_features, evaluate

    model, cfg, _ = _load_ckpt(args.ckpt)
    samples = _load_split(args.data, args.split, cfg)
    data = cache_features(model.backbones, samples)
    report, results, preds = evaluate(model, data, cfg.train.eval_batch_size, return_masks=True)
    out = Path(args.out) if args.out else Path(args.ckpt) / f"eval_{args.split}"
    (out / "masks").mkdir(parents=True, exist_ok=True)
    write_report(report, out, "metrics")
    write_per_sample(results, out / "per_sample.jsonl")
    for sid, mask in zip(data.ids, preds):
        Image.fromarray(mask.astype(np.uint8) * 255).save(out / "masks" / f"{sid}.png")
    save_config(cfg, out / "config.yaml")
    print(json.dumps(report.to_flat(), sort_keys=True))
    return EXIT_OK


def _load_ckpt(path: str):
    from ssp_sam.trainer import load_model

    if not (Path(path) / "manifest.json").exists():
        raise DataError(f"{path} is not a checkpoint directory")
    return load_model(path)


def predict_mask(model, image: np.ndarray, expression: str) -> np.ndarray:
    """Binary H x W mask for one image/expression pair."""
    import torch

    from ssp_sam.metrics import binarize
    from ssp_sam.synthdata import tokenize

    ids, wmask = tokenize(expression, model.backbones.cfg.max_tokens)
    with torch.no_grad():
        out = model.forward_images(torch.tensor(image)[None], torch.tensor(ids)[None], torch.tensor(wmask)[None])
    return binarize(out.mask_logits[0, 0].numpy())


def overlay(image: np.ndarray, mask: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend red into ``image`` (3 x H x W in [0, 1]) where ``mask`` is set; returns H x W x 3 uint8."""
    rgb = image.transpose(1, 2, 0).astype(np.float64).copy()
    red = np.array([1.0, 0.0, 0.0])
    rgb[mask] = (1 - alpha) * rgb[mask] + alpha * red
    return np.clip(np.round(rgb * 255), 0, 255).astype(np.uint8)


def cmd_predict(args: argparse.Namespace) -> int:
    from PIL import Image

    from ssp_sam.metrics import NO_TARGET_PIXELS
    from ssp_sam.synthdata import load_image

    model, cfg, _ = _load_ckpt(args.ckpt)
    if not Path(args.image).exists():
        raise DataError(f"image {args.image} not found")
    image = load_image(args.image)
    if image.shape[1:] != (cfg.backbone.image_size, cfg.backbone.image_size):
        raise InvalidInputError(f"image is {image.shape[2]}x{image.shape[1]}, model expects "
                                f"{cfg.backbone.image_size}x{cfg.backbone.image_size}")
    mask = predict_mask(model, image, args.expr)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(overlay(image, mask)).save(args.out)
    if args.mask_out:
        Image.fromarray(mask.astype(np.uint8) * 255).save(args.mask_out)
    count = int(mask.sum())
    print(f"positive_pixels={count}")
    print("verdict=no-target" if count < NO_TARGET_PIXELS else "verdict=target")
    return EXIT_OK


CHARTS = ("loss", "giou", "pr")


def read_log(log_dir: str | os.PathLike) -> list[dict]:
    path = Path(log_dir) / "train_log.jsonl"
    if not path.exists():
        raise DataError(f"no training log at {path}")
    records = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    if not records:
        raise DataError(f"training log {path} is empty")
    return records


def cmd_plot(args: argparse.Namespace) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    records = read_log(args.log)
    steps = [r for r in records if "step" in r and "total" in r]
    epochs = [r for r in records if r.get("event") == "epoch" and r.get("val_giou") is not None]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data: dict = {"n_steps": len(steps), "n_val_epochs": len(epochs)}
    written = []
    if "loss" in args.charts:
        if not steps:
            raise DataError("log has no per-step loss records")
        fig, ax = plt.subplots(figsize=(7, 4))
        for key in ("total", "focal", "dice", "l1", "giou"):
            ax.plot(range(len(steps)), [s[key] for s in steps], label=key, linewidth=0.8)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "loss_curves.png", dpi=100)
        plt.close(fig)
        written.append("loss_curves.png")
        data["final_total"] = steps[-1]["total"]
    if "giou" in args.charts or "pr" in args.charts:
        if not epochs:
            raise DataError("log has no validation records")
        data["final_giou"] = epochs[-1]["val_giou"]
        data["giou"] = [e["val_giou"] for e in epochs]
    if "giou" in args.charts:
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot([e["epoch"] for e in epochs], data["giou"], marker="o")
        ax.set_xlabel("finetune epoch")
        ax.set_ylabel("val gIoU")
        fig.tight_layout()
        fig.savefig(out / "val_giou.png", dpi=100)
        plt.close(fig)
        written.append("val_giou.png")
    if "pr" in args.charts:
        last = epochs[-1]["val"]
        pr = {k.split("@")[1]: v for k, v in last.items() if k.startswith("pr@")}
        fig, ax = plt.subplots(figsize=(5, 4))
        ax.bar(list(pr), list(pr.values()), color="tab:red")
        ax.set_ylim(0, 1)
        ax.set_xlabel("IoU threshold")
        ax.set_ylabel("Pr@X")
        fig.tight_layout()
        fig.savefig(out / "pr_at.png", dpi=100)
        plt.close(fig)
        written.append("pr_at.png")
        data["pr_at"] = pr
    data["charts"] = written
    (out / "plot_data.json").write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    print("\n".join(str(out / w) for w in written))
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    from ssp_sam.ablation import format_table, load_specs, run_ablation
    from ssp_sam.config import save_config
    from ssp_sam.trainer import cache_features
    from ssp_sam.warmstart import build_backbones

    base_overrides, specs = load_specs(args.spec)
    extra = dict(base_overrides)
    if args.data:
        extra["data.root"] = args.data
    cfg = resolve_config(args, extra)
    if args.seeds:
        for spec in specs:
            spec.seeds = list(args.seeds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    for spec in specs:
        # a variant may not change the frozen stand-ins, which are shared across runs
        if any(k.startswith("backbone.") for k in spec.overrides):
            raise ConfigError(f"variant {spec.name!r} overrides backbone settings")
    train = _load_split(cfg.data.root, "train", cfg)
    val = _load_split(cfg.data.root, "val", cfg)
    bb = build_backbones(cfg.backbone, cfg.backbone_cache)
    results = run_ablation(specs, cfg, bb, cache_features(bb, train), cache_features(bb, val), out)
    print(format_table(results), end="")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssp-sam", description="Referring segmentation with semantic-spatial prompts.",
                                     formatter_class=_formatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", help="write a synthetic dataset", formatter_class=_formatter)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--size", type=int, default=5000, help="number of samples")
    p.add_argument("--regime", choices=("res", "gres"), default="res", help="single-target or generalized")
    p.add_argument("--seed", type=int, default=None, help=f"dataset seed (falls back to ${SEED_ENV}, then 0)")
    p.add_argument("--image-size", type=int, default=64, help="canvas size in pixels")
    p.add_argument("--val-fraction", type=float, default=0.1, help="fraction of samples in the val split")
    p.add_argument("--test-fraction", type=float, default=0.1, help="fraction of samples in the test split")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run pretraining and/or finetuning", formatter_class=_formatter)
    p.add_argument("--config", default=None, help="YAML or JSON config file")
    p.add_argument("--phase", choices=("pretrain", "finetune", "all"), default="all", help="which phase(s) to run")
    p.add_argument("--init", default=None, help="checkpoint directory to initialise weights from")
    p.add_argument("--data", default=None, help="dataset directory (overrides data.root)")
    p.add_argument("--out", default=None, help="run directory (overrides out_dir)")
    p.add_argument("--seed", type=int, default=None, help=f"training seed (falls back to ${SEED_ENV})")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", default=None, help="config override, repeatable")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split", formatter_class=_formatter)
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", choices=("val", "test"), default="val", help="split to evaluate")
    p.add_argument("--out", default=None, help="output directory; None means CKPT/eval_SPLIT")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="segment one image for one expression", formatter_class=_formatter)
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--image", required=True, help="input PNG")
    p.add_argument("--expr", required=True, help="referring expression")
    p.add_argument("--out", required=True, help="overlay PNG to write")
    p.add_argument("--mask-out", default=None, help="optional binary mask PNG")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("plot", help="draw charts from a training log", formatter_class=_formatter)
    p.add_argument("--log", required=True, help="run directory containing train_log.jsonl")
    p.add_argument("--out", required=True, help="directory for chart images")
    p.add_argument("--charts", nargs="+", choices=CHARTS, default=list(CHARTS), help="charts to draw")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("ablate", help="run the ablation variants listed in a JSON spec", formatter_class=_formatter)
    p.add_argument("--spec", required=True, help="ablations.json")
    p.add_argument("--config", default=None, help="base config file")
    p.add_argument("--data", default=None, help="dataset directory (overrides data.root)")
    p.add_argument("--out", required=True, help="results directory")
    p.add_argument("--seeds", type=int, nargs="+", default=None, help="replace every variant's seed list")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", default=None, help="base config override, repeatable")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, InvalidInputError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        if exc.components:
            print(json.dumps(exc.components, sort_keys=True), file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
