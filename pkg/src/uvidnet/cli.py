"""Command-line entry point: ``uvidnet <command> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import keyframes as kf
from .config import RunConfig, resolve
from .data import decode_labels, encode_labels, load_records, read_rgb, resize_labels, video_of, write_png
from .metrics import ConfusionMatrix, accumulate, report
from .model import (BASELINE_CONFIG, MERGES, PUBLISHED_PARAMS, build_unet_baseline, build_uvidnet, calibrate,
                    count_flops, count_params, format_ledger)
from .train import (Samples, TransferPlan, apply_transfer, load_checkpoint, model_from_checkpoint, predict,
                    save_checkpoint, train, trainable_count)

log = logging.getLogger("uvidnet")

CONFIG_FLAGS = {
    "encoder": str, "merge": str, "base_width": int, "num_classes": int, "height": int, "width": int,
    "one_by_one": str, "lr": float, "batch_size": int, "epochs": int, "max_steps": int, "seed": int,
    "threshold": float, "palette": str, "source_classes": int,
}


def _add_config_flags(p: argparse.ArgumentParser, names) -> None:
    p.add_argument("--config", type=Path, help="key = value config file (flags override it)")
    for name in names:
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=CONFIG_FLAGS[name], default=None)


def _resolved(args) -> RunConfig:
    overrides = {k: getattr(args, k) for k in CONFIG_FLAGS if hasattr(args, k)}
    return resolve(args.config, **overrides)


def _write_text(path: Path, text: str) -> None:
    kf.atomic_write_text(path, text)


def _echo_config(cfg: RunConfig, out: Path | None) -> None:
    log.info("resolved config:\n%s", cfg.format())
    if out is not None:
        _write_text(out / "config.txt", cfg.format())


# --------------------------------------------------------------------- inspect

def cmd_inspect(args) -> int:
    cfg = _resolved(args)
    if args.calibrate:
        results = calibrate(cfg.arch())
        print("calibration search (U-Net encoder, base 64, 4 classes):")
        for r in results:
            print(("* " if r is results[0] else "  ") + r.describe())
        best = results[0]
        status = "exact match" if best.exact else "closest match"
        counting = "with BN running stats" if best.include_buffers else "learnable"
        print(f"selected ({status}): one_by_one={best.one_by_one} conv_bias={best.conv_bias} "
              f"decoder_bn={best.decoder_bn} counting={counting}")
        print()
    if args.baseline:
        arch = BASELINE_CONFIG.replace(base_width=cfg.base_width, num_classes=cfg.num_classes, height=cfg.height,
                                       width=cfg.width)
        g = build_unet_baseline(arch, seed=None)
        target = PUBLISHED_PARAMS["baseline"]
    else:
        g = build_uvidnet(cfg.arch(), seed=None)
        target = PUBLISHED_PARAMS.get(cfg.merge) if cfg.encoder == "unet" else None
    text = format_ledger(g)
    default_arch = cfg.base_width == 64 and cfg.num_classes == 4
    if target is not None and default_arch:
        text += f"\npublished parameter count: {target:,}"
    text += f"\nseed: {cfg.seed}\n"
    print(text, end="")
    if args.out:
        _write_text(args.out, text)
    return 0


def cmd_compare(args) -> int:
    cfg = _resolved(args)
    counts = {}
    for merge in MERGES:
        g = build_uvidnet(cfg.arch().replace(merge=merge), seed=None)
        counts[merge] = (count_params(g, include_buffers=True), count_params(g), count_flops(g))
    (pm, lm, fm), (pc, lc, fc) = counts["multiplication"], counts["concatenation"]
    lines = [
        f"encoder={cfg.encoder} base_width={cfg.base_width} input={cfg.height}x{cfg.width} seed={cfg.seed}",
        f"{'variant':<15} {'params':>14} {'learnable':>14} {'FLOPs':>18}",
        f"{'multiplication':<15} {pm:>14,} {lm:>14,} {fm:>18,}",
        f"{'concatenation':<15} {pc:>14,} {lc:>14,} {fc:>18,}",
        f"parameter reduction: {pc - pm:,} ({100 * (1 - pm / pc):.2f}%)",
        f"FLOP reduction: {fc - fm:,} ({100 * (1 - fm / fc):.2f}%)",
    ]
    print("\n".join(lines))
    return 0


# ------------------------------------------------------------------- keyframes

def cmd_keyframes(args) -> int:
    cfg = _resolved(args)
    seq = kf.FrameSequence.from_dir(args.frames)
    shots = kf.detect_shots(seq, cfg.threshold)
    pairs = kf.make_pairs(shots)
    records = kf.pair_records(seq, pairs, args.labels)
    kf.write_manifest(args.out, records)
    mean_len = len(seq) / len(shots)
    print(f"frames: {len(seq)}  shots: {len(shots)}  mean shot length: {mean_len:.2f}  "
          f"threshold: {cfg.threshold}  manifest: {args.out}")
    return 0


# ----------------------------------------------------------------------- train

def _load_samples(manifest: Path, cfg: RunConfig) -> Samples:
    records = kf.read_manifest(manifest)
    if not records:
        raise ValueError(f"manifest {manifest} is empty")
    a, b, y = load_records(records, (cfg.height, cfg.width), cfg.get_palette())
    if y is None:
        raise ValueError(f"manifest {manifest} has records without label paths")
    return Samples(a, b, y)


def cmd_train(args) -> int:
    cfg = _resolved(args)
    if cfg.num_classes != len(cfg.get_palette()):
        raise ValueError(f"num_classes={cfg.num_classes} but palette has {len(cfg.get_palette())} classes")
    args.out.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, args.out)
    data = _load_samples(args.train, cfg)
    val = _load_samples(args.val, cfg) if args.val else None
    if args.baseline:
        arch = BASELINE_CONFIG.replace(base_width=cfg.base_width, num_classes=cfg.num_classes, height=cfg.height,
                                       width=cfg.width)
        model = build_unet_baseline(arch, seed=cfg.seed)
    else:
        model = build_uvidnet(cfg.arch(), seed=cfg.seed)
    tcfg = cfg.train_config(log_path=str(args.out / "train_log.csv"), checkpoint_dir=str(args.out))
    result = train(model, data, tcfg, val)
    save_checkpoint(args.out / "final.uvnc", model, meta={"seed": cfg.seed, "step": result.steps})
    best = "n/a" if result.best_miou is None else f"{result.best_miou:.4f} (step {result.best_step})"
    print(f"steps: {result.steps}  final loss: {result.losses[-1]:.6f}  best val mIoU: {best}  seed: {cfg.seed}")
    return 0


def cmd_transfer(args) -> int:
    cfg = _resolved(args)
    args.out.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, args.out)
    ckpt = load_checkpoint(args.checkpoint)
    source = model_from_checkpoint(ckpt)
    target_classes = len(cfg.get_palette())
    if source.config.num_classes != cfg.source_classes:
        raise ValueError(f"source checkpoint has {source.config.num_classes} classes, expected {cfg.source_classes}")
    arch = source.config.replace(num_classes=target_classes)
    cfg.height, cfg.width = arch.height, arch.width
    builder = build_unet_baseline if ckpt.meta.get("kind") == "baseline" else build_uvidnet
    model = builder(arch, seed=cfg.seed)
    plan = TransferPlan.for_model(model, source_classes=cfg.source_classes, lr=cfg.lr)
    optimizer = apply_transfer(model, ckpt, plan, seed=cfg.seed)
    data = _load_samples(args.train, cfg)
    val = _load_samples(args.val, cfg) if args.val else None
    tcfg = cfg.train_config(log_path=str(args.out / "train_log.csv"), checkpoint_dir=str(args.out))
    result = train(model, data, tcfg, val, optimizer=optimizer, meta={"transfer_from": str(args.checkpoint)})
    save_checkpoint(args.out / "final.uvnc", model, meta={"seed": cfg.seed, "step": result.steps,
                                                          "transfer_from": str(args.checkpoint)})
    print(f"trainable head parameters: {trainable_count(model)}  frozen: {len(plan.frozen)} tensors  "
          f"steps: {result.steps}  final loss: {result.losses[-1]:.6f}  seed: {cfg.seed}")
    return 0


# ------------------------------------------------------------------ eval/infer

def _predict_records(model, records, cfg: RunConfig):
    a, b, _ = load_records([kf.ManifestRecord(r.shot, r.input_a, r.input_b, r.target) for r in records],
                           (model.config.height, model.config.width), cfg.get_palette())
    return predict(model, a, b, cfg.batch_size)


def cmd_eval(args) -> int:
    cfg = _resolved(args)
    palette = cfg.get_palette()
    records = kf.read_manifest(args.manifest)
    if not records:
        raise ValueError(f"manifest {args.manifest} is empty")
    if any(r.label is None for r in records):
        raise ValueError("eval needs label paths for every manifest record")
    if args.checkpoint:
        model = model_from_checkpoint(load_checkpoint(args.checkpoint))
        size = (model.config.height, model.config.width)
        preds = _predict_records(model, records, cfg)
    else:
        size = (cfg.height, cfg.width)
        preds = []
        for r in records:
            path = Path(args.predictions) / (Path(r.target).stem + ".png")
            try:
                preds.append(resize_labels(encode_labels(read_rgb(path), palette), size))
            except ValueError as exc:
                raise ValueError(f"{path}: {exc}") from exc
    cms: dict[str, ConfusionMatrix] = {}
    for r, pred in zip(records, preds):
        gt = resize_labels(encode_labels(read_rgb(r.label), palette), size)
        video = video_of(r)
        cms[video] = accumulate(pred, gt, cms.get(video, ConfusionMatrix(len(palette))))
    text, csv_text = report(cms, palette)
    text += f"evaluated at {size[0]}x{size[1]} (network resolution); seed: {cfg.seed}\n"
    print(text, end="")
    if args.out:
        _write_text(args.out / "report.txt", text)
        _write_text(args.out / "report.csv", csv_text)
    return 0


def cmd_infer(args) -> int:
    cfg = _resolved(args)
    records = kf.read_manifest(args.manifest)
    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    palette = cfg.get_palette()
    if model.config.num_classes != len(palette):
        raise ValueError(f"model predicts {model.config.num_classes} classes but palette has {len(palette)}")
    preds = _predict_records(model, records, cfg)
    for r, pred in zip(records, preds):
        write_png(args.out / (Path(r.target).stem + ".png"), decode_labels(pred, palette))
    print(f"wrote {len(records)} label image(s) to {args.out}  seed: {cfg.seed}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uvidnet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    arch = ["encoder", "merge", "base_width", "num_classes", "height", "width", "one_by_one", "seed"]
    optim = ["lr", "batch_size", "epochs", "max_steps", "palette"]

    p = sub.add_parser("inspect", help="per-layer parameter/FLOP ledger")
    _add_config_flags(p, arch)
    p.add_argument("--baseline", choices=["unet"], help="inspect the single-branch U-Net instead")
    p.add_argument("--calibrate", action="store_true", help="run the parameter-count calibration search")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("compare", help="parameter/FLOP deltas between merge variants")
    _add_config_flags(p, arch)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("keyframes", help="detect shots and write the pair manifest")
    _add_config_flags(p, ["threshold", "seed"])
    p.add_argument("--frames", type=Path, required=True, help="directory of frame images")
    p.add_argument("--labels", type=Path, help="directory of color label PNGs named like the frames")
    p.add_argument("--out", type=Path, required=True, help="manifest path")
    p.set_defaults(func=cmd_keyframes)

    p = sub.add_parser("train", help="train a model from a pair manifest")
    _add_config_flags(p, arch + optim)
    p.add_argument("--train", type=Path, required=True)
    p.add_argument("--val", type=Path)
    p.add_argument("--baseline", action="store_true", help="train the single-branch U-Net")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transfer", help="retrain only the head of a pre-trained checkpoint")
    _add_config_flags(p, ["seed", "source_classes"] + optim)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--train", type=Path, required=True)
    p.add_argument("--val", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("eval", help="segmentation metrics report")
    _add_config_flags(p, ["height", "width", "palette", "batch_size", "seed"])
    p.add_argument("--manifest", type=Path, required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--predictions", type=Path, help="directory of predicted color label PNGs")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="write predicted color label PNGs")
    _add_config_flags(p, ["palette", "batch_size", "seed"])
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_infer)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"uvidnet {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
