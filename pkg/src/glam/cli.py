"""Command-line entry point.

Subcommands: gradcheck | extract | eval | train-toy | heatmap. Every
command validates its inputs up front, writes deterministic outputs for a
fixed seed, and exits nonzero on any failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import fileio, gradcheck
from .attention import export_heatmap, glam_forward
from .eval import map_protocol
from .head import DEFAULT_SCALES
from .model import init_model
from .tensor import Tensor
from .train import TrainConfig, make_blob_dataset, train_toy


def _parse_scales(text: str) -> list[float]:
    try:
        scales = [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad scale list {text!r}") from None
    if not scales or any(s <= 0 for s in scales):
        raise argparse.ArgumentTypeError("scales must be positive numbers")
    return scales


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="glam",
        description="attention-based image descriptors: extraction, "
                    "training, evaluation, diagnostics")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="compare analytic gradients with "
                                         "finite differences")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--output", type=Path, help="write the JSON report here")

    p = sub.add_parser("extract", help="descriptors for a directory of "
                                       "PPM images")
    p.add_argument("--input", type=Path, required=True,
                   help="directory containing .ppm files")
    p.add_argument("--output", type=Path, required=True,
                   help="descriptor file to write")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--scales", type=_parse_scales,
                   default=list(DEFAULT_SCALES))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", type=Path, help="JSON with model settings")

    p = sub.add_parser("eval", help="mAP / mP@10 for a descriptor file "
                                    "against ground truth")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--protocol", choices=("medium", "hard"), default="medium")
    p.add_argument("--output", type=Path, help="write the JSON report here")

    p = sub.add_parser("train-toy", help="train on synthetic blobs")
    p.add_argument("--config", type=Path, help="JSON training config")
    p.add_argument("--output", type=Path, required=True,
                   help="checkpoint file to write")
    p.add_argument("--loss-csv", type=Path, help="per-step loss curve")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("heatmap", help="attention heatmaps for one image")
    p.add_argument("--input", type=Path, required=True, help="a .ppm image")
    p.add_argument("--output", type=Path, required=True,
                   help="prefix; writes <prefix>_local.pgm and _global.pgm")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _load_model(args):
    if getattr(args, "checkpoint", None):
        return fileio.load_checkpoint(args.checkpoint)
    embed_dim = 512
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        embed_dim = int(raw.get("dims", {}).get("embed",
                                                raw.get("embed_dim", 512)))
    return init_model(embed_dim=embed_dim, seed=args.seed)


def cmd_gradcheck(args) -> int:
    reports, elapsed = gradcheck.run_full_check(tolerance=args.tolerance,
                                                seed=args.seed)
    print(gradcheck.render_table(reports))
    print(f"elapsed: {elapsed:.2f}s")
    if args.output:
        args.output.write_text(gradcheck.to_json(reports, args.tolerance))
    return 0 if all(r.passed for r in reports) else 1


def cmd_extract(args) -> int:
    if not args.input.is_dir():
        print(f"error: {args.input} is not a directory", file=sys.stderr)
        return 1
    paths = sorted(args.input.glob("*.ppm"))
    if not paths:
        print(f"error: no .ppm files under {args.input}", file=sys.stderr)
        return 1
    model = _load_model(args)
    descriptors = []
    for path in paths:
        image = fileio.normalize_image(fileio.read_ppm(path))
        descriptors.append(model.describe(image, path.stem,
                                          scales=args.scales))
    fileio.write_glds(args.output, descriptors)
    print(f"wrote {len(descriptors)} descriptors "
          f"(dim {model.embed_dim}) to {args.output}")
    return 0


def cmd_eval(args) -> int:
    descriptors = fileio.read_glds(args.input)
    ground_truth = fileio.load_ground_truth(args.gt)
    report = map_protocol(descriptors, ground_truth, args.protocol)
    print(f"protocol: {report.protocol}")
    print(f"mAP    : {report.mean_ap:.4f}")
    print(f"mP@10  : {report.mean_p10:.4f}")
    for q, (ap, p10) in report.per_query.items():
        print(f"  {q:<24} AP={ap:.4f}  P@10={p10:.4f}")
    for q in report.skipped:
        print(f"  {q:<24} skipped (no positives)")
    if args.output:
        args.output.write_text(json.dumps(report.to_dict(), indent=2))
    return 0


def cmd_train_toy(args) -> int:
    raw = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    config = TrainConfig.from_dict(raw)
    if args.seed is not None:
        config.seed = args.seed
    dataset = make_blob_dataset(size=config.image_size, seed=config.seed)
    model, losses = train_toy(dataset, config)
    fileio.save_checkpoint(args.output, model,
                           extra={"final_loss": losses[-1],
                                  "initial_loss": losses[0]})
    if args.loss_csv:
        with open(args.loss_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss"])
            for i, loss in enumerate(losses):
                writer.writerow([i, f"{loss:.12g}"])
    print(f"trained {config.steps} steps; loss {losses[0]:.4f} -> "
          f"{losses[-1]:.4f}; checkpoint at {args.output}")
    return 0


def cmd_heatmap(args) -> int:
    model = _load_model(args)
    image = fileio.normalize_image(fileio.read_ppm(args.input))
    from .head import tiny_backbone

    feat = tiny_backbone(Tensor(image), model.backbone)
    _, bundle = glam_forward(feat, model.attention)
    prefix = args.output
    prefix.parent.mkdir(parents=True, exist_ok=True)
    for kind in ("local", "global"):
        heat = export_heatmap(bundle, kind)
        out = prefix.parent / f"{prefix.name}_{kind}.pgm"
        fileio.write_pgm(out, heat)
        print(f"wrote {out}")
    return 0


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "extract": cmd_extract,
    "eval": cmd_eval,
    "train-toy": cmd_train_toy,
    "heatmap": cmd_heatmap,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
