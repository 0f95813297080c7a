"""Command-line entry points.

Commands: synth, manifest, train, evaluate, extract-prompts, refine, report,
convert. Every command is deterministic given its config and seed. Exit
codes: 0 success, 1 validation/configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import trainer as tr
from .core import LabelMask, SoftPrediction
from .data import (
    ManifestError,
    SynthConfig,
    build_manifest,
    convert_volume,
    load_hidden_truths,
    load_manifest,
    load_split,
    synth_generate,
    write_label_png,
)
from .match_engine import generate_pseudo_label
from .metrics import aggregate, evaluate_case
from .prompting import bundle_from_prediction, bundle_to_record, prompts_from_label, write_prompt_records
from .segmenter import OracleSegmenter, SegmenterError, ToyPromptSegmenter, refine_pseudo_label
from .trainer import ConfigError, checkpoint_load, config_from_dict, evaluate_pool
from .unet import UNet, UNetSpec, softmax_channels


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="matchseg",
                description="Semi-supervised segmentation training with "
                            "prompt-guided pseudo-label refinement")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic shapes dataset + manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--n-images", type=int, default=60)
    s.add_argument("--image-size", type=int, default=64)
    s.add_argument("--class-count", type=int, default=2)
    s.add_argument("--min-shapes", type=int, default=1)
    s.add_argument("--max-shapes", type=int, default=3)
    s.add_argument("--contrast", type=float, default=0.5)
    s.add_argument("--noise-sigma", type=float, default=0.05)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--labeled-count", type=int, default=2)
    s.add_argument("--val-count", type=int, default=None)
    s.add_argument("--test-count", type=int, default=None)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("manifest", help="build a split manifest for a dataset tree")
    s.add_argument("--dataset-root", required=True)
    s.add_argument("--protocol", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--labeled-count", type=int, default=None)
    s.add_argument("--train-count", type=int, default=None)
    s.add_argument("--val-count", type=int, default=None)
    s.add_argument("--test-count", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_manifest)

    s = sub.add_parser("train", help="run warm-up + interactive training")
    s.add_argument("--config", required=True)
    s.add_argument("--override", action="append", default=[],
                   metavar="KEY=VALUE", help="dotted-path config override")
    s.add_argument("--run-dir", default=None)
    s.add_argument("--resume", default=None, metavar="CKPT")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="evaluate a checkpoint on a manifest split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--out", default="report.json")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("extract-prompts", help="extract prompt records from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="train_unlabeled")
    s.add_argument("--mode", choices=("points", "box"), default="points")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract_prompts)

    s = sub.add_parser("refine", help="refine checkpoint pseudo-labels with a segmenter")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="train_unlabeled")
    s.add_argument("--segmenter", choices=("oracle", "toy"), default="oracle")
    s.add_argument("--prompts-from", choices=("prediction", "labels"), default="prediction")
    s.add_argument("--mode", choices=("points", "box"), default="points")
    s.add_argument("--boundary-noise", type=int, default=0)
    s.add_argument("--failure-rate", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_refine)

    s = sub.add_parser("report", help="print the report table of a finished run")
    s.add_argument("--run-dir", required=True)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("convert", help="convert a .npy/.npz volume into the PNG layout")
    s.add_argument("--volume", required=True)
    s.add_argument("--labels", default=None)
    s.add_argument("--case-id", required=True)
    s.add_argument("--out-root", required=True)
    s.add_argument("--spacing", default=None, help="row_mm,col_mm")
    s.add_argument("--class-count", type=int, default=None)
    s.set_defaults(func=cmd_convert)
    return p


# ---- command implementations ----------------------------------------------

def cmd_synth(args) -> int:
    cfg = SynthConfig(
        n_images=args.n_images, image_size=args.image_size,
        min_shapes=args.min_shapes, max_shapes=args.max_shapes,
        class_count=args.class_count, contrast=args.contrast,
        noise_sigma=args.noise_sigma, seed=args.seed,
    )
    manifest, _ = synth_generate(cfg, args.out, labeled_count=args.labeled_count,
                                 val_count=args.val_count, test_count=args.test_count)
    counts = {s: len(manifest.split_entries(s)) for s in
              ("train_labeled", "train_unlabeled", "val", "test")}
    print(f"wrote {cfg.n_images} cases to {args.out} (splits: {counts})")
    return 0


def cmd_manifest(args) -> int:
    manifest = build_manifest(
        args.dataset_root, args.protocol, seed=args.seed,
        labeled_count=args.labeled_count, train_count=args.train_count,
        val_count=args.val_count, test_count=args.test_count,
        out_path=args.out,
    )
    counts = {s: len(manifest.case_ids(s)) for s in
              ("train_labeled", "train_unlabeled", "val", "test")}
    print(f"wrote manifest {args.out} (cases per split: {counts})")
    return 0


def cmd_train(args) -> int:
    cfg_path = Path(args.config)
    if not cfg_path.exists():
        raise ConfigError(f"config file not found: {cfg_path}")
    with open(cfg_path, "r", encoding="utf-8") as fh:
        cfg_dict = json.load(fh)
    for ov in args.override:
        if "=" not in ov:
            raise ConfigError(f"override '{ov}' is not KEY=VALUE")
        key, value = ov.split("=", 1)
        tr.apply_override(cfg_dict, key, value)
    manifest_ref = cfg_dict.pop("manifest", None)
    run_dir = args.run_dir or cfg_dict.pop("run_dir", None)
    cfg_dict.pop("run_dir", None)
    if manifest_ref is None:
        raise ConfigError("config must contain a 'manifest' path")
    if run_dir is None:
        raise ConfigError("pass --run-dir or set 'run_dir' in the config")
    manifest_path = Path(manifest_ref)
    if not manifest_path.is_absolute():
        manifest_path = (cfg_path.parent / manifest_path).resolve()
    if not manifest_path.exists():
        raise ConfigError(f"manifest file not found: {manifest_path}")
    manifest = load_manifest(manifest_path)
    config = config_from_dict(cfg_dict)
    report = tr.run(config, manifest, run_dir, resume_from=args.resume,
                    manifest_path=str(manifest_path))
    print(f"run complete: test mean dice {report['mean_dice']:.4f} "
          f"(best iteration {report['best_iteration']}), run dir {run_dir}")
    return 0


def _net_from_checkpoint(payload) -> tuple:
    header = payload["header"]
    config = config_from_dict(header["config"])
    spec = UNetSpec(
        depth=config.network.depth,
        base_channels=config.network.base_channels,
        convs_per_block=config.network.convs_per_block,
        class_count=int(header["class_count"]),
        dtype=config.dtype,
    )
    params = {k[len("student."):]: v for k, v in payload["arrays"].items()
              if k.startswith("student.")}
    return UNet(spec, params=params), config


def format_report_table(report: dict) -> str:
    lines = [f"{'class':>6} | {'dice (mean+/-sd)':>20} | {'hd95 (mean+/-sd)':>20}"]
    lines.append("-" * len(lines[0]))
    for pc in report["per_class"]:
        lines.append(
            f"{pc['class']:>6} | {pc['dice_mean']:.4f} +/- {pc['dice_sd']:.4f}    | "
            f"{pc['hd95_mean']:.4f} +/- {pc['hd95_sd']:.4f}"
        )
    lines.append("-" * len(lines[0]))
    lines.append(
        f"{'mean':>6} | {report['mean_dice']:.4f}              | "
        f"{report['mean_hd95']:.4f}  ({report['n_cases']} cases)"
    )
    return "\n".join(lines)


def cmd_evaluate(args) -> int:
    payload = checkpoint_load(args.checkpoint)
    net, config = _net_from_checkpoint(payload)
    manifest = load_manifest(args.manifest)
    if manifest.class_count != net.spec.class_count:
        raise ConfigError(
            f"manifest class_count {manifest.class_count} != checkpoint "
            f"class_count {net.spec.class_count}"
        )
    pool = load_split(manifest, args.split, image_size=config.image_size)
    if not pool:
        raise ConfigError(f"split '{args.split}' is empty")
    if any(lbl is None for _, lbl in pool):
        raise ConfigError(f"split '{args.split}' has entries without labels")
    cases = evaluate_pool(net, pool, manifest.class_count)
    report = aggregate(cases)
    report.update({
        "split": args.split,
        "method": f"{config.strategy.kind}+{config.segmenter.kind}",
        "checkpoint": str(args.checkpoint),
        "per_case_dice": {cm.case_id: cm.mean_dice for cm in cases},
    })
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(format_report_table(report))
    print(f"report written to {args.out}")
    return 0


def cmd_extract_prompts(args) -> int:
    payload = checkpoint_load(args.checkpoint)
    net, config = _net_from_checkpoint(payload)
    manifest = load_manifest(args.manifest)
    pool = load_split(manifest, args.split, image_size=config.image_size)
    if not pool:
        raise ConfigError(f"split '{args.split}' is empty")
    rng = np.random.default_rng(args.seed)
    seg_cfg = config.segmenter
    records = []
    for sample, _ in pool:
        pred = SoftPrediction(softmax_channels(
            net.forward(sample.pixels[None, None].astype(net.dtype)))[0])
        pseudo = generate_pseudo_label(pred, config.strategy.confidence_threshold)
        bundle = bundle_from_prediction(pred, pseudo, rng, mode=args.mode,
                                        n_pos=seg_cfg.n_pos, n_neg=seg_cfg.n_neg,
                                        conf=seg_cfg.prompt_confidence)
        records.append(bundle_to_record(sample.id, bundle))
    write_prompt_records(args.out, records)
    print(f"wrote {len(records)} prompt records to {args.out}")
    return 0


def cmd_refine(args) -> int:
    payload = checkpoint_load(args.checkpoint)
    net, config = _net_from_checkpoint(payload)
    manifest = load_manifest(args.manifest)
    pool = load_split(manifest, args.split, image_size=config.image_size)
    if not pool:
        raise ConfigError(f"split '{args.split}' is empty")
    if args.segmenter == "oracle":
        truths = load_hidden_truths(manifest, image_size=config.image_size)
        seg = OracleSegmenter(truths, boundary_noise=args.boundary_noise,
                              failure_rate=args.failure_rate, seed=args.seed)
    else:
        seg = ToyPromptSegmenter()
    truths_for_scoring = load_hidden_truths(manifest, splits=(args.split,),
                                            image_size=config.image_size)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    seg_cfg = config.segmenter
    results = []
    for sample, label in pool:
        pred = SoftPrediction(softmax_channels(
            net.forward(sample.pixels[None, None].astype(net.dtype)))[0])
        pseudo = generate_pseudo_label(pred, config.strategy.confidence_threshold)
        reference = label if label is not None else truths_for_scoring.get(sample.id)
        if args.prompts_from == "labels":
            if reference is None:
                raise ConfigError(
                    f"--prompts-from labels needs ground truth, none for '{sample.id}'"
                )
            bundle = prompts_from_label(reference, rng=rng, mode=args.mode,
                                        n_pos=seg_cfg.n_pos, n_neg=seg_cfg.n_neg)
        else:
            bundle = bundle_from_prediction(pred, pseudo, rng, mode=args.mode,
                                            n_pos=seg_cfg.n_pos, n_neg=seg_cfg.n_neg,
                                            conf=seg_cfg.prompt_confidence)
        refined = refine_pseudo_label(seg, sample, bundle, pseudo,
                                      threshold=seg_cfg.refine_threshold)
        fname = sample.id.replace("/", "_") + ".png"
        write_label_png(out_dir / fname, refined.classes)
        entry = {"image_id": sample.id, "mask_file": fname}
        if reference is not None:
            before = LabelMask(np.where(pseudo.valid, pseudo.classes, 0),
                               manifest.class_count)
            after = LabelMask(refined.classes, manifest.class_count)
            entry["reference"] = "present"
            entry["dice_before"] = evaluate_case(before, reference).mean_dice
            entry["dice_after"] = evaluate_case(after, reference).mean_dice
        else:
            entry["reference"] = "absent"
        results.append(entry)
    scored = [r for r in results if r["reference"] == "present"]
    quality = {
        "split": args.split,
        "segmenter": args.segmenter,
        "prompts_from": args.prompts_from,
        "n_images": len(results),
        "n_with_reference": len(scored),
        "mean_dice_before": (float(np.mean([r["dice_before"] for r in scored]))
                             if scored else None),
        "mean_dice_after": (float(np.mean([r["dice_after"] for r in scored]))
                            if scored else None),
        "images": results,
    }
    with open(out_dir / "quality_report.json", "w", encoding="utf-8") as fh:
        json.dump(quality, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if scored:
        print(f"refined {len(results)} masks; mean dice "
              f"{quality['mean_dice_before']:.4f} -> {quality['mean_dice_after']:.4f}")
    else:
        print(f"refined {len(results)} masks (no reference labels to score)")
    return 0


def cmd_report(args) -> int:
    path = Path(args.run_dir) / "report.json"
    if not path.exists():
        raise ConfigError(f"no report.json in '{args.run_dir}' (run not finished?)")
    with open(path, "r", encoding="utf-8") as fh:
        report = json.load(fh)
    print(f"split: {report['split']}   method: {report['method']}   "
          f"best iteration: {report.get('best_iteration')}")
    print(format_report_table(report))
    return 0


def cmd_convert(args) -> int:
    spacing = None
    if args.spacing:
        parts = args.spacing.split(",")
        if len(parts) != 2:
            raise ConfigError("--spacing must be 'row_mm,col_mm'")
        spacing = (float(parts[0]), float(parts[1]))
    n = convert_volume(args.volume, args.out_root, args.case_id,
                       label_path=args.labels, spacing=spacing,
                       class_count=args.class_count)
    print(f"wrote {n} slices to {Path(args.out_root) / args.case_id}")
    return 0


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # argparse --help
        return 0 if exc.code in (None, 0) else 1
    except (ConfigError, ManifestError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (SegmenterError, OSError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
