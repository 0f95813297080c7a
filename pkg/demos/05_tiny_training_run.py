"""A complete tiny training run: warm-up, interactive refinement, report.

Generates a small synthetic dataset, trains for 120 iterations (40 warm-up +
80 interactive with the oracle segmenter), and prints the resulting test
table. Takes around a minute on one CPU.

Run: python demos/05_tiny_training_run.py
"""
import tempfile
from pathlib import Path

from matchseg import SynthConfig, synth_generate
from matchseg import trainer

workdir = Path(tempfile.mkdtemp(prefix="matchseg_demo_"))
print(f"working under {workdir}")

cfg = SynthConfig(n_images=24, image_size=32, min_shapes=2, max_shapes=3,
                  class_count=2, contrast=0.5, noise_sigma=0.05, seed=4)
manifest, _ = synth_generate(cfg, workdir / "data", labeled_count=2,
                             val_count=4, test_count=4)
print(f"dataset: {cfg.n_images} images, splits "
      f"{ {s: len(manifest.case_ids(s)) for s in ('train_labeled', 'train_unlabeled', 'val', 'test')} }")

run_config = trainer.config_from_dict({
    "total_iterations": 120,
    "warmup_iterations": 40,
    "interactive_iterations": 80,
    "batch_size": 4,
    "image_size": 32,
    "seed": 0,
    "lambda_max": 1.0,
    "eval_every": 30,
    "checkpoint_every": 0,
    "network": {"depth": 2, "base_channels": 6, "convs_per_block": 1},
    "strategy": {"kind": "fixmatch"},
    "segmenter": {"kind": "oracle"},
})
report = trainer.run(run_config, manifest, workdir / "run")

print(f"\nbest iteration {report['best_iteration']} "
      f"(val dice {report['best_val_dice']:.4f})")
for pc in report["per_class"]:
    print(f"class {pc['class']}: test dice {pc['dice_mean']:.4f} +/- {pc['dice_sd']:.4f}  "
          f"hd95 {pc['hd95_mean']:.3f}")
print(f"test mean dice {report['mean_dice']:.4f}")
print(f"\nartifacts: {workdir / 'run'} (config.json, metrics.csv, checkpoints/, report.json)")
