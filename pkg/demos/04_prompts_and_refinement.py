"""Automatic prompt extraction and pseudo-label refinement.

Point prompts (one positive on the object, nine negatives elsewhere) or a
box around the largest connected component are extracted per class, handed
to a promptable segmenter, and the returned score maps are fused into a
refined pseudo-label. The oracle segmenter stands in for a foundation model
so everything runs without checkpoints.

Run: python demos/04_prompts_and_refinement.py
"""
import numpy as np

from matchseg import (
    OracleSegmenter,
    generate_pseudo_label,
    prompts_from_label,
    refine_pseudo_label,
)
from matchseg.core import ImageSample, LabelMask, SoftPrediction, one_hot
from matchseg.metrics import dice
from matchseg.prompting import bundle_from_prediction

rng = np.random.default_rng(3)

# a two-class scene: an ellipse (class 1) and a rectangle (class 2)
size = 48
yy, xx = np.mgrid[0:size, 0:size]
classes = np.zeros((size, size), dtype=np.int64)
classes[((yy - 15) / 8.0) ** 2 + ((xx - 14) / 10.0) ** 2 <= 1] = 1
classes[28:40, 26:42] = 2
gt = LabelMask(classes, class_count=2)
image = ImageSample(id="scene", pixels=np.clip(0.15 + 0.5 * (classes > 0), 0, 1))

# prompts from the ground-truth label (warm-up style)
bundle = prompts_from_label(gt, rng=rng, mode="points")
for cps in bundle.classes:
    pos = cps.positive_points[0]
    print(f"class {cps.class_id}: positive point at ({pos.row},{pos.col}), "
          f"{len(cps.negative_points)} negative points")

box_bundle = prompts_from_label(gt, rng=rng, mode="box")
for cps in box_bundle.classes:
    print(f"class {cps.class_id}: box {cps.box}")

# a deliberately sloppy teacher prediction: erode class 1, add a stray pixel
sloppy = np.where((classes == 1) & (((yy - 15) / 6.0) ** 2 + ((xx - 14) / 7.0) ** 2 > 1),
                  0, classes)
sloppy[5, 40] = 1  # stray false positive
teacher_probs = one_hot(sloppy, 2) * 0.98 + 0.01
teacher_pred = SoftPrediction(teacher_probs / teacher_probs.sum(axis=0))
pseudo = generate_pseudo_label(teacher_pred, 0.95)
before = np.mean([dice(pseudo.classes == c, gt.classes == c) for c in (1, 2)])

# refine with the oracle: prompts come from the teacher, masks from the oracle
oracle = OracleSegmenter({image.id: gt})
pred_bundle = bundle_from_prediction(teacher_pred, pseudo, rng, mode="points")
refined = refine_pseudo_label(oracle, image, pred_bundle, pseudo)
after = np.mean([dice(refined.classes == c, gt.classes == c) for c in (1, 2)])
print(f"pseudo-label quality vs ground truth: before {before:.4f} -> after {after:.4f}")
print(f"refined label is fully valid: {refined.valid.all()} (origin '{refined.origin}')")
