"""Confidence-gated pseudo-labels and the combined loss.

A teacher prediction becomes a training target by taking the per-pixel
argmax and keeping only pixels whose top probability clears the threshold.
Invalid pixels contribute nothing to the Dice/cross-entropy terms, and the
unsupervised term is weighted by a Gaussian ramp.

Run: python demos/03_pseudo_labels_and_losses.py
"""
import numpy as np

from matchseg import (
    UNet,
    UNetSpec,
    dice_loss,
    ce_loss,
    forward,
    generate_pseudo_label,
    lambda_schedule,
    total_loss,
    unsupervised_loss,
)
from matchseg.core import ImageSample

rng = np.random.default_rng(1)

net = UNet(UNetSpec(depth=2, base_channels=8, class_count=2, dtype="float64"), seed=0)
image = ImageSample(id="u0", pixels=rng.random((32, 32)))

pred = forward(net, image)
for threshold in (0.5, 0.8, 0.95):
    pl = generate_pseudo_label(pred, threshold)
    print(f"T={threshold:.2f}: {pl.valid.mean()*100:5.1f}% of pixels pass the gate")

pl = generate_pseudo_label(pred, 0.5)
student_pred = forward(net, image)  # same net here, stand-in for the student
ud, uc = unsupervised_loss(student_pred, pl)
print(f"unsupervised terms vs the gated pseudo-label: dice {ud:.4f}, ce {uc:.4f}")
print(f"(loss against itself is small but nonzero: the gate keeps soft probabilities)")

# the unsupervised weight ramps up over the first sixth of training
total_iters = 6000
ramp = total_iters // 6
for it in (0, ramp // 2, ramp, total_iters - 1):
    lam = lambda_schedule(it, ramp, 0.1)
    print(f"iteration {it:5d}: lambda = {lam:.5f}")

lb = total_loss((0.5, 0.7), (0.2, 0.3), lambda_schedule(ramp, ramp, 0.1))
print(f"loss breakdown: sup {lb.sup_dice:.2f}+{lb.sup_ce:.2f}, "
      f"unsup {lb.unsup_dice:.2f}+{lb.unsup_ce:.2f}, lambda {lb.lam:.2f} "
      f"-> total {lb.total:.4f}")

# dice loss of a perfect prediction is ~0; of a uniform prediction it is large
from matchseg.core import LabelMask, prediction_from_label

gt = LabelMask(rng.integers(0, 3, (16, 16)), class_count=2)
print(f"dice loss, perfect prediction: {dice_loss(prediction_from_label(gt), gt):.2e}")
print(f"ce loss,   perfect prediction: {ce_loss(prediction_from_label(gt), gt):.2e}")
