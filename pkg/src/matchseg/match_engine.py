"""Teacher-student consistency core: pseudo-label generation by confidence
thresholding, masked Dice + cross-entropy losses, the adaptive unsupervised
weight ramp, EMA teacher updates, and the one-strong-view / multi-view
consistency strategies.

Losses are computed over valid pixels only; a pixel whose pseudo-label failed
the confidence gate contributes to neither the loss value nor its gradient.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .core import (
    ORIGIN_TEACHER,
    ImageSample,
    LabelMask,
    PseudoLabel,
    SoftPrediction,
    one_hot,
)
from .unet import UNet, channel_dropout_mask, softmax_channels

DICE_EPS = 1e-5
CE_CLAMP = 1e-12

FIXMATCH = "fixmatch"
UNIMATCH = "unimatch"


@dataclass(frozen=True)
class MatchStrategy:
    """Consistency-training variant and its confidence gate."""

    kind: str = FIXMATCH
    confidence_threshold: float = 0.95
    feature_dropout_p: float = 0.5

    def __post_init__(self):
        if self.kind not in (FIXMATCH, UNIMATCH):
            raise ValueError(f"unknown strategy kind '{self.kind}'")
        if not 0.0 < self.confidence_threshold <= 1.0:
            raise ValueError("confidence_threshold must lie in (0, 1]")
        if not 0.0 <= self.feature_dropout_p < 1.0:
            raise ValueError("feature_dropout_p must lie in [0, 1)")

    @property
    def strong_view_count(self) -> int:
        return 1 if self.kind == FIXMATCH else 2


@dataclass
class TeacherStudent:
    """Paired identical networks; only the student receives gradients."""

    student: UNet
    teacher: UNet
    ema_decay: float = 0.99

    def __post_init__(self):
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in (0, 1)")
        if self.student.spec != self.teacher.spec:
            raise ValueError("student and teacher architectures differ")


def make_teacher_student(spec, seed: int = 0, ema_decay: float = 0.99) -> TeacherStudent:
    student = UNet(spec, seed=seed)
    return TeacherStudent(student=student, teacher=student.copy(), ema_decay=ema_decay)


@dataclass(frozen=True)
class FeaturePerturb:
    """Bottleneck channel-dropout request for a forward pass.

    Either pass ``rng`` to draw a fresh mask or ``mask`` to pin one (used by
    the finite-difference gradient checks so both sides see the same mask).
    """

    p: float = 0.5
    rng: Optional[np.random.Generator] = None
    mask: Optional[np.ndarray] = None


@dataclass(frozen=True)
class LossBreakdown:
    sup_dice: float
    sup_ce: float
    unsup_dice: float
    unsup_ce: float
    lam: float
    total: float


def forward(net: UNet, image: ImageSample,
            feature_perturb: Optional[FeaturePerturb] = None) -> SoftPrediction:
    """Run one image through the network and return channel-softmaxed probabilities."""
    x = image.pixels[None, None, :, :]
    mask = None
    if feature_perturb is not None:
        if feature_perturb.mask is not None:
            mask = feature_perturb.mask
        else:
            if feature_perturb.rng is None:
                raise ValueError("feature perturbation needs an rng or an explicit mask")
            mask = channel_dropout_mask(
                feature_perturb.rng, 1, net.spec.bottleneck_channels,
                feature_perturb.p, dtype=net.dtype,
            )
    logits = net.forward(x, dropout_mask=mask)
    return SoftPrediction(softmax_channels(logits)[0])


def generate_pseudo_label(pred: SoftPrediction, threshold: float = 0.95) -> PseudoLabel:
    """Confidence-gated hard labels: class = argmax, valid = (max prob > T)."""
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must lie in (0, 1]")
    classes = pred.argmax()
    valid = pred.max_prob() > threshold
    return PseudoLabel(classes=classes, valid=valid, origin=ORIGIN_TEACHER,
                       class_count=pred.class_count)


# ---- masked batched loss engine ----------------------------------------

def _target_arrays(target: Union[PseudoLabel, LabelMask]):
    if isinstance(target, PseudoLabel):
        return target.classes, target.valid
    if isinstance(target, LabelMask):
        return target.classes, np.ones(target.shape, dtype=bool)
    raise TypeError(f"unsupported target type {type(target).__name__}")


def dice_ce_batch(probs: np.ndarray, classes: np.ndarray,
                  valid: np.ndarray) -> Tuple[float, float]:
    """Masked soft-Dice and cross-entropy, each averaged over the batch.

    probs: (B, K, H, W) channel simplex; classes: (B, H, W) ints in [0, K);
    valid: (B, H, W) bool. A sample with no valid pixel contributes zero to
    both terms.
    """
    b, k = probs.shape[:2]
    p = probs.reshape(b, k, -1)
    t = classes.reshape(b, -1)
    v = valid.reshape(b, -1)
    vf = v.astype(p.dtype)
    n_valid = vf.sum(axis=1)
    any_valid = n_valid > 0

    y = one_hot(t, k - 1, dtype=p.dtype)            # (K, B, N)
    y = np.moveaxis(y, 0, 1) * vf[:, None, :]       # (B, K, N), masked
    pv = p * vf[:, None, :]

    inter = (pv * y).sum(axis=2)                    # (B, K)
    psum = pv.sum(axis=2)
    tsum = y.sum(axis=2)
    dice_per_class = (2.0 * inter + DICE_EPS) / (psum + tsum + DICE_EPS)
    dice_loss = np.where(any_valid, 1.0 - dice_per_class.mean(axis=1), 0.0)

    p_true = np.take_along_axis(p, t[:, None, :], axis=1)[:, 0, :]
    logp = -np.log(np.maximum(p_true, CE_CLAMP)) * vf
    ce = np.where(any_valid, logp.sum(axis=1) / np.maximum(n_valid, 1.0), 0.0)
    return float(dice_loss.mean()), float(ce.mean())


def dice_ce_grad_batch(logits: np.ndarray, classes: np.ndarray, valid: np.ndarray):
    """Loss values plus the gradient of (dice + ce) with respect to the logits.

    Returns (dice, ce, probs, dlogits). The cross-entropy gradient is the
    exact softmax gradient (p - y); the value-side clamp only guards log(0).
    """
    b, k = logits.shape[:2]
    shape = logits.shape
    probs = softmax_channels(logits)
    p = probs.reshape(b, k, -1)
    t = classes.reshape(b, -1)
    v = valid.reshape(b, -1)
    vf = v.astype(p.dtype)
    n_valid = vf.sum(axis=1)
    any_valid = n_valid > 0

    y = np.moveaxis(one_hot(t, k - 1, dtype=p.dtype), 0, 1) * vf[:, None, :]
    pv = p * vf[:, None, :]
    inter = (pv * y).sum(axis=2)
    psum = pv.sum(axis=2)
    tsum = y.sum(axis=2)
    denom = psum + tsum + DICE_EPS
    dice_per_class = (2.0 * inter + DICE_EPS) / denom
    dice_loss = np.where(any_valid, 1.0 - dice_per_class.mean(axis=1), 0.0)

    p_true = np.take_along_axis(p, t[:, None, :], axis=1)[:, 0, :]
    logp = -np.log(np.maximum(p_true, CE_CLAMP)) * vf
    ce = np.where(any_valid, logp.sum(axis=1) / np.maximum(n_valid, 1.0), 0.0)

    # d(dice)/dp: per class c, -(1/(B*K)) * (2*y*(denom) - (2*inter+eps)) / denom^2
    scale = np.where(any_valid, 1.0, 0.0)[:, None] / (b * k)
    num = 2.0 * inter + DICE_EPS
    g_dice = -(2.0 * y * denom[:, :, None] - num[:, :, None]) / (denom ** 2)[:, :, None]
    g_dice *= (scale[:, :, None] * vf[:, None, :])
    # softmax backward for the dice term
    dz_dice = p * (g_dice - (p * g_dice).sum(axis=1, keepdims=True))

    # exact softmax cross-entropy gradient, masked per sample
    ce_w = np.where(any_valid, 1.0 / np.maximum(n_valid, 1.0), 0.0) / b
    dz_ce = (p - np.moveaxis(one_hot(t, k - 1, dtype=p.dtype), 0, 1))
    dz_ce *= (vf * ce_w[:, None])[:, None, :]

    dlogits = (dz_dice + dz_ce).reshape(shape)
    return float(dice_loss.mean()), float(ce.mean()), probs, dlogits


# ---- single-prediction loss surface -------------------------------------

def dice_loss(pred: SoftPrediction, target: Union[PseudoLabel, LabelMask]) -> float:
    """Soft multi-class Dice loss over valid target pixels (0 if none valid)."""
    classes, valid = _target_arrays(target)
    if pred.shape != classes.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {classes.shape}")
    d, _ = dice_ce_batch(pred.probs[None], classes[None], valid[None])
    return d


def ce_loss(pred: SoftPrediction, target: Union[PseudoLabel, LabelMask]) -> float:
    """Mean cross-entropy over valid target pixels (0 if none valid)."""
    classes, valid = _target_arrays(target)
    if pred.shape != classes.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {classes.shape}")
    _, ce = dice_ce_batch(pred.probs[None], classes[None], valid[None])
    return ce


def supervised_loss(pred: SoftPrediction, label: LabelMask) -> Tuple[float, float]:
    """(dice, ce) of a prediction against a fully-labeled mask."""
    return dice_loss(pred, label), ce_loss(pred, label)


def unsupervised_loss(student_pred: SoftPrediction, pseudo: PseudoLabel) -> Tuple[float, float]:
    """(dice, ce) of a student prediction against a gated pseudo-label."""
    return dice_loss(student_pred, pseudo), ce_loss(student_pred, pseudo)


def lambda_schedule(iteration: int, ramp_length: int, lambda_max: float) -> float:
    """Gaussian ramp-up of the unsupervised weight; constant after the ramp."""
    if ramp_length <= 0:
        raise ValueError("ramp_length must be positive")
    if iteration < 0:
        raise ValueError("iteration must be nonnegative")
    frac = min(iteration, ramp_length) / ramp_length
    return lambda_max * math.exp(-5.0 * (1.0 - frac) ** 2)


def total_loss(sup: Tuple[float, float], unsup: Tuple[float, float],
               lam: float) -> LossBreakdown:
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    sup_dice, sup_ce = sup
    unsup_dice, unsup_ce = unsup
    total = (sup_dice + sup_ce) + lam * (unsup_dice + unsup_ce)
    return LossBreakdown(sup_dice, sup_ce, unsup_dice, unsup_ce, lam, total)


def ema_update(ts: TeacherStudent) -> TeacherStudent:
    """In-place teacher <- a*teacher + (1-a)*student over every parameter.

    Computed incrementally as t += (1-a)*(s-t) so that an identical teacher
    and student are an exact fixed point in floating point.
    """
    a = ts.ema_decay
    for name in ts.student.param_names:
        t = ts.teacher.params[name]
        t += (1.0 - a) * (ts.student.params[name] - t)
    return ts


# ---- strategy step (loss + parameter gradients) --------------------------

def unsup_forward_backward(
    strategy: MatchStrategy,
    student: UNet,
    weak_x: np.ndarray,
    strong_xs: Sequence[np.ndarray],
    pseudo_classes: np.ndarray,
    pseudo_valid: np.ndarray,
    feature_rng: Optional[np.random.Generator] = None,
    feature_mask: Optional[np.ndarray] = None,
):
    """Unsupervised loss terms and student-parameter gradients, batched.

    fixmatch: one strongly-augmented view, one loss term. unimatch: two
    strong views plus a channel-dropout forward of the weak view; the loss
    is the mean of the three terms, all against the same pseudo-label.
    """
    if len(strong_xs) != strategy.strong_view_count:
        raise ValueError(
            f"{strategy.kind} expects {strategy.strong_view_count} strong view(s), "
            f"got {len(strong_xs)}"
        )
    branches = [(x, None) for x in strong_xs]
    if strategy.kind == UNIMATCH:
        if feature_mask is None:
            if feature_rng is None:
                raise ValueError("unimatch needs a feature rng or an explicit mask")
            feature_mask = channel_dropout_mask(
                feature_rng, weak_x.shape[0], student.spec.bottleneck_channels,
                strategy.feature_dropout_p, dtype=student.dtype,
            )
        branches.append((weak_x, feature_mask))
    share = 1.0 / len(branches)
    dice_total = 0.0
    ce_total = 0.0
    grads = None
    for x, mask in branches:
        logits, cache = student.forward_train(x, dropout_mask=mask)
        d, c, _, dlogits = dice_ce_grad_batch(logits, pseudo_classes, pseudo_valid)
        dice_total += share * d
        ce_total += share * c
        g = student.backward(cache, dlogits * share)
        if grads is None:
            grads = g
        else:
            for kname in grads:
                grads[kname] += g[kname]
    return (dice_total, ce_total), grads


def unsup_step(
    strategy: MatchStrategy,
    ts: TeacherStudent,
    weak_image: ImageSample,
    strong_views: Sequence[ImageSample],
    pseudo_source: PseudoLabel,
    feature_rng: Optional[np.random.Generator] = None,
    feature_mask: Optional[np.ndarray] = None,
):
    """Single-sample wrapper around ``unsup_forward_backward``."""
    weak_x = weak_image.pixels[None, None]
    strong_xs = [s.pixels[None, None] for s in strong_views]
    return unsup_forward_backward(
        strategy, ts.student, weak_x, strong_xs,
        pseudo_source.classes[None], pseudo_source.valid[None],
        feature_rng=feature_rng, feature_mask=feature_mask,
    )
