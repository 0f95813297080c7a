"""Shared domain types: images, label masks, soft predictions, pseudo-labels.

All types are immutable value objects built on numpy arrays. Background is
class index 0; foreground classes run 1..C. Pixel intensities live in [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional, Tuple

import numpy as np

if TYPE_CHECKING:  # pragma: no cover - typing only, avoids circular import
    from .augment import GeometricTransform

SIMPLEX_TOL = 1e-6
MIN_DIM = 8

LABELED = "labeled"
UNLABELED = "unlabeled"

ORIGIN_TEACHER = "teacher"
ORIGIN_SEGMENTER = "segmenter"
ORIGIN_GROUND_TRUTH = "ground_truth"


@dataclass(frozen=True)
class ImageSample:
    """A single 2D grayscale image with intensities in [0, 1].

    ``view`` records the chain of geometric transforms that produced this
    sample from the canonical sample with the same ``id`` (None for canonical
    samples). It lets lookup-based components (such as the oracle segmenter)
    recover ground truth in this view's geometry.
    """

    id: str
    pixels: np.ndarray
    spacing: Optional[Tuple[float, float]] = None
    source: str = UNLABELED
    view: "Optional[Tuple[GeometricTransform, ...]]" = field(default=None, compare=False)

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2:
            raise ValueError(f"image '{self.id}' must be 2D, got shape {px.shape}")
        h, w = px.shape
        if h < MIN_DIM or w < MIN_DIM:
            raise ValueError(f"image '{self.id}' must be at least {MIN_DIM}x{MIN_DIM}, got {h}x{w}")
        if not np.isfinite(px).all():
            raise ValueError(f"image '{self.id}' contains non-finite pixels")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError(f"image '{self.id}' has pixels outside [0, 1]")
        if self.source not in (LABELED, UNLABELED):
            raise ValueError(f"unknown sample source '{self.source}'")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.pixels.shape


@dataclass(frozen=True)
class LabelMask:
    """Per-pixel integer class map; 0 is background, 1..class_count foreground."""

    classes: np.ndarray
    class_count: int

    def __post_init__(self):
        cls = np.asarray(self.classes)
        if cls.ndim != 2:
            raise ValueError(f"label mask must be 2D, got shape {cls.shape}")
        if self.class_count < 1:
            raise ValueError("class_count must be a positive integer")
        if not np.issubdtype(cls.dtype, np.integer):
            cls = cls.astype(np.int64)
        if cls.min() < 0 or cls.max() > self.class_count:
            raise ValueError(
                f"label values must lie in [0, {self.class_count}], "
                f"found range [{cls.min()}, {cls.max()}]"
            )
        object.__setattr__(self, "classes", cls)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.classes.shape

    def binary(self, class_id: int) -> np.ndarray:
        return self.classes == class_id


@dataclass(frozen=True)
class SoftPrediction:
    """Per-pixel class probabilities, shape (C+1, H, W), channel-sum 1."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 3:
            raise ValueError(f"prediction must have shape (C+1, H, W), got {p.shape}")
        object.__setattr__(self, "probs", p)

    @property
    def class_count(self) -> int:
        return self.probs.shape[0] - 1

    @property
    def shape(self) -> Tuple[int, int]:
        return self.probs.shape[1:]

    def argmax(self) -> np.ndarray:
        return np.argmax(self.probs, axis=0)

    def max_prob(self) -> np.ndarray:
        return np.max(self.probs, axis=0)


@dataclass(frozen=True)
class PseudoLabel:
    """Hard per-pixel labels plus a validity mask gating which pixels supervise."""

    classes: np.ndarray
    valid: np.ndarray
    origin: str
    class_count: int

    def __post_init__(self):
        cls = np.asarray(self.classes)
        val = np.asarray(self.valid, dtype=bool)
        if cls.shape != val.shape or cls.ndim != 2:
            raise ValueError(f"classes {cls.shape} and valid {val.shape} must be equal 2D shapes")
        if not np.issubdtype(cls.dtype, np.integer):
            cls = cls.astype(np.int64)
        if cls.min() < 0 or cls.max() > self.class_count:
            raise ValueError(f"pseudo-label values must lie in [0, {self.class_count}]")
        if self.origin not in (ORIGIN_TEACHER, ORIGIN_SEGMENTER, ORIGIN_GROUND_TRUTH):
            raise ValueError(f"unknown pseudo-label origin '{self.origin}'")
        object.__setattr__(self, "classes", cls)
        object.__setattr__(self, "valid", val)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.classes.shape


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of a prediction validity check (diagnostic, never raised)."""

    ok: bool
    message: str = ""
    pixel: Optional[Tuple[int, int]] = None


def validate_prediction(pred: SoftPrediction) -> ValidationReport:
    """Check the per-pixel probability-simplex invariant.

    Returns an ok report iff every value is finite, within [0, 1], and every
    pixel's channel sum is 1 within ``SIMPLEX_TOL``. On violation the report
    names the first offending pixel in row-major order.
    """
    p = pred.probs
    finite = np.isfinite(p).all(axis=0)
    in_range = ((p >= 0.0) & (p <= 1.0 + SIMPLEX_TOL)).all(axis=0)
    sums_ok = np.abs(p.sum(axis=0) - 1.0) <= SIMPLEX_TOL
    bad = ~(finite & in_range & sums_ok)
    if not bad.any():
        return ValidationReport(ok=True)
    r, c = np.unravel_index(int(np.argmax(bad)), bad.shape)
    if not finite[r, c]:
        msg = f"non-finite probability at pixel ({r}, {c})"
    elif not in_range[r, c]:
        msg = f"probability outside [0, 1] at pixel ({r}, {c})"
    else:
        msg = f"channel sum {p[:, r, c].sum():.6f} != 1 at pixel ({r}, {c})"
    return ValidationReport(ok=False, message=msg, pixel=(int(r), int(c)))


def one_hot(classes: np.ndarray, class_count: int, dtype=np.float64) -> np.ndarray:
    """One-hot encode a class map to shape (class_count+1, H, W)."""
    classes = np.asarray(classes)
    k = class_count + 1
    out = np.zeros((k,) + classes.shape, dtype=dtype)
    np.put_along_axis(out, classes[None].astype(np.int64), 1.0, axis=0)
    return out


def prediction_from_label(label: LabelMask) -> SoftPrediction:
    """Lift a hard label mask to a one-hot soft prediction."""
    return SoftPrediction(one_hot(label.classes, label.class_count))


def pseudo_from_label(label: LabelMask, origin: str = ORIGIN_GROUND_TRUTH) -> PseudoLabel:
    """Treat a label mask as an all-valid pseudo-label."""
    return PseudoLabel(
        classes=label.classes.copy(),
        valid=np.ones(label.shape, dtype=bool),
        origin=origin,
        class_count=label.class_count,
    )
