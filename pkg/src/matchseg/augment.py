"""Weak and strong augmentation with a shared geometric component.

The weak view of a sample is a geometric transform (quarter-turn rotation,
flips, crop-resize). The strong view applies the *same* geometry plus
intensity-only perturbations, so a mask aligned with the weak view is
pixel-exactly aligned with the strong view as well. Quarter turns keep mask
alignment exact and property-testable; free-angle rotation is deliberately
not sampled (see ``sample_weak_transform``).
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Tuple, Union

import numpy as np

from .core import ImageSample, LabelMask, PseudoLabel


@dataclass(frozen=True)
class GeometricTransform:
    """Invertible-on-crop geometric transform shared by weak and strong views.

    Applied in order: rotate by quarter turns (counterclockwise), flip
    horizontally, flip vertically, crop ``crop_window`` (top, left, h, w),
    resize the crop to ``output_size``.
    """

    rotation_quarter_turns: int
    flip_horizontal: bool
    flip_vertical: bool
    crop_window: Tuple[int, int, int, int]
    output_size: Tuple[int, int]

    def __post_init__(self):
        if self.rotation_quarter_turns not in (0, 1, 2, 3):
            raise ValueError("rotation_quarter_turns must be in {0, 1, 2, 3}")
        top, left, h, w = self.crop_window
        if min(top, left) < 0 or min(h, w) < 1:
            raise ValueError(f"malformed crop window {self.crop_window}")
        if min(self.output_size) < 1:
            raise ValueError(f"malformed output size {self.output_size}")


@dataclass(frozen=True)
class IntensityPerturbation:
    """Pixel-value perturbation for strong views; masks never pass through it."""

    brightness_delta: float = 0.0
    contrast_gain: float = 1.0
    gamma: float = 1.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.contrast_gain <= 0 or self.gamma <= 0 or self.noise_sigma < 0:
            raise ValueError("contrast_gain and gamma must be > 0, noise_sigma >= 0")

    @property
    def is_identity(self) -> bool:
        return (
            self.brightness_delta == 0.0
            and self.contrast_gain == 1.0
            and self.gamma == 1.0
            and self.noise_sigma == 0.0
        )


IDENTITY_PERTURBATION = IntensityPerturbation()


def identity_transform(shape: Tuple[int, int]) -> GeometricTransform:
    h, w = shape
    return GeometricTransform(0, False, False, (0, 0, h, w), (h, w))


def rotated_shape(shape: Tuple[int, int], quarter_turns: int) -> Tuple[int, int]:
    h, w = shape
    return (h, w) if quarter_turns % 2 == 0 else (w, h)


def bilinear_resize(arr: np.ndarray, out_shape: Tuple[int, int]) -> np.ndarray:
    """Resize a 2D float array with bilinear interpolation (half-pixel centers)."""
    h, w = arr.shape
    h2, w2 = out_shape
    if (h, w) == (h2, w2):
        return arr.copy()
    arr = np.asarray(arr, dtype=np.float64)
    r = (np.arange(h2) + 0.5) * (h / h2) - 0.5
    c = (np.arange(w2) + 0.5) * (w / w2) - 0.5
    r0 = np.floor(r).astype(np.int64)
    c0 = np.floor(c).astype(np.int64)
    fr = (r - r0)[:, None]
    fc = (c - c0)[None, :]
    r0c = np.clip(r0, 0, h - 1)
    r1c = np.clip(r0 + 1, 0, h - 1)
    c0c = np.clip(c0, 0, w - 1)
    c1c = np.clip(c0 + 1, 0, w - 1)
    top = arr[np.ix_(r0c, c0c)] * (1 - fc) + arr[np.ix_(r0c, c1c)] * fc
    bot = arr[np.ix_(r1c, c0c)] * (1 - fc) + arr[np.ix_(r1c, c1c)] * fc
    return top * (1 - fr) + bot * fr


def nearest_resize(arr: np.ndarray, out_shape: Tuple[int, int]) -> np.ndarray:
    """Resize a 2D array with nearest-neighbor sampling; values are preserved."""
    h, w = arr.shape
    h2, w2 = out_shape
    if (h, w) == (h2, w2):
        return arr.copy()
    r = np.minimum((np.floor((np.arange(h2) + 0.5) * (h / h2))).astype(np.int64), h - 1)
    c = np.minimum((np.floor((np.arange(w2) + 0.5) * (w / w2))).astype(np.int64), w - 1)
    return arr[np.ix_(r, c)]


def _check_crop(t: GeometricTransform, shape: Tuple[int, int]) -> None:
    hr, wr = rotated_shape(shape, t.rotation_quarter_turns)
    top, left, h, w = t.crop_window
    if top + h > hr or left + w > wr:
        raise ValueError(
            f"crop window {t.crop_window} outside rotated image bounds {hr}x{wr}"
        )


def _apply_geometry(arr: np.ndarray, t: GeometricTransform, interp: str) -> np.ndarray:
    _check_crop(t, arr.shape)
    a = np.rot90(arr, t.rotation_quarter_turns)
    if t.flip_horizontal:
        a = a[:, ::-1]
    if t.flip_vertical:
        a = a[::-1, :]
    top, left, h, w = t.crop_window
    a = a[top : top + h, left : left + w]
    if interp == "bilinear":
        a = bilinear_resize(a, t.output_size)
    else:
        a = nearest_resize(a, t.output_size)
    return np.ascontiguousarray(a)


def sample_weak_transform(rng: np.random.Generator, image_dims: Tuple[int, int],
                          min_crop: float = 0.75) -> GeometricTransform:
    """Sample the shared weak geometry for one image.

    Uniform quarter-turn rotation, independent flips with p=0.5, and a crop
    whose side is uniform in [min_crop, 1.0] of each (rotated) dimension.
    Output size equals the input size so batches stack. Deterministic given
    the generator state.
    """
    h, w = image_dims
    if h < 8 or w < 8:
        raise ValueError(f"image dims must be at least 8x8, got {h}x{w}")
    k = int(rng.integers(0, 4))
    flip_h = bool(rng.random() < 0.5)
    flip_v = bool(rng.random() < 0.5)
    hr, wr = rotated_shape((h, w), k)
    ch = min(hr, max(1, int(round(hr * rng.uniform(min_crop, 1.0)))))
    cw = min(wr, max(1, int(round(wr * rng.uniform(min_crop, 1.0)))))
    top = int(rng.integers(0, hr - ch + 1))
    left = int(rng.integers(0, wr - cw + 1))
    return GeometricTransform(k, flip_h, flip_v, (top, left, ch, cw), (h, w))


def sample_intensity_perturbation(
    rng: np.random.Generator,
    brightness: float = 0.2,
    contrast: Tuple[float, float] = (0.7, 1.3),
    gamma: Tuple[float, float] = (0.7, 1.5),
    noise: float = 0.1,
) -> IntensityPerturbation:
    """Sample strong-view intensity jitter within the configured ranges."""
    return IntensityPerturbation(
        brightness_delta=float(rng.uniform(-brightness, brightness)),
        contrast_gain=float(rng.uniform(*contrast)),
        gamma=float(rng.uniform(*gamma)),
        noise_sigma=float(rng.uniform(0.0, noise)),
    )


def apply_weak(sample: ImageSample, t: GeometricTransform) -> ImageSample:
    """Produce the weakly-augmented view (geometry only, bilinear resampling)."""
    pixels = _apply_geometry(sample.pixels, t, "bilinear")
    pixels = np.clip(pixels, 0.0, 1.0)
    chain = (sample.view or ()) + (t,)
    return ImageSample(id=sample.id, pixels=pixels, spacing=None,
                       source=sample.source, view=chain)


def apply_intensity(pixels: np.ndarray, p: IntensityPerturbation,
                    rng: np.random.Generator) -> np.ndarray:
    """Apply brightness, contrast, gamma, then additive Gaussian noise; clip to [0, 1]."""
    y = pixels
    if p.brightness_delta != 0.0:
        y = y + p.brightness_delta
    if p.contrast_gain != 1.0:
        y = (y - 0.5) * p.contrast_gain + 0.5
    y = np.clip(y, 0.0, 1.0)
    if p.gamma != 1.0:
        y = y ** p.gamma
    if p.noise_sigma > 0.0:
        y = y + rng.normal(0.0, p.noise_sigma, size=y.shape)
    return np.clip(y, 0.0, 1.0)


def apply_strong(sample: ImageSample, t: GeometricTransform,
                 p: IntensityPerturbation, rng: np.random.Generator) -> ImageSample:
    """Produce the strongly-augmented view: weak geometry plus intensity jitter."""
    weak = apply_weak(sample, t)
    if p.is_identity:
        return weak
    pixels = apply_intensity(weak.pixels, p, rng)
    return replace(weak, pixels=pixels)


def transform_mask(mask: Union[LabelMask, PseudoLabel],
                   t: GeometricTransform) -> Union[LabelMask, PseudoLabel]:
    """Apply the same geometry to a mask with nearest-neighbor resampling.

    Class ids are never interpolated; validity masks travel with the classes.
    """
    if isinstance(mask, LabelMask):
        classes = _apply_geometry(mask.classes, t, "nearest")
        return LabelMask(classes=classes, class_count=mask.class_count)
    if isinstance(mask, PseudoLabel):
        classes = _apply_geometry(mask.classes, t, "nearest")
        valid = _apply_geometry(mask.valid, t, "nearest")
        return PseudoLabel(classes=classes, valid=valid, origin=mask.origin,
                           class_count=mask.class_count)
    raise TypeError(f"unsupported mask type {type(mask).__name__}")
