"""Promptable-segmenter abstraction and pseudo-label refinement.

Three implementations share one interface: a deterministic oracle backed by
hidden ground truth (the default test segmenter; supports controlled boundary
noise and failure injection), a tiny trainable logistic segmenter used to
exercise the fine-tuning contract at desk scale, and thin adapters for
external SAM-family checkpoints (optional; they require the upstream torch
packages and are inference-only here).
"""
from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Dict, Mapping, Optional

import numpy as np
from scipy import ndimage

from .augment import bilinear_resize, transform_mask
from .core import ORIGIN_SEGMENTER, ImageSample, LabelMask, PseudoLabel
from .prompting import SOURCE_GROUND_TRUTH, ClassPromptSet, PromptBundle, connected_components

SCORE_CLAMP = 1e-7
DICE_EPS = 1e-5


class SegmenterError(RuntimeError):
    pass


class UnsupportedPromptError(SegmenterError):
    pass


class NotTrainableError(SegmenterError):
    pass


class PromptableSegmenter:
    """Maps (image, per-class prompts) to a foreground score map in [0, 1].

    Implementations must be deterministic given identical inputs and
    parameters, and must return a score map with the input image's shape.
    """

    accepts_points: bool = False
    accepts_boxes: bool = False
    trainable: bool = False

    def check_prompts(self, prompts: ClassPromptSet) -> None:
        if prompts.points and not self.accepts_points:
            raise UnsupportedPromptError(
                f"{type(self).__name__} does not accept point prompts"
            )
        if prompts.box is not None and not self.accepts_boxes:
            raise UnsupportedPromptError(
                f"{type(self).__name__} does not accept box prompts"
            )

    def segment(self, image: ImageSample, prompts: ClassPromptSet) -> np.ndarray:
        raise NotImplementedError

    # checkpointable state; trainable implementations override
    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {}

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        if arrays:
            raise ValueError(f"{type(self).__name__} carries no state")


def segment(seg: PromptableSegmenter, image: ImageSample,
            prompts: ClassPromptSet) -> np.ndarray:
    """Score map for the prompted class; errors on unsupported prompt kinds."""
    seg.check_prompts(prompts)
    scores = seg.segment(image, prompts)
    if scores.shape != image.shape:
        raise SegmenterError(
            f"segmenter returned shape {scores.shape} for image {image.shape}"
        )
    return scores


def _stable_entropy(*parts) -> list:
    h = hashlib.blake2b(digest_size=16)
    for part in parts:
        h.update(str(part).encode("utf-8"))
        h.update(b"\x00")
    d = h.digest()
    return [int.from_bytes(d[i : i + 4], "little") for i in range(0, 16, 4)]


class OracleSegmenter(PromptableSegmenter):
    """Test-only segmenter backed by hidden ground truth.

    With ``boundary_noise=0`` and ``failure_rate=0`` it returns the exact
    binary mask of the prompted class, transformed into the geometry of the
    given view. Corruption draws are a pure function of (seed, image id,
    prompts), so repeated identical calls stay deterministic.
    """

    accepts_points = True
    accepts_boxes = True
    trainable = False

    def __init__(self, truth_lookup: Mapping[str, LabelMask],
                 boundary_noise: int = 0, failure_rate: float = 0.0, seed: int = 0):
        if boundary_noise < 0:
            raise ValueError("boundary_noise must be >= 0")
        if not 0.0 <= failure_rate <= 1.0:
            raise ValueError("failure_rate must lie in [0, 1]")
        self.truth_lookup = dict(truth_lookup)
        self.boundary_noise = boundary_noise
        self.failure_rate = failure_rate
        self.seed = seed

    def _prompt_fingerprint(self, prompts: ClassPromptSet):
        pts = tuple((p.row, p.col, p.polarity) for p in prompts.points)
        box = None if prompts.box is None else (
            prompts.box.row_min, prompts.box.col_min,
            prompts.box.row_max, prompts.box.col_max,
        )
        return (prompts.class_id, pts, box)

    def segment(self, image: ImageSample, prompts: ClassPromptSet) -> np.ndarray:
        self.check_prompts(prompts)
        truth = self.truth_lookup.get(image.id)
        if truth is None:
            raise SegmenterError(f"oracle has no ground truth for image '{image.id}'")
        for t in image.view or ():
            truth = transform_mask(truth, t)
        if truth.shape != image.shape:
            raise SegmenterError(
                f"oracle truth shape {truth.shape} != image shape {image.shape}"
            )
        mask = truth.classes == prompts.class_id
        if self.failure_rate > 0.0 or self.boundary_noise > 0:
            rng = np.random.default_rng(np.random.SeedSequence(
                _stable_entropy(self.seed, image.id, self._prompt_fingerprint(prompts))
            ))
            if self.failure_rate > 0.0 and mask.any() and rng.random() < self.failure_rate:
                mask = self._prompted_component(mask, prompts)
            if self.boundary_noise > 0 and mask.any():
                radius = int(rng.integers(1, self.boundary_noise + 1))
                if rng.random() < 0.5:
                    mask = ndimage.binary_dilation(mask, iterations=radius)
                else:
                    mask = ndimage.binary_erosion(mask, iterations=radius)
        return mask.astype(np.float64)

    @staticmethod
    def _prompted_component(mask: np.ndarray, prompts: ClassPromptSet) -> np.ndarray:
        """Failure mode: keep only the component the prompt actually points at."""
        labels, sizes = connected_components(mask)
        target = 0
        for p in prompts.points:
            if p.polarity == "positive" and labels[p.row, p.col] > 0:
                target = labels[p.row, p.col]
                break
        if target == 0 and prompts.box is not None:
            rr, cc = np.nonzero(mask)
            inside = prompts.box.contains(rr, cc)
            if inside.any():
                target = labels[rr[inside][0], cc[inside][0]]
        if target == 0:
            target = int(np.argmax(sizes)) + 1
        return labels == target


class ToyPromptSegmenter(PromptableSegmenter):
    """Tiny trainable segmenter: a per-pixel logistic model over the image
    intensity and a prompt-derived heat map.

    Trainable parts are the three scalar weights; the heat-map bandwidth is a
    frozen parameter, standing in for a frozen encoder.
    """

    accepts_points = True
    accepts_boxes = True
    trainable = True

    TRAINABLE = ("gain_image", "gain_prompt", "bias")
    FROZEN = ("heat_sigma",)

    def __init__(self, gain_image: float = 1.0, gain_prompt: float = 1.0,
                 bias: float = -1.0, heat_sigma: float = 4.0):
        self.params = {
            "gain_image": np.float64(gain_image),
            "gain_prompt": np.float64(gain_prompt),
            "bias": np.float64(bias),
            "heat_sigma": np.float64(heat_sigma),
        }

    def _heat(self, shape, prompts: ClassPromptSet) -> np.ndarray:
        h, w = shape
        rr, cc = np.mgrid[0:h, 0:w]
        heat = np.zeros(shape, dtype=np.float64)
        sig2 = 2.0 * float(self.params["heat_sigma"]) ** 2
        for p in prompts.points:
            bump = np.exp(-((rr - p.row) ** 2 + (cc - p.col) ** 2) / sig2)
            heat += bump if p.polarity == "positive" else -bump
        if prompts.box is not None:
            heat += prompts.box.contains(rr, cc).astype(np.float64)
        return heat

    def _scores(self, image: ImageSample, prompts: ClassPromptSet):
        heat = self._heat(image.shape, prompts)
        act = (
            float(self.params["gain_image"]) * image.pixels
            + float(self.params["gain_prompt"]) * heat
            + float(self.params["bias"])
        )
        return 1.0 / (1.0 + np.exp(-act)), heat

    def segment(self, image: ImageSample, prompts: ClassPromptSet) -> np.ndarray:
        self.check_prompts(prompts)
        scores, _ = self._scores(image, prompts)
        return scores

    def finetune_step(self, image: ImageSample, gt: LabelMask,
                      bundle: PromptBundle, lr: float) -> float:
        total = 0.0
        grads = {name: 0.0 for name in self.TRAINABLE}
        for cps in bundle.classes:
            target = (gt.classes == cps.class_id).astype(np.float64)
            scores, heat = self._scores(image, cps)
            n = scores.size
            s_sum = scores.sum()
            t_sum = target.sum()
            inter = (scores * target).sum()
            denom = s_sum + t_sum + DICE_EPS
            dice_l = 1.0 - (2.0 * inter + DICE_EPS) / denom
            sc = np.clip(scores, SCORE_CLAMP, 1.0 - SCORE_CLAMP)
            bce = float(np.mean(-(target * np.log(sc) + (1 - target) * np.log(1 - sc))))
            total += dice_l + bce
            # d(dice)/ds then through the sigmoid; bce gradient is (s - t)/n
            d_dice_ds = -(2.0 * target * denom - (2.0 * inter + DICE_EPS)) / denom ** 2
            da = d_dice_ds * scores * (1.0 - scores) + (scores - target) / n
            grads["gain_image"] += float((da * image.pixels).sum())
            grads["gain_prompt"] += float((da * heat).sum())
            grads["bias"] += float(da.sum())
        if lr != 0.0:
            for name in self.TRAINABLE:
                self.params[name] = np.float64(self.params[name] - lr * grads[name])
        return float(total)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {k: np.asarray(v, dtype=np.float64) for k, v in self.params.items()}

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        for k in self.params:
            if k not in arrays:
                raise ValueError(f"missing segmenter parameter '{k}'")
            self.params[k] = np.float64(arrays[k])


class ExternalSegmenterAdapter(PromptableSegmenter):
    """Adapter around an external SAM-family backend.

    'sam' accepts point prompts, 'medsam' accepts box prompts. Images and
    score maps are resampled bilinearly between the training resolution and
    the backend's native resolution. The upstream image encoder stays frozen;
    desk-scale fine-tuning is exercised through ``ToyPromptSegmenter``, so
    these adapters are inference-only.
    """

    def __init__(self, kind: str, backend, native_size: Optional[int] = None):
        if kind not in ("sam", "medsam"):
            raise ValueError(f"unknown external segmenter kind '{kind}'")
        self.kind = kind
        self.backend = backend
        self.native_size = native_size
        self.accepts_points = kind == "sam"
        self.accepts_boxes = kind == "medsam"

    def segment(self, image: ImageSample, prompts: ClassPromptSet) -> np.ndarray:
        self.check_prompts(prompts)
        pixels = image.pixels
        h, w = pixels.shape
        sr = sc = 1.0
        if self.native_size and (h, w) != (self.native_size, self.native_size):
            sr = self.native_size / h
            sc = self.native_size / w
            pixels = np.clip(bilinear_resize(pixels, (self.native_size, self.native_size)), 0, 1)
        points = [(p.row * sr, p.col * sc, p.polarity == "positive") for p in prompts.points]
        box = None
        if prompts.box is not None:
            box = (prompts.box.row_min * sr, prompts.box.col_min * sc,
                   prompts.box.row_max * sr, prompts.box.col_max * sc)
        scores = np.asarray(self.backend.predict(pixels, points=points, box=box), dtype=np.float64)
        if scores.shape != pixels.shape:
            raise SegmenterError(f"backend returned shape {scores.shape}")
        if scores.shape != (h, w):
            scores = bilinear_resize(scores, (h, w))
        return np.clip(scores, 0.0, 1.0)


def load_external_segmenter(kind: str, checkpoint_path, device: str = "cpu",
                            native_size: int = 1024) -> ExternalSegmenterAdapter:
    """Build a SAM/MedSAM adapter from a published checkpoint file.

    Requires the optional 'torch' and 'segment_anything' packages at runtime;
    the checkpoint must be in the upstream model's published serialization.
    """
    if kind not in ("sam", "medsam"):
        raise ValueError(f"unknown external segmenter kind '{kind}'")
    path = Path(checkpoint_path)
    if not path.exists():
        raise FileNotFoundError(f"segmenter checkpoint not found: {path}")
    try:
        import torch  # noqa: F401
        from segment_anything import SamPredictor, sam_model_registry
    except ImportError as exc:
        raise SegmenterError(
            "external segmenter support requires the optional 'torch' and "
            f"'segment_anything' packages: {exc}"
        ) from exc

    class _SamBackend:
        def __init__(self):
            import torch
            model_type = "vit_b" if kind == "medsam" else "vit_h"
            try:
                sam = sam_model_registry[model_type](checkpoint=str(path))
            except (RuntimeError, KeyError) as exc:
                raise SegmenterError(f"incompatible checkpoint '{path}': {exc}") from exc
            sam.to(device)
            sam.eval()
            self.predictor = SamPredictor(sam)
            self.torch = torch

        def predict(self, pixels, points, box):
            img8 = np.repeat((pixels * 255.0).astype(np.uint8)[:, :, None], 3, axis=2)
            self.predictor.set_image(img8)
            coords = labels = sam_box = None
            if points:
                # SAM expects (x, y) = (col, row)
                coords = np.array([[c, r] for r, c, _ in points], dtype=np.float64)
                labels = np.array([1 if pos else 0 for _, _, pos in points], dtype=np.int64)
            if box is not None:
                rmin, cmin, rmax, cmax = box
                sam_box = np.array([cmin, rmin, cmax, rmax], dtype=np.float64)
            masks, _, _ = self.predictor.predict(
                point_coords=coords, point_labels=labels, box=sam_box,
                multimask_output=False, return_logits=True,
            )
            return 1.0 / (1.0 + np.exp(-masks[0]))

    return ExternalSegmenterAdapter(kind, _SamBackend(), native_size=native_size)


def refine_pseudo_label(seg: PromptableSegmenter, image: ImageSample,
                        bundle: PromptBundle, fallback: PseudoLabel,
                        threshold: float = 0.5) -> PseudoLabel:
    """Fuse per-class segmenter score maps into a refined pseudo-label.

    Each prompted class's score map is binarized at ``threshold``; covered
    pixels take the class with the highest score, everything else is
    background, and all pixels are marked valid. Classes absent from the
    bundle keep the fallback's pixels (with the fallback's validity), so
    refinement never degrades classes it was not asked about. An empty
    bundle returns the fallback unchanged.
    """
    if fallback.shape != image.shape:
        raise ValueError(f"fallback shape {fallback.shape} != image shape {image.shape}")
    if not bundle.classes:
        return fallback
    h, w = image.shape
    classes = np.zeros((h, w), dtype=np.int64)
    best = np.full((h, w), -np.inf)
    for cps in sorted(bundle.classes, key=lambda c: c.class_id):
        scores = segment(seg, image, cps)
        covered = (scores >= threshold) & (scores > best)
        classes[covered] = cps.class_id
        best[covered] = scores[covered]
    valid = np.ones((h, w), dtype=bool)
    prompted = set(bundle.class_ids)
    for c in range(1, fallback.class_count + 1):
        if c in prompted:
            continue
        inherit = fallback.classes == c
        classes[inherit] = c
        valid[inherit] = fallback.valid[inherit]
    return PseudoLabel(classes=classes, valid=valid, origin=ORIGIN_SEGMENTER,
                       class_count=fallback.class_count)


def finetune_step(seg: PromptableSegmenter, image: ImageSample, gt: LabelMask,
                  bundle: PromptBundle, lr: float) -> float:
    """One gradient step of the segmenter on ground-truth-derived prompts.

    Per prompted class, the loss is soft Dice plus binary cross-entropy
    between the score map and the class's binary ground truth. Only
    trainable parts move; frozen parameters are untouched.
    """
    if not seg.trainable:
        raise NotTrainableError(f"{type(seg).__name__} is not trainable")
    if bundle.source != SOURCE_GROUND_TRUTH:
        raise ValueError("fine-tuning requires ground-truth-derived prompts")
    return seg.finetune_step(image, gt, bundle, lr)
