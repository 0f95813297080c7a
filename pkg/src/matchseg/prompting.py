"""Automatic point/box prompt extraction from predictions or labels.

Prompts are extracted independently per foreground class: one (by default)
positive point from high-confidence pixels of the class plus nine negative
points from everywhere else, or a bounding box around the class's largest
8-connected component. Degenerate inputs fall back gracefully so training
keeps running on early, low-confidence teachers.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .core import (
    ORIGIN_GROUND_TRUTH,
    LabelMask,
    PseudoLabel,
    SoftPrediction,
    prediction_from_label,
    pseudo_from_label,
)

POSITIVE = "positive"
NEGATIVE = "negative"

SOURCE_TEACHER = "teacher_prediction"
SOURCE_GROUND_TRUTH = "ground_truth"

MIN_BOX_SIZE = 3
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class PointPrompt:
    row: int
    col: int
    polarity: str

    def __post_init__(self):
        if self.polarity not in (POSITIVE, NEGATIVE):
            raise ValueError(f"unknown polarity '{self.polarity}'")


@dataclass(frozen=True)
class BoxPrompt:
    """Inclusive pixel box (row_min, col_min) .. (row_max, col_max)."""

    row_min: int
    col_min: int
    row_max: int
    col_max: int

    def __post_init__(self):
        if self.row_min > self.row_max or self.col_min > self.col_max:
            raise ValueError(f"degenerate box {self}")

    def contains(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        return (
            (rows >= self.row_min) & (rows <= self.row_max)
            & (cols >= self.col_min) & (cols <= self.col_max)
        )


@dataclass(frozen=True)
class ClassPromptSet:
    class_id: int
    points: Tuple[PointPrompt, ...] = ()
    box: Optional[BoxPrompt] = None

    def __post_init__(self):
        if self.class_id < 1:
            raise ValueError("class_id must be a foreground class (>= 1)")
        if not self.points and self.box is None:
            raise ValueError("a class prompt set needs points or a box")
        object.__setattr__(self, "points", tuple(self.points))

    @property
    def positive_points(self) -> List[PointPrompt]:
        return [p for p in self.points if p.polarity == POSITIVE]

    @property
    def negative_points(self) -> List[PointPrompt]:
        return [p for p in self.points if p.polarity == NEGATIVE]


@dataclass(frozen=True)
class PromptBundle:
    classes: Tuple[ClassPromptSet, ...] = ()
    source: str = SOURCE_TEACHER

    def __post_init__(self):
        ids = [c.class_id for c in self.classes]
        if len(ids) != len(set(ids)):
            raise ValueError("at most one prompt set per class")
        if self.source not in (SOURCE_TEACHER, SOURCE_GROUND_TRUTH):
            raise ValueError(f"unknown prompt source '{self.source}'")
        object.__setattr__(self, "classes", tuple(self.classes))

    @property
    def class_ids(self) -> List[int]:
        return [c.class_id for c in self.classes]

    def get(self, class_id: int) -> Optional[ClassPromptSet]:
        for c in self.classes:
            if c.class_id == class_id:
                return c
        return None


def connected_components(binary: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """8-connected component labeling with deterministic label order.

    Returns (labels, sizes): labels is an int array with 0 for background and
    1..n for components ordered by their first pixel in row-major order;
    sizes[i] is the pixel count of component i+1.
    """
    binary = np.asarray(binary, dtype=bool)
    labels, n = ndimage.label(binary, structure=EIGHT_CONNECTED)
    if n == 0:
        return labels.astype(np.int32), np.zeros(0, dtype=np.int64)
    flat = labels.ravel()
    uniq, first_idx = np.unique(flat, return_index=True)
    keep = uniq != 0
    order = uniq[keep][np.argsort(first_idx[keep], kind="stable")]
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[order] = np.arange(1, n + 1, dtype=np.int32)
    relabeled = remap[labels]
    sizes = np.bincount(relabeled.ravel(), minlength=n + 1)[1:].astype(np.int64)
    return relabeled, sizes


def extract_box_prompt(pseudo: PseudoLabel, class_id: int) -> Optional[BoxPrompt]:
    """Tight box of the largest valid component of a class, padded to >= 3x3.

    Ties on component size break toward the earliest first pixel in row-major
    order. Returns None when the class has no valid pixel.
    """
    if not 1 <= class_id <= pseudo.class_count:
        raise ValueError(f"class_id {class_id} outside [1, {pseudo.class_count}]")
    mask = (pseudo.classes == class_id) & pseudo.valid
    if not mask.any():
        return None
    labels, sizes = connected_components(mask)
    comp = labels == (int(np.argmax(sizes)) + 1)
    rows = np.flatnonzero(comp.any(axis=1))
    cols = np.flatnonzero(comp.any(axis=0))
    rmin, rmax = int(rows[0]), int(rows[-1])
    cmin, cmax = int(cols[0]), int(cols[-1])
    h, w = mask.shape
    pad_r = max(0, math.ceil((MIN_BOX_SIZE - (rmax - rmin + 1)) / 2))
    pad_c = max(0, math.ceil((MIN_BOX_SIZE - (cmax - cmin + 1)) / 2))
    return BoxPrompt(
        row_min=max(0, rmin - pad_r),
        col_min=max(0, cmin - pad_c),
        row_max=min(h - 1, rmax + pad_r),
        col_max=min(w - 1, cmax + pad_c),
    )


def extract_point_prompts(
    pred: SoftPrediction,
    pseudo: PseudoLabel,
    class_id: int,
    rng: np.random.Generator,
    n_pos: int = 1,
    n_neg: int = 9,
    conf: float = 0.95,
) -> Optional[ClassPromptSet]:
    """Sample positive points on the class and negative points off it.

    Positive candidates are valid pixels of the class whose class probability
    exceeds ``conf``; if none exist, the single highest-probability pixel of
    the class is used instead. Returns None when the class is absent from the
    pseudo-label. Sampling is uniform without replacement and deterministic
    given the generator state.
    """
    if not 1 <= class_id <= pseudo.class_count:
        raise ValueError(f"class_id {class_id} outside [1, {pseudo.class_count}]")
    if pred.shape != pseudo.shape:
        raise ValueError(f"prediction shape {pred.shape} != pseudo shape {pseudo.shape}")
    cls_mask = pseudo.classes == class_id
    prob = pred.probs[class_id]
    pos_pool = np.flatnonzero(cls_mask & pseudo.valid & (prob > conf))
    if pos_pool.size == 0:
        if not cls_mask.any():
            return None
        masked = np.where(cls_mask, prob, -np.inf)
        pos_idx = np.array([int(np.argmax(masked))])
    else:
        take = min(n_pos, pos_pool.size)
        pos_idx = np.sort(rng.choice(pos_pool, size=take, replace=False))
    neg_pool = np.flatnonzero(~cls_mask)
    take = min(n_neg, neg_pool.size)
    neg_idx = np.sort(rng.choice(neg_pool, size=take, replace=False)) if take else np.zeros(0, int)

    w = pseudo.shape[1]
    points = [PointPrompt(int(i // w), int(i % w), POSITIVE) for i in pos_idx]
    points += [PointPrompt(int(i // w), int(i % w), NEGATIVE) for i in neg_idx]
    return ClassPromptSet(class_id=class_id, points=tuple(points))


def bundle_from_prediction(
    pred: SoftPrediction,
    pseudo: PseudoLabel,
    rng: np.random.Generator,
    mode: str = "points",
    n_pos: int = 1,
    n_neg: int = 9,
    conf: float = 0.95,
    source: str = SOURCE_TEACHER,
) -> PromptBundle:
    """Per-class prompt extraction over every foreground class; absent classes
    are omitted from the bundle."""
    if mode not in ("points", "box"):
        raise ValueError(f"unknown prompt mode '{mode}'")
    sets = []
    for c in range(1, pseudo.class_count + 1):
        if mode == "points":
            cps = extract_point_prompts(pred, pseudo, c, rng, n_pos, n_neg, conf)
        else:
            box = extract_box_prompt(pseudo, c)
            cps = ClassPromptSet(class_id=c, box=box) if box is not None else None
        if cps is not None:
            sets.append(cps)
    return PromptBundle(classes=tuple(sets), source=source)


def prompts_from_label(
    label: LabelMask,
    pred_like_confidence: Optional[SoftPrediction] = None,
    rng: Optional[np.random.Generator] = None,
    mode: str = "points",
    n_pos: int = 1,
    n_neg: int = 9,
    conf: float = 0.95,
) -> PromptBundle:
    """Extract prompts from a ground-truth label treated as an all-valid,
    confidence-1 pseudo-label."""
    pseudo = pseudo_from_label(label, origin=ORIGIN_GROUND_TRUTH)
    pred = pred_like_confidence if pred_like_confidence is not None else prediction_from_label(label)
    if rng is None:
        rng = np.random.default_rng(0)
    return bundle_from_prediction(pred, pseudo, rng, mode=mode, n_pos=n_pos,
                                  n_neg=n_neg, conf=conf, source=SOURCE_GROUND_TRUTH)


# ---- line-delimited record serialization ---------------------------------

def bundle_to_record(image_id: str, bundle: PromptBundle) -> dict:
    return {
        "image_id": image_id,
        "source": bundle.source,
        "classes": [
            {
                "class_id": cps.class_id,
                "points": [[p.row, p.col, p.polarity] for p in cps.points],
                "box": (
                    [cps.box.row_min, cps.box.col_min, cps.box.row_max, cps.box.col_max]
                    if cps.box is not None else None
                ),
            }
            for cps in bundle.classes
        ],
    }


def bundle_from_record(record: dict) -> Tuple[str, PromptBundle]:
    sets = []
    for entry in record["classes"]:
        box = BoxPrompt(*entry["box"]) if entry.get("box") else None
        points = tuple(PointPrompt(int(r), int(c), pol) for r, c, pol in entry["points"])
        sets.append(ClassPromptSet(class_id=int(entry["class_id"]), points=points, box=box))
    return record["image_id"], PromptBundle(classes=tuple(sets), source=record["source"])


def write_prompt_records(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_prompt_records(path) -> List[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
