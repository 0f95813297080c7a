"""Segmentation evaluation: Dice overlap, 95th-percentile Hausdorff distance,
per-case and aggregate reporting, and the Wilcoxon signed-rank test.

Empty-mask conventions: both masks empty counts as perfect agreement
(dice 1.0, hd95 0.0); exactly one empty counts as a worst-case miss
(dice 0.0, hd95 = image diagonal). Cases where a convention fired are
flagged so reports stay auditable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

FLAG_BOTH_EMPTY = "both_empty"
FLAG_PRED_EMPTY = "pred_empty"
FLAG_GT_EMPTY = "gt_empty"


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """Dice overlap 2|A∩B| / (|A|+|B|) between two binary masks.

    Both empty -> 1.0; exactly one empty -> 0.0.
    """
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    na = int(a.sum())
    nb = int(b.sum())
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    inter = int(np.logical_and(a, b).sum())
    return 2.0 * inter / (na + nb)


def boundary_mask(mask: np.ndarray) -> np.ndarray:
    """Boundary pixels: mask pixels with a non-mask 4-neighbor or on the border."""
    mask = np.asarray(mask, dtype=bool)
    interior = np.zeros_like(mask)
    if mask.shape[0] > 2 and mask.shape[1] > 2:
        interior[1:-1, 1:-1] = (
            mask[1:-1, 1:-1]
            & mask[:-2, 1:-1]
            & mask[2:, 1:-1]
            & mask[1:-1, :-2]
            & mask[1:-1, 2:]
        )
    return mask & ~interior


def nearest_rank_percentile(values: np.ndarray, q: float) -> float:
    """Nearest-rank percentile: smallest value with at least q% of data <= it."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("percentile of empty set")
    k = max(1, int(math.ceil(q / 100.0 * v.size)))
    return float(v[k - 1])


def _boundary_points(mask: np.ndarray, spacing: Optional[Tuple[float, float]]) -> np.ndarray:
    rr, cc = np.nonzero(boundary_mask(mask))
    pts = np.stack([rr, cc], axis=1).astype(np.float64)
    if spacing is not None:
        pts *= np.asarray(spacing, dtype=np.float64)[None, :]
    return pts


def image_diagonal(shape: Tuple[int, int], spacing: Optional[Tuple[float, float]] = None) -> float:
    h, w = shape
    if spacing is not None:
        return float(math.hypot(h * spacing[0], w * spacing[1]))
    return float(math.hypot(h, w))


def hd95(a: np.ndarray, b: np.ndarray,
         spacing: Optional[Tuple[float, float]] = None) -> float:
    """95th-percentile symmetric Hausdorff distance between mask boundaries.

    Distances are Euclidean between boundary pixels, scaled per axis by
    ``spacing`` when given; each directed distance set is reduced with the
    nearest-rank 95th percentile and the two directions are maxed. Both
    masks empty -> 0.0; exactly one empty -> image diagonal.
    """
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    ea, eb = bool(a.any()), bool(b.any())
    if not ea and not eb:
        return 0.0
    if ea != eb:
        return image_diagonal(a.shape, spacing)
    pa = _boundary_points(a, spacing)
    pb = _boundary_points(b, spacing)
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    return max(nearest_rank_percentile(d_ab, 95.0), nearest_rank_percentile(d_ba, 95.0))


@dataclass
class CaseMetrics:
    """Per-case, per-foreground-class metric values and convention flags."""

    case_id: str
    dice: Dict[int, float] = field(default_factory=dict)
    hd95: Dict[int, float] = field(default_factory=dict)
    flags: Dict[int, Optional[str]] = field(default_factory=dict)

    @property
    def mean_dice(self) -> float:
        return float(np.mean(list(self.dice.values())))

    @property
    def mean_hd95(self) -> float:
        return float(np.mean(list(self.hd95.values())))


def evaluate_case(pred, gt, case_id: str = "",
                  spacing: Optional[Tuple[float, float]] = None) -> CaseMetrics:
    """Per-foreground-class Dice and HD95 between predicted and reference masks."""
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != reference shape {gt.shape}")
    if pred.class_count != gt.class_count:
        raise ValueError(
            f"class_count mismatch: {pred.class_count} vs {gt.class_count}"
        )
    out = CaseMetrics(case_id=case_id)
    for c in range(1, gt.class_count + 1):
        pm = pred.classes == c
        gm = gt.classes == c
        ep, eg = bool(pm.any()), bool(gm.any())
        if not ep and not eg:
            flag = FLAG_BOTH_EMPTY
        elif not ep:
            flag = FLAG_PRED_EMPTY
        elif not eg:
            flag = FLAG_GT_EMPTY
        else:
            flag = None
        out.dice[c] = dice(pm, gm)
        out.hd95[c] = hd95(pm, gm, spacing)
        out.flags[c] = flag
    return out


def aggregate(cases: Sequence[CaseMetrics]) -> dict:
    """Mean +/- population standard deviation per class, plus overall means.

    The overall mean is the mean over classes of the per-class means.
    """
    if not cases:
        raise ValueError("cannot aggregate an empty case list")
    class_ids = sorted(cases[0].dice.keys())
    per_class = []
    flag_counts: Dict[str, int] = {}
    for c in class_ids:
        dvals = np.array([cm.dice[c] for cm in cases], dtype=np.float64)
        hvals = np.array([cm.hd95[c] for cm in cases], dtype=np.float64)
        per_class.append({
            "class": c,
            "dice_mean": float(dvals.mean()),
            "dice_sd": float(dvals.std()),
            "hd95_mean": float(hvals.mean()),
            "hd95_sd": float(hvals.std()),
        })
        for cm in cases:
            f = cm.flags.get(c)
            if f is not None:
                flag_counts[f] = flag_counts.get(f, 0) + 1
    return {
        "per_class": per_class,
        "mean_dice": float(np.mean([pc["dice_mean"] for pc in per_class])),
        "mean_hd95": float(np.mean([pc["hd95_mean"] for pc in per_class])),
        "n_cases": len(cases),
        "convention_flag_counts": flag_counts,
    }


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """Ranks 1..n with ties assigned the mean of their covered ranks."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


EXACT_ENUMERATION_LIMIT = 12


def wilcoxon_signed_rank(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Two-sided Wilcoxon signed-rank p-value for paired samples.

    Zero differences are dropped and tied absolute differences receive
    averaged ranks. For at most ``EXACT_ENUMERATION_LIMIT`` remaining pairs
    the p-value is exact (enumeration of all sign assignments over the
    observed rank multiset); otherwise a normal approximation with tie
    correction and continuity correction is used. All-zero differences
    give p = 1.0.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError("inputs must be 1D sequences of equal length")
    if xs.size < 2:
        raise ValueError("need at least 2 pairs")
    d = xs - ys
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        return 1.0
    ranks = _average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    mu = n * (n + 1) / 4.0
    obs_dev = abs(w_plus - mu)
    if n <= EXACT_ENUMERATION_LIMIT:
        signs = (np.arange(2 ** n)[:, None] >> np.arange(n)[None, :]) & 1
        w_all = signs @ ranks
        p = float(np.mean(np.abs(w_all - mu) >= obs_dev - 1e-12))
        return min(1.0, p)
    # normal approximation with tie correction
    _, counts = np.unique(np.abs(d), return_counts=True)
    tie_term = float(np.sum(counts.astype(np.float64) ** 3 - counts)) / 48.0
    sigma2 = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term
    if sigma2 <= 0:
        return 1.0
    z = (obs_dev - 0.5) / math.sqrt(sigma2)
    p = math.erfc(max(z, 0.0) / math.sqrt(2.0))
    return min(1.0, max(0.0, p))
