"""Dataset layout, split manifests, ingestion, and a synthetic-shapes generator.

On-disk layout: one directory per case under the dataset root, holding
16-bit grayscale PNG slices plus a small metadata file:

    <root>/<case_id>/img_000.png      image slice
    <root>/<case_id>/lbl_000.png      label slice (optional per case)
    <root>/<case_id>/meta.json        spacing, modality, class_count

Split manifests partition cases (never slices) into train_labeled,
train_unlabeled, val, and test. Labels of train_unlabeled entries are never
read through the manifest, even when present on disk; the separate
``load_hidden_truths`` helper exists only to back the oracle segmenter.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .augment import bilinear_resize, nearest_resize
from .core import LABELED, UNLABELED, ImageSample, LabelMask

SPLITS = ("train_labeled", "train_unlabeled", "val", "test")

MANIFEST_FORMAT = "matchseg-manifest-v1"
PNG_MAX = 65535.0


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    case_id: str
    image: str
    label: Optional[str]
    split: str

    @property
    def sample_id(self) -> str:
        return f"{self.case_id}/{Path(self.image).stem}"


@dataclass
class SplitManifest:
    dataset: str
    protocol: str
    seed: int
    labeled_count: int
    class_count: int
    dataset_root: str
    entries: List[ManifestEntry] = field(default_factory=list)

    def split_entries(self, split: str) -> List[ManifestEntry]:
        if split not in SPLITS:
            raise ManifestError(f"unknown split '{split}', expected one of {SPLITS}")
        return [e for e in self.entries if e.split == split]

    def case_ids(self, split: str) -> List[str]:
        return sorted({e.case_id for e in self.split_entries(split)})

    def to_dict(self) -> dict:
        return {
            "format": MANIFEST_FORMAT,
            "dataset": self.dataset,
            "protocol": self.protocol,
            "seed": self.seed,
            "labeled_count": self.labeled_count,
            "class_count": self.class_count,
            "dataset_root": self.dataset_root,
            "entries": [
                {"case_id": e.case_id, "image": e.image, "label": e.label, "split": e.split}
                for e in self.entries
            ],
        }


def save_manifest(manifest: SplitManifest, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(path) -> SplitManifest:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        d = json.load(fh)
    if d.get("format") != MANIFEST_FORMAT:
        raise ManifestError(f"'{path}' is not a {MANIFEST_FORMAT} file")
    root = Path(d["dataset_root"])
    if not root.is_absolute():
        root = (path.parent / root).resolve()
    return SplitManifest(
        dataset=d["dataset"],
        protocol=d["protocol"],
        seed=int(d["seed"]),
        labeled_count=int(d["labeled_count"]),
        class_count=int(d["class_count"]),
        dataset_root=str(root),
        entries=[
            ManifestEntry(e["case_id"], e["image"], e.get("label"), e["split"])
            for e in d["entries"]
        ],
    )


# ---- PNG slice I/O --------------------------------------------------------

def write_image_png(path, pixels01: np.ndarray) -> None:
    q = np.round(np.clip(pixels01, 0.0, 1.0) * PNG_MAX).astype(np.uint16)
    Image.fromarray(q).save(path)


def write_label_png(path, classes: np.ndarray) -> None:
    Image.fromarray(np.asarray(classes, dtype=np.uint16)).save(path)


def read_image_png(path) -> np.ndarray:
    try:
        arr = np.asarray(Image.open(path))
    except (OSError, ValueError) as exc:
        raise IOError(f"cannot read image '{path}': {exc}") from exc
    return arr.astype(np.float64) / PNG_MAX


def read_label_png(path) -> np.ndarray:
    try:
        arr = np.asarray(Image.open(path))
    except (OSError, ValueError) as exc:
        raise IOError(f"cannot read label '{path}': {exc}") from exc
    return arr.astype(np.int64)


def minmax_normalize(pixels: np.ndarray) -> np.ndarray:
    lo = float(pixels.min())
    hi = float(pixels.max())
    if hi <= lo:
        return np.zeros_like(pixels)
    return (pixels - lo) / (hi - lo)


# ---- protocol table and manifest construction -----------------------------

@dataclass(frozen=True)
class Protocol:
    total_cases: int
    train: int
    val: int
    test: int
    labeled: int
    labeled_slice_filter: Optional[str] = None


PROTOCOLS: Dict[str, Protocol] = {
    "acdc_1": Protocol(100, 70, 10, 20, 1, labeled_slice_filter="ed_slices"),
    "acdc_3": Protocol(100, 70, 10, 20, 3),
    "busi_10": Protocol(547, 330, 47, 170, 10),
    "busi_30": Protocol(547, 330, 47, 170, 30),
    "mrliver_1": Protocol(48, 30, 6, 12, 1),
    "mrliver_3": Protocol(48, 30, 6, 12, 3),
    "mrliver_5": Protocol(48, 30, 6, 12, 5),
}


def list_cases(dataset_root) -> List[str]:
    root = Path(dataset_root)
    if not root.is_dir():
        raise ManifestError(f"dataset root '{root}' is not a directory")
    return sorted(p.name for p in root.iterdir() if p.is_dir() and list(p.glob("img_*.png")))


def _case_meta(root: Path, case_id: str) -> dict:
    meta_path = root / case_id / "meta.json"
    if meta_path.exists():
        with open(meta_path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    return {}


def build_manifest(
    dataset_root,
    protocol: str,
    seed: int = 0,
    labeled_count: Optional[int] = None,
    train_count: Optional[int] = None,
    val_count: Optional[int] = None,
    test_count: Optional[int] = None,
    dataset_name: Optional[str] = None,
    out_path=None,
) -> SplitManifest:
    """Case-level split with the protocol's published counts.

    The labeled subset is chosen by seeded shuffle; splits are disjoint by
    case, and every slice of a case shares its split. ``custom`` protocols
    take explicit counts. When ``out_path`` is given the manifest is written
    there with its provenance (protocol, seed, labeled count).
    """
    root = Path(dataset_root)
    cases = list_cases(root)
    problems: List[str] = []

    if protocol == "custom":
        if None in (labeled_count, train_count, val_count, test_count):
            raise ManifestError(
                "custom protocol requires labeled_count, train_count, val_count, test_count"
            )
        proto = Protocol(train_count + val_count + test_count,
                         train_count, val_count, test_count, labeled_count)
    elif protocol in PROTOCOLS:
        proto = PROTOCOLS[protocol]
    else:
        raise ManifestError(
            f"unknown protocol '{protocol}'; expected one of "
            f"{sorted(PROTOCOLS) + ['custom']}"
        )

    if len(cases) != proto.total_cases:
        problems.append(
            f"expected {proto.total_cases} cases under '{root}', found {len(cases)}"
        )
    if proto.labeled > proto.train:
        problems.append(
            f"labeled count {proto.labeled} exceeds training cases {proto.train}"
        )
    if problems:
        raise ManifestError("manifest construction failed:\n  - " + "\n  - ".join(problems))

    rng = np.random.default_rng(seed)
    perm = [cases[i] for i in rng.permutation(len(cases))]
    train_cases = perm[: proto.train]
    val_cases = perm[proto.train : proto.train + proto.val]
    test_cases = perm[proto.train + proto.val :]
    labeled_cases = set(
        rng.choice(np.array(train_cases, dtype=object), size=proto.labeled, replace=False)
    )

    class_count = 0
    entries: List[ManifestEntry] = []
    for case in cases:
        meta = _case_meta(root, case)
        class_count = max(class_count, int(meta.get("class_count", 0)))
        if case in labeled_cases:
            split = "train_labeled"
        elif case in train_cases:
            split = "train_unlabeled"
        elif case in val_cases:
            split = "val"
        else:
            split = "test"
        img_files = sorted((root / case).glob("img_*.png"))
        slice_filter = None
        if split == "train_labeled" and proto.labeled_slice_filter:
            slice_filter = meta.get(proto.labeled_slice_filter)
        for idx, img in enumerate(img_files):
            if slice_filter is not None and idx not in slice_filter:
                continue
            lbl = img.with_name(img.name.replace("img_", "lbl_"))
            has_label = lbl.exists()
            needs_label = split in ("train_labeled", "val", "test")
            if needs_label and not has_label:
                problems.append(f"missing label file '{lbl}' for split {split}")
                continue
            entries.append(ManifestEntry(
                case_id=case,
                image=f"{case}/{img.name}",
                label=f"{case}/{lbl.name}" if (needs_label and has_label) else None,
                split=split,
            ))
    if problems:
        raise ManifestError("manifest construction failed:\n  - " + "\n  - ".join(problems))
    if class_count == 0:
        class_count = 1

    manifest = SplitManifest(
        dataset=dataset_name or root.name,
        protocol=protocol,
        seed=seed,
        labeled_count=proto.labeled,
        class_count=class_count,
        dataset_root=str(root),
        entries=entries,
    )
    if out_path is not None:
        save_manifest(manifest, out_path)
    return manifest


# ---- slice loading ---------------------------------------------------------

def load_slices(manifest: SplitManifest, entry: ManifestEntry,
                image_size: Optional[int] = None) -> List[Tuple[ImageSample, Optional[LabelMask]]]:
    """Load one manifest entry as (image, optional label) pairs.

    Images are min-max normalized per slice and bilinearly resized to
    ``image_size``; labels are nearest-neighbor resized so class ids are
    preserved exactly. Unlabeled entries never read label files.
    """
    root = Path(manifest.dataset_root)
    meta = _case_meta(root, entry.case_id)
    spacing = meta.get("spacing")
    pixels = minmax_normalize(read_image_png(root / entry.image))
    label = None
    if entry.label is not None:
        classes = read_label_png(root / entry.label)
        if classes.shape != pixels.shape:
            raise IOError(
                f"label shape {classes.shape} != image shape {pixels.shape} "
                f"for '{entry.sample_id}'"
            )
        label = LabelMask(classes=classes, class_count=manifest.class_count)
    if image_size is not None and pixels.shape != (image_size, image_size):
        pixels = np.clip(bilinear_resize(pixels, (image_size, image_size)), 0.0, 1.0)
        if label is not None:
            label = LabelMask(
                classes=nearest_resize(label.classes, (image_size, image_size)),
                class_count=manifest.class_count,
            )
        spacing = None
    sample = ImageSample(
        id=entry.sample_id,
        pixels=pixels,
        spacing=tuple(spacing) if spacing else None,
        source=LABELED if entry.label is not None else UNLABELED,
    )
    return [(sample, label)]


def load_split(manifest: SplitManifest, split: str,
               image_size: Optional[int] = None) -> List[Tuple[ImageSample, Optional[LabelMask]]]:
    out = []
    for entry in manifest.split_entries(split):
        out.extend(load_slices(manifest, entry, image_size=image_size))
    return out


def load_hidden_truths(manifest: SplitManifest, splits: Sequence[str] = SPLITS,
                       image_size: Optional[int] = None) -> Dict[str, LabelMask]:
    """Ground truth for the oracle segmenter, read directly from disk.

    This deliberately bypasses the manifest's unlabeled-label contract: the
    oracle stands in for an external foundation model whose knowledge does
    not come from the training loader. Never use this inside training logic.
    """
    root = Path(manifest.dataset_root)
    truths: Dict[str, LabelMask] = {}
    for split in splits:
        for entry in manifest.split_entries(split):
            lbl_rel = entry.label
            if lbl_rel is None:
                candidate = root / entry.case_id / Path(entry.image).name.replace("img_", "lbl_")
                if not candidate.exists():
                    continue
                lbl_rel = str(candidate.relative_to(root))
            classes = read_label_png(root / lbl_rel)
            if image_size is not None and classes.shape != (image_size, image_size):
                classes = nearest_resize(classes, (image_size, image_size))
            truths[entry.sample_id] = LabelMask(classes=classes, class_count=manifest.class_count)
    return truths


# ---- synthetic-shapes generator -------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """Desk-scale synthetic dataset: bright ellipses/rectangles on a dark
    background, exact labels by construction.

    ``illumination`` adds a random smooth intensity plane and
    ``contrast_jitter`` varies the contrast per image; both default to 0 so
    shape/background intensity relations stay exact. ``invert_fraction``
    makes that share of images use dark shapes on a bright background; a
    labeled pool drawn from the majority mode then systematically
    underrepresents the minority mode, which is what pseudo-label
    refinement is supposed to fix.
    """

    n_images: int = 60
    image_size: int = 64
    min_shapes: int = 1
    max_shapes: int = 3
    class_count: int = 2
    contrast: float = 0.5
    noise_sigma: float = 0.05
    illumination: float = 0.0
    contrast_jitter: float = 0.0
    invert_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_images < 1 or self.image_size < 8:
            raise ValueError("need at least 1 image of size >= 8")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ValueError("need 1 <= min_shapes <= max_shapes")
        if self.class_count < 1:
            raise ValueError("class_count must be positive")
        if self.contrast <= 0:
            raise ValueError("contrast must be positive")
        if self.noise_sigma < 0 or self.illumination < 0:
            raise ValueError("noise_sigma and illumination must be nonnegative")
        if not 0.0 <= self.contrast_jitter < 1.0:
            raise ValueError("contrast_jitter must lie in [0, 1)")
        if not 0.0 <= self.invert_fraction <= 1.0:
            raise ValueError("invert_fraction must lie in [0, 1]")


def _synth_case(cfg: SynthConfig, rng: np.random.Generator):
    size = cfg.image_size
    inverted = cfg.invert_fraction > 0 and rng.random() < cfg.invert_fraction
    bg = rng.uniform(0.78, 0.90) if inverted else rng.uniform(0.10, 0.22)
    contrast = cfg.contrast
    if cfg.contrast_jitter > 0:
        contrast *= rng.uniform(1.0 - cfg.contrast_jitter, 1.0 + cfg.contrast_jitter)
    img = np.full((size, size), bg, dtype=np.float64)
    lbl = np.zeros((size, size), dtype=np.int64)
    yy, xx = np.mgrid[0:size, 0:size]
    n_shapes = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
    for shape_idx in range(n_shapes):
        # cycling class ids keep classes balanced; with min_shapes >=
        # class_count every class appears in every image
        cls = (shape_idx % cfg.class_count) + 1
        cy = rng.uniform(0.2, 0.8) * size
        cx = rng.uniform(0.2, 0.8) * size
        ry = rng.uniform(0.07, 0.24) * size
        rx = rng.uniform(0.07, 0.24) * size
        if cls % 2 == 1:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        step = contrast * (1.0 + 0.4 * (cls - 1))
        img[mask] = bg - step if inverted else bg + step
        lbl[mask] = cls
    if cfg.illumination > 0:
        a = rng.uniform(-cfg.illumination, cfg.illumination)
        b = rng.uniform(-cfg.illumination, cfg.illumination)
        img = img + a * (yy / size) + b * (xx / size)
    if cfg.noise_sigma > 0:
        img = img + rng.normal(0.0, cfg.noise_sigma, img.shape)
    img = np.clip(img, 0.0, 1.0)
    img = minmax_normalize(img)
    q = np.round(img * PNG_MAX).astype(np.uint16)
    return q.astype(np.float64) / PNG_MAX, lbl


def synth_generate(cfg: SynthConfig, out_root, labeled_count: int = 2,
                   val_count: Optional[int] = None, test_count: Optional[int] = None,
                   manifest_path=None):
    """Write a synthetic dataset in the standard layout plus a manifest.

    Returns (manifest, samples) where samples is the list of in-memory
    (case_id, pixels, classes) triples; written files round-trip to these
    arrays bit-exactly at native size.
    """
    root = Path(out_root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    samples = []
    for i in range(cfg.n_images):
        case_id = f"synth_{i:03d}"
        pixels, classes = _synth_case(cfg, rng)
        case_dir = root / case_id
        case_dir.mkdir(exist_ok=True)
        write_image_png(case_dir / "img_000.png", pixels)
        write_label_png(case_dir / "lbl_000.png", classes)
        with open(case_dir / "meta.json", "w", encoding="utf-8") as fh:
            json.dump({
                "case_id": case_id,
                "spacing": None,
                "modality": "synthetic",
                "class_count": cfg.class_count,
            }, fh, sort_keys=True)
            fh.write("\n")
        samples.append((case_id, pixels, classes))
    if val_count is None:
        val_count = max(1, int(math.floor(cfg.n_images * 0.15)))
    if test_count is None:
        test_count = max(1, int(math.floor(cfg.n_images * 0.15)))
    train_count = cfg.n_images - val_count - test_count
    if train_count < labeled_count:
        raise ValueError(
            f"split counts leave {train_count} training cases but "
            f"labeled_count={labeled_count}"
        )
    manifest = build_manifest(
        root, "custom", seed=cfg.seed, labeled_count=labeled_count,
        train_count=train_count, val_count=val_count, test_count=test_count,
        dataset_name="synthetic", out_path=manifest_path or (root / "manifest.json"),
    )
    return manifest, samples


# ---- volumetric converter ---------------------------------------------------

def convert_volume(volume_path, out_root, case_id: str, label_path=None,
                   spacing: Optional[Tuple[float, float]] = None,
                   class_count: Optional[int] = None) -> int:
    """Convert a .npy/.npz volume (S, H, W) into the per-slice PNG layout.

    Image slices are min-max normalized to the 16-bit range; label volumes
    keep their integer class ids. Returns the number of slices written.
    """
    vol = _load_volume(volume_path)
    lbl = _load_volume(label_path) if label_path is not None else None
    if vol.ndim == 2:
        vol = vol[None]
    if lbl is not None and lbl.ndim == 2:
        lbl = lbl[None]
    if lbl is not None and lbl.shape != vol.shape:
        raise IOError(f"label volume shape {lbl.shape} != image volume shape {vol.shape}")
    case_dir = Path(out_root) / case_id
    case_dir.mkdir(parents=True, exist_ok=True)
    for s in range(vol.shape[0]):
        write_image_png(case_dir / f"img_{s:03d}.png", minmax_normalize(vol[s].astype(np.float64)))
        if lbl is not None:
            write_label_png(case_dir / f"lbl_{s:03d}.png", lbl[s].astype(np.int64))
    if class_count is None:
        class_count = int(lbl.max()) if lbl is not None else 1
    with open(case_dir / "meta.json", "w", encoding="utf-8") as fh:
        json.dump({
            "case_id": case_id,
            "spacing": list(spacing) if spacing else None,
            "modality": "converted",
            "class_count": max(1, class_count),
        }, fh, sort_keys=True)
        fh.write("\n")
    return int(vol.shape[0])


def _load_volume(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise IOError(f"volume file not found: {path}")
    if path.suffix == ".npy":
        return np.load(path)
    if path.suffix == ".npz":
        with np.load(path) as z:
            return z[z.files[0]]
    raise IOError(f"unsupported volume format '{path.suffix}' (expected .npy or .npz)")
