"""End-to-end training orchestration: batch composition, the warm-up and
interactive phases, SGD with polynomial learning-rate decay, periodic
evaluation with best-checkpoint tracking, and bit-reproducible
checkpoint/resume.

Determinism contract: given the same resolved config, manifest, and seed,
two runs (or one run interrupted and resumed from a checkpoint) produce
bit-identical parameters and metrics history. All randomness flows through
named generator streams (augment, prompt, batch, feature) whose states are
checkpointed.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import match_engine as me
from .augment import (
    apply_strong,
    apply_weak,
    sample_intensity_perturbation,
    sample_weak_transform,
    transform_mask,
)
from .core import ImageSample, LabelMask, PseudoLabel, SoftPrediction
from .data import SplitManifest, load_hidden_truths, load_split
from .match_engine import MatchStrategy, TeacherStudent
from .metrics import aggregate, evaluate_case
from .prompting import bundle_from_prediction, prompts_from_label
from .segmenter import (
    OracleSegmenter,
    PromptableSegmenter,
    ToyPromptSegmenter,
    finetune_step,
    load_external_segmenter,
    refine_pseudo_label,
)
from .unet import UNet, UNetSpec, add_scaled, softmax_channels

LR_FLOOR = 1e-6

CHECKPOINT_MAGIC = b"MSEGCKPT"
CHECKPOINT_VERSION = 1

HISTORY_COLUMNS = (
    "iteration", "phase", "sup_dice", "sup_ce", "unsup_dice", "unsup_ce",
    "lam", "lr", "total", "seg_loss", "val_dice",
)
PHASE_WARMUP = "warmup"
PHASE_INTERACTIVE = "interactive"


class ConfigError(ValueError):
    pass


class CheckpointVersionError(RuntimeError):
    pass


# ---- configuration ---------------------------------------------------------

@dataclass
class NetworkConfig:
    depth: int = 4
    base_channels: int = 16
    convs_per_block: int = 2


@dataclass
class StrategyConfig:
    kind: str = "fixmatch"
    confidence_threshold: float = 0.95
    feature_dropout_p: float = 0.5

    def to_strategy(self) -> MatchStrategy:
        return MatchStrategy(self.kind, self.confidence_threshold, self.feature_dropout_p)


@dataclass
class SegmenterConfig:
    kind: str = "none"  # none | oracle | toy | sam | medsam
    prompt_mode: Optional[str] = None  # points | box; derived from kind when None
    checkpoint_path: Optional[str] = None
    device: str = "cpu"
    boundary_noise: int = 0
    failure_rate: float = 0.0
    n_pos: int = 1
    n_neg: int = 9
    prompt_confidence: float = 0.95
    refine_threshold: float = 0.5
    finetune_in_interactive: bool = False

    def resolved_prompt_mode(self) -> str:
        if self.prompt_mode is not None:
            return self.prompt_mode
        return "box" if self.kind == "medsam" else "points"


@dataclass
class RunConfig:
    total_iterations: int = 60000
    warmup_iterations: int = 30000
    interactive_iterations: int = 30000
    batch_size: int = 8
    labeled_fraction: float = 0.5
    match_lr: float = 0.01
    segmenter_lr: float = 5e-5
    momentum: float = 0.9
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    lambda_max: float = 0.1
    ramp_length: Optional[int] = None
    ema_decay: float = 0.99
    image_size: int = 256
    seed: int = 0
    dtype: str = "float32"
    eval_every: int = 1000
    checkpoint_every: int = 10000
    write_overlays: bool = False
    network: NetworkConfig = field(default_factory=NetworkConfig)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    segmenter: SegmenterConfig = field(default_factory=SegmenterConfig)

    @property
    def labeled_per_batch(self) -> int:
        return int(round(self.batch_size * self.labeled_fraction))

    @property
    def unlabeled_per_batch(self) -> int:
        return self.batch_size - self.labeled_per_batch

    @property
    def resolved_ramp_length(self) -> int:
        if self.ramp_length is not None:
            return self.ramp_length
        return max(1, self.total_iterations // 6)

    def validate(self) -> None:
        if self.warmup_iterations < 0 or self.interactive_iterations < 0:
            raise ConfigError("iteration counts must be nonnegative")
        if self.warmup_iterations + self.interactive_iterations != self.total_iterations:
            raise ConfigError(
                f"warmup_iterations ({self.warmup_iterations}) + interactive_iterations "
                f"({self.interactive_iterations}) must equal total_iterations "
                f"({self.total_iterations})"
            )
        if self.total_iterations < 1:
            raise ConfigError("total_iterations must be at least 1")
        if self.labeled_per_batch < 1 or self.unlabeled_per_batch < 1:
            raise ConfigError(
                f"batch_size {self.batch_size} with labeled_fraction "
                f"{self.labeled_fraction} leaves an empty half-batch"
            )
        if self.image_size % (2 ** self.network.depth) != 0:
            raise ConfigError(
                f"image_size {self.image_size} must be divisible by "
                f"2^depth = {2 ** self.network.depth}"
            )
        if self.interactive_iterations > 0 and self.segmenter.kind == "none":
            raise ConfigError("interactive training requires a segmenter (kind != 'none')")
        if self.segmenter.kind not in ("none", "oracle", "toy", "sam", "medsam"):
            raise ConfigError(f"unknown segmenter kind '{self.segmenter.kind}'")
        if self.segmenter.resolved_prompt_mode() not in ("points", "box"):
            raise ConfigError(f"unknown prompt mode '{self.segmenter.prompt_mode}'")
        self.strategy.to_strategy()  # validates strategy fields

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_NESTED_SECTIONS = {
    "network": NetworkConfig,
    "strategy": StrategyConfig,
    "segmenter": SegmenterConfig,
}


def config_from_dict(d: dict, path: str = "config") -> RunConfig:
    """Strict config parsing: unknown keys are rejected by name."""
    return _dataclass_from_dict(RunConfig, d, path)


def _dataclass_from_dict(cls, d: dict, path: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{path} must be an object, got {type(d).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown config key '{path}.{unknown[0]}'")
    kwargs = {}
    for name, value in d.items():
        sub = _NESTED_SECTIONS.get(name) if cls is RunConfig else None
        if sub is not None:
            kwargs[name] = _dataclass_from_dict(sub, value, f"{path}.{name}")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {path}: {exc}") from exc


def apply_override(d: dict, dotted_key: str, raw_value: str) -> None:
    """Apply a dotted-path CLI override onto a nested config dict in place."""
    parts = dotted_key.split(".")
    node = d
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            node[p] = node.get(p) if isinstance(node.get(p), dict) else {}
        node = node[p]
    try:
        value = json.loads(raw_value)
    except json.JSONDecodeError:
        value = raw_value
    node[parts[-1]] = value


# ---- batching ---------------------------------------------------------------

class CyclingSampler:
    """Index sampler that cycles a pool, reshuffling on each exhaustion."""

    def __init__(self, n_items: int, rng: np.random.Generator):
        if n_items < 1:
            raise ConfigError("cannot sample from an empty pool")
        self.n = n_items
        self.rng = rng
        self.perm = rng.permutation(n_items)
        self.pos = 0

    def take(self, k: int) -> List[int]:
        out = []
        while len(out) < k:
            if self.pos >= self.n:
                self.perm = self.rng.permutation(self.n)
                self.pos = 0
            out.append(int(self.perm[self.pos]))
            self.pos += 1
        return out

    def state(self) -> dict:
        return {"perm": self.perm.tolist(), "pos": self.pos}

    def restore(self, state: dict) -> None:
        self.perm = np.asarray(state["perm"], dtype=np.int64)
        self.pos = int(state["pos"])


@dataclass
class Batch:
    labeled: List[Tuple[ImageSample, LabelMask]]
    unlabeled: List[ImageSample]


def make_batch(
    labeled_pool: Sequence[Tuple[ImageSample, LabelMask]],
    unlabeled_pool: Sequence[ImageSample],
    labeled_sampler: CyclingSampler,
    unlabeled_sampler: CyclingSampler,
    n_labeled: int,
    n_unlabeled: int,
) -> Batch:
    if not labeled_pool or not unlabeled_pool:
        raise ConfigError("both labeled and unlabeled pools must be nonempty")
    return Batch(
        labeled=[labeled_pool[i] for i in labeled_sampler.take(n_labeled)],
        unlabeled=[unlabeled_pool[i] for i in unlabeled_sampler.take(n_unlabeled)],
    )


def poly_lr(iteration: int, total: int, base_lr: float, power: float = 0.9,
            floor: float = LR_FLOOR) -> float:
    """Polynomial decay base_lr * (1 - it/total)^power, floored at ``floor``.

    The floor never raises the rate above the base rate, so an explicit
    base_lr of 0 stays 0.
    """
    if not 0 <= iteration <= total:
        raise ValueError(f"iteration {iteration} outside [0, {total}]")
    return max(base_lr * (1.0 - iteration / total) ** power, min(floor, base_lr))


def sgd_update(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
               buffers: Dict[str, np.ndarray], lr: float, momentum: float,
               weight_decay: float) -> None:
    for name, p in params.items():
        g = grads[name] + weight_decay * p
        buf = buffers[name]
        buf *= momentum
        buf += g
        p -= lr * buf


# ---- train state -------------------------------------------------------------

RNG_STREAMS = ("augment", "prompt", "batch", "feature")


@dataclass
class TrainState:
    iteration: int
    warmup_iterations: int
    ts: TeacherStudent
    segmenter: Optional[PromptableSegmenter]
    momentum_buffers: Dict[str, np.ndarray]
    rngs: Dict[str, np.random.Generator]
    labeled_sampler: CyclingSampler
    unlabeled_sampler: CyclingSampler
    history: List[dict] = field(default_factory=list)
    best_val_dice: float = float("-inf")
    best_iteration: int = -1
    best_params: Optional[Dict[str, np.ndarray]] = None

    @property
    def phase(self) -> str:
        return PHASE_WARMUP if self.iteration < self.warmup_iterations else PHASE_INTERACTIVE


def make_rng_streams(seed: int) -> Dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(RNG_STREAMS))
    return {name: np.random.default_rng(c) for name, c in zip(RNG_STREAMS, children)}


def build_segmenter(cfg: SegmenterConfig, manifest: SplitManifest,
                    image_size: int, seed: int) -> Optional[PromptableSegmenter]:
    if cfg.kind == "none":
        return None
    if cfg.kind == "oracle":
        truths = load_hidden_truths(manifest, image_size=image_size)
        return OracleSegmenter(truths, boundary_noise=cfg.boundary_noise,
                               failure_rate=cfg.failure_rate, seed=seed)
    if cfg.kind == "toy":
        return ToyPromptSegmenter()
    if cfg.kind in ("sam", "medsam"):
        if not cfg.checkpoint_path:
            raise ConfigError(f"segmenter kind '{cfg.kind}' requires checkpoint_path")
        return load_external_segmenter(cfg.kind, cfg.checkpoint_path, cfg.device)
    raise ConfigError(f"unknown segmenter kind '{cfg.kind}'")


def init_state(config: RunConfig, manifest: SplitManifest,
               n_labeled_pool: int, n_unlabeled_pool: int,
               segmenter: Optional[PromptableSegmenter]) -> TrainState:
    spec = UNetSpec(
        depth=config.network.depth,
        base_channels=config.network.base_channels,
        convs_per_block=config.network.convs_per_block,
        class_count=manifest.class_count,
        dtype=config.dtype,
    )
    ts = me.make_teacher_student(spec, seed=config.seed, ema_decay=config.ema_decay)
    rngs = make_rng_streams(config.seed)
    return TrainState(
        iteration=0,
        warmup_iterations=config.warmup_iterations,
        ts=ts,
        segmenter=segmenter,
        momentum_buffers={k: np.zeros_like(v) for k, v in ts.student.params.items()},
        rngs=rngs,
        labeled_sampler=CyclingSampler(n_labeled_pool, rngs["batch"]),
        unlabeled_sampler=CyclingSampler(n_unlabeled_pool, rngs["batch"]),
    )


# ---- one training step --------------------------------------------------------

def _augment_labeled(batch: Batch, rng: np.random.Generator):
    strong_samples, labels = [], []
    for sample, label in batch.labeled:
        t = sample_weak_transform(rng, sample.shape)
        p = sample_intensity_perturbation(rng)
        strong_samples.append(apply_strong(sample, t, p, rng))
        labels.append(transform_mask(label, t))
    return strong_samples, labels


def _augment_unlabeled(batch: Batch, rng: np.random.Generator, n_strong: int):
    weak_samples = []
    strong_views: List[List[ImageSample]] = [[] for _ in range(n_strong)]
    for sample in batch.unlabeled:
        t = sample_weak_transform(rng, sample.shape)
        weak_samples.append(apply_weak(sample, t))
        for v in range(n_strong):
            p = sample_intensity_perturbation(rng)
            strong_views[v].append(apply_strong(sample, t, p, rng))
    return weak_samples, strong_views


def _stack(samples: Sequence[ImageSample], dtype) -> np.ndarray:
    return np.stack([s.pixels for s in samples]).astype(dtype)[:, None]


def _train_step(state: TrainState, config: RunConfig, batch: Batch,
                interactive: bool) -> dict:
    strategy = config.strategy.to_strategy()
    student = state.ts.student
    teacher = state.ts.teacher
    dtype = student.dtype
    seg_cfg = config.segmenter
    it = state.iteration

    strong_l, labels_t = _augment_labeled(batch, state.rngs["augment"])
    weak_u, strong_u_views = _augment_unlabeled(
        batch, state.rngs["augment"], strategy.strong_view_count)

    # teacher pseudo-labels from the weak views (no gradients)
    weak_x = _stack(weak_u, dtype)
    tprobs = softmax_channels(teacher.forward(weak_x))
    target_classes = np.argmax(tprobs, axis=1)
    target_valid = tprobs.max(axis=1) > strategy.confidence_threshold
    class_count = student.spec.class_count

    if interactive:
        if state.segmenter is None:
            raise ConfigError("interactive step requires a segmenter")
        mode = seg_cfg.resolved_prompt_mode()
        for i, weak_sample in enumerate(weak_u):
            pred_i = SoftPrediction(tprobs[i])
            pseudo_i = PseudoLabel(classes=target_classes[i], valid=target_valid[i],
                                   origin="teacher", class_count=class_count)
            bundle = bundle_from_prediction(
                pred_i, pseudo_i, state.rngs["prompt"], mode=mode,
                n_pos=seg_cfg.n_pos, n_neg=seg_cfg.n_neg, conf=seg_cfg.prompt_confidence,
            )
            refined = refine_pseudo_label(state.segmenter, weak_sample, bundle,
                                          pseudo_i, threshold=seg_cfg.refine_threshold)
            target_classes[i] = refined.classes
            target_valid[i] = refined.valid

    # student update: supervised + weighted unsupervised gradients
    xl = _stack(strong_l, dtype)
    label_classes = np.stack([l.classes for l in labels_t])
    logits_l, cache_l = student.forward_train(xl)
    sup_dice, sup_ce, _, dlog_l = me.dice_ce_grad_batch(
        logits_l, label_classes, np.ones(label_classes.shape, dtype=bool))
    grads = student.backward(cache_l, dlog_l)

    strong_xs = [_stack(v, dtype) for v in strong_u_views]
    (unsup_dice, unsup_ce), ugrads = me.unsup_forward_backward(
        strategy, student, weak_x, strong_xs, target_classes, target_valid,
        feature_rng=state.rngs["feature"],
    )
    lam = me.lambda_schedule(it, config.resolved_ramp_length, config.lambda_max)
    add_scaled(grads, ugrads, lam)

    lr = poly_lr(it, config.total_iterations, config.match_lr, config.poly_power)
    sgd_update(student.params, grads, state.momentum_buffers, lr,
               config.momentum, config.weight_decay)
    me.ema_update(state.ts)

    seg_loss = None
    do_finetune = (not interactive) or seg_cfg.finetune_in_interactive
    if do_finetune and state.segmenter is not None and state.segmenter.trainable:
        seg_loss = 0.0
        mode = seg_cfg.resolved_prompt_mode()
        for sample, label in zip(strong_l, labels_t):
            bundle = prompts_from_label(label, rng=state.rngs["prompt"], mode=mode,
                                        n_pos=seg_cfg.n_pos, n_neg=seg_cfg.n_neg)
            seg_loss += finetune_step(state.segmenter, sample, label, bundle,
                                      config.segmenter_lr)

    breakdown = me.total_loss((sup_dice, sup_ce), (unsup_dice, unsup_ce), lam)
    state.iteration += 1
    return {
        "iteration": it,
        "phase": PHASE_INTERACTIVE if interactive else PHASE_WARMUP,
        "sup_dice": sup_dice,
        "sup_ce": sup_ce,
        "unsup_dice": unsup_dice,
        "unsup_ce": unsup_ce,
        "lam": lam,
        "lr": lr,
        "total": breakdown.total,
        "seg_loss": seg_loss,
        "val_dice": None,
    }


def warmup_step(state: TrainState, config: RunConfig, batch: Batch) -> dict:
    if state.phase != PHASE_WARMUP:
        raise ValueError(f"warmup_step called at iteration {state.iteration} (phase {state.phase})")
    return _train_step(state, config, batch, interactive=False)


def interactive_step(state: TrainState, config: RunConfig, batch: Batch) -> dict:
    if state.phase != PHASE_INTERACTIVE:
        raise ValueError(
            f"interactive_step called at iteration {state.iteration} (phase {state.phase})")
    return _train_step(state, config, batch, interactive=True)


# ---- evaluation ----------------------------------------------------------------

def predict_mask(net: UNet, pixels: np.ndarray) -> np.ndarray:
    logits = net.forward(pixels[None, None].astype(net.dtype))
    return np.argmax(logits[0], axis=0).astype(np.int64)


# distinct RGB per foreground class for overlay contours, cycled if needed
_OVERLAY_COLORS = ((255, 64, 64), (64, 255, 64), (64, 128, 255), (255, 210, 0))


def write_overlay_png(path, pixels: np.ndarray, classes: np.ndarray) -> None:
    """Prediction contours drawn over the grayscale image as an RGB PNG."""
    from PIL import Image

    from .metrics import boundary_mask

    rgb = np.repeat((np.clip(pixels, 0, 1) * 255).astype(np.uint8)[:, :, None], 3, axis=2)
    for c in range(1, int(classes.max()) + 1):
        contour = boundary_mask(classes == c)
        rgb[contour] = _OVERLAY_COLORS[(c - 1) % len(_OVERLAY_COLORS)]
    Image.fromarray(rgb).save(path)


def evaluate_pool(net: UNet, pool, class_count: int, chunk: int = 8):
    """Per-case metrics of argmax predictions over (sample, label) pairs."""
    cases = []
    for start in range(0, len(pool), chunk):
        group = pool[start : start + chunk]
        x = np.stack([s.pixels for s, _ in group]).astype(net.dtype)[:, None]
        pred = np.argmax(net.forward(x), axis=1).astype(np.int64)
        for (sample, label), pc in zip(group, pred):
            pm = LabelMask(classes=pc, class_count=class_count)
            cases.append(evaluate_case(pm, label, case_id=sample.id, spacing=sample.spacing))
    return cases


# ---- checkpoint format ----------------------------------------------------------

def _rng_state_to_json(gen: np.random.Generator) -> dict:
    st = gen.bit_generator.state
    return {
        "bit_generator": st["bit_generator"],
        "state": str(st["state"]["state"]),
        "inc": str(st["state"]["inc"]),
        "has_uint32": int(st["has_uint32"]),
        "uinteger": int(st["uinteger"]),
    }


def _rng_state_from_json(d: dict) -> np.random.Generator:
    gen = np.random.default_rng(0)
    gen.bit_generator.state = {
        "bit_generator": d["bit_generator"],
        "state": {"state": int(d["state"]), "inc": int(d["inc"])},
        "has_uint32": int(d["has_uint32"]),
        "uinteger": int(d["uinteger"]),
    }
    return gen


def _history_to_array(history: List[dict]) -> np.ndarray:
    arr = np.full((len(history), len(HISTORY_COLUMNS)), np.nan, dtype=np.float64)
    for i, row in enumerate(history):
        for j, col in enumerate(HISTORY_COLUMNS):
            v = row[col]
            if col == "phase":
                arr[i, j] = 0.0 if v == PHASE_WARMUP else 1.0
            elif v is not None:
                arr[i, j] = float(v)
    return arr


def _history_from_array(arr: np.ndarray) -> List[dict]:
    history = []
    for vec in arr:
        row = {}
        for j, col in enumerate(HISTORY_COLUMNS):
            v = vec[j]
            if col == "iteration":
                row[col] = int(v)
            elif col == "phase":
                row[col] = PHASE_WARMUP if v == 0.0 else PHASE_INTERACTIVE
            else:
                row[col] = None if math.isnan(v) else float(v)
        history.append(row)
    return history


def checkpoint_save(state: TrainState, config: RunConfig, class_count: int, path) -> None:
    """Write the full training state to a deterministic binary container."""
    arrays: Dict[str, np.ndarray] = {}
    for name, arr in state.ts.student.params.items():
        arrays[f"student.{name}"] = arr
    for name, arr in state.ts.teacher.params.items():
        arrays[f"teacher.{name}"] = arr
    for name, arr in state.momentum_buffers.items():
        arrays[f"momentum.{name}"] = arr
    if state.segmenter is not None:
        for name, arr in state.segmenter.state_arrays().items():
            arrays[f"segstate.{name}"] = arr
    if state.best_params is not None:
        for name, arr in state.best_params.items():
            arrays[f"best.{name}"] = arr
    arrays["history"] = _history_to_array(state.history)

    manifest_entries = []
    offset = 0
    ordered = sorted(arrays)
    for name in ordered:
        arr = np.ascontiguousarray(arrays[name])
        arrays[name] = arr
        manifest_entries.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": arr.nbytes,
        })
        offset += arr.nbytes
    header = {
        "format_version": CHECKPOINT_VERSION,
        "iteration": state.iteration,
        "class_count": class_count,
        "config": config.to_dict(),
        "rng": {name: _rng_state_to_json(state.rngs[name]) for name in RNG_STREAMS},
        "samplers": {
            "labeled": state.labeled_sampler.state(),
            "unlabeled": state.unlabeled_sampler.state(),
        },
        "best": {
            "val_dice": state.best_val_dice,
            "iteration": state.best_iteration,
            "has_params": state.best_params is not None,
        },
        "history_columns": list(HISTORY_COLUMNS),
        "arrays": manifest_entries,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(CHECKPOINT_VERSION.to_bytes(4, "little"))
        fh.write(len(header_bytes).to_bytes(8, "little"))
        fh.write(header_bytes)
        for name in ordered:
            fh.write(arrays[name].tobytes())


def checkpoint_load(path) -> dict:
    """Read a checkpoint container into {'header': dict, 'arrays': dict}."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointVersionError(f"'{path}' is not a matchseg checkpoint")
        version = int.from_bytes(fh.read(4), "little")
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(
                f"checkpoint schema version {version} != supported {CHECKPOINT_VERSION}"
            )
        header_len = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        blob = fh.read()
    arrays = {}
    for entry in header["arrays"]:
        start = entry["offset"]
        raw = blob[start : start + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(
            entry["shape"]).copy()
    return {"header": header, "arrays": arrays}


def restore_state(payload: dict, config: RunConfig, manifest: SplitManifest,
                  n_labeled_pool: int, n_unlabeled_pool: int,
                  segmenter: Optional[PromptableSegmenter]) -> TrainState:
    header = payload["header"]
    arrays = payload["arrays"]
    if header["config"] != config.to_dict():
        raise ConfigError("checkpoint config does not match the provided config")
    state = init_state(config, manifest, n_labeled_pool, n_unlabeled_pool, segmenter)
    state.iteration = int(header["iteration"])

    def pick(prefix):
        plen = len(prefix)
        return {k[plen:]: v for k, v in arrays.items() if k.startswith(prefix)}

    state.ts.student.params = {k: v.copy() for k, v in pick("student.").items()}
    state.ts.teacher.params = {k: v.copy() for k, v in pick("teacher.").items()}
    state.momentum_buffers = {k: v.copy() for k, v in pick("momentum.").items()}
    seg_arrays = pick("segstate.")
    if state.segmenter is not None and seg_arrays:
        state.segmenter.load_state_arrays(seg_arrays)
    best = pick("best.")
    state.best_params = {k: v.copy() for k, v in best.items()} if best else None
    state.best_val_dice = float(header["best"]["val_dice"])
    state.best_iteration = int(header["best"]["iteration"])
    for name in RNG_STREAMS:
        state.rngs[name] = _rng_state_from_json(header["rng"][name])
    # samplers share the batch stream object
    state.labeled_sampler.rng = state.rngs["batch"]
    state.unlabeled_sampler.rng = state.rngs["batch"]
    state.labeled_sampler.restore(header["samplers"]["labeled"])
    state.unlabeled_sampler.restore(header["samplers"]["unlabeled"])
    state.history = _history_from_array(arrays["history"])
    return state


# ---- run orchestration -----------------------------------------------------------

def _fmt_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, int):
        return str(v)
    return repr(float(v))


def history_row_to_csv(row: dict) -> str:
    return ",".join(_fmt_cell(row[c]) for c in HISTORY_COLUMNS)


def run(config: RunConfig, manifest: SplitManifest, run_dir,
        resume_from=None, manifest_path=None) -> dict:
    """Execute warm-up then interactive training per the resolved config.

    Writes config.json (the resolved config plus the manifest path, enough
    to reproduce the run), metrics.csv, periodic checkpoints, and a final
    report.json with the best checkpoint's test metrics. Returns the report.
    """
    config.validate()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "checkpoints").mkdir(exist_ok=True)
    resolved = dict(config.to_dict())
    if manifest_path is not None:
        resolved["manifest"] = str(manifest_path)
    with open(run_dir / "config.json", "w", encoding="utf-8") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)
        fh.write("\n")

    labeled_pool = load_split(manifest, "train_labeled", image_size=config.image_size)
    if any(lbl is None for _, lbl in labeled_pool):
        raise ConfigError("train_labeled entries must all carry labels")
    unlabeled_pool = [s for s, _ in load_split(manifest, "train_unlabeled",
                                               image_size=config.image_size)]
    val_pool = load_split(manifest, "val", image_size=config.image_size)
    test_pool = load_split(manifest, "test", image_size=config.image_size)
    if not labeled_pool or not unlabeled_pool:
        raise ConfigError("labeled and unlabeled training pools must be nonempty")
    if not val_pool or not test_pool:
        raise ConfigError("val and test splits must be nonempty")

    segmenter = build_segmenter(config.segmenter, manifest, config.image_size, config.seed)
    if resume_from is not None:
        payload = checkpoint_load(resume_from)
        state = restore_state(payload, config, manifest, len(labeled_pool),
                              len(unlabeled_pool), segmenter)
    else:
        state = init_state(config, manifest, len(labeled_pool), len(unlabeled_pool), segmenter)

    csv_path = run_dir / "metrics.csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as csv_fh:
        csv_fh.write(",".join(HISTORY_COLUMNS) + "\n")
        for row in state.history:  # rewrite history on resume
            csv_fh.write(history_row_to_csv(row) + "\n")

        while state.iteration < config.total_iterations:
            batch = make_batch(labeled_pool, unlabeled_pool, state.labeled_sampler,
                               state.unlabeled_sampler, config.labeled_per_batch,
                               config.unlabeled_per_batch)
            if state.phase == PHASE_WARMUP:
                row = warmup_step(state, config, batch)
            else:
                row = interactive_step(state, config, batch)
            done = state.iteration
            if config.eval_every > 0 and (done % config.eval_every == 0
                                          or done == config.total_iterations):
                cases = evaluate_pool(state.ts.student, val_pool, manifest.class_count)
                val_dice = aggregate(cases)["mean_dice"]
                row["val_dice"] = val_dice
                if val_dice > state.best_val_dice:
                    state.best_val_dice = val_dice
                    state.best_iteration = done
                    state.best_params = {k: v.copy()
                                         for k, v in state.ts.student.params.items()}
            state.history.append(row)
            csv_fh.write(history_row_to_csv(row) + "\n")
            csv_fh.flush()
            if config.checkpoint_every > 0 and done % config.checkpoint_every == 0:
                checkpoint_save(state, config, manifest.class_count,
                                run_dir / "checkpoints" / f"iter_{done:06d}.ckpt")

    final_path = run_dir / "checkpoints" / f"iter_{state.iteration:06d}.ckpt"
    checkpoint_save(state, config, manifest.class_count, final_path)

    if state.best_params is None:
        state.best_params = {k: v.copy() for k, v in state.ts.student.params.items()}
        state.best_iteration = state.iteration
    best_net = UNet(state.ts.student.spec, params=state.best_params)
    if config.write_overlays:
        overlay_dir = run_dir / "overlays"
        overlay_dir.mkdir(exist_ok=True)
        for sample, _ in test_pool:
            pred = predict_mask(best_net, sample.pixels)
            write_overlay_png(overlay_dir / (sample.id.replace("/", "_") + ".png"),
                              sample.pixels, pred)
    cases = evaluate_pool(best_net, test_pool, manifest.class_count)
    report = aggregate(cases)
    report.update({
        "split": "test",
        "method": f"{config.strategy.kind}+{config.segmenter.kind}",
        "best_iteration": state.best_iteration,
        "best_val_dice": (None if state.best_val_dice == float("-inf")
                          else state.best_val_dice),
        "per_case_dice": {cm.case_id: cm.mean_dice for cm in cases},
    })
    with open(run_dir / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report
