import numpy as np
import pytest

from matchseg.augment import apply_weak, sample_weak_transform, transform_mask
from matchseg.core import (
    ImageSample,
    LabelMask,
    PseudoLabel,
    prediction_from_label,
    pseudo_from_label,
)
from matchseg.prompting import (
    BoxPrompt,
    ClassPromptSet,
    PointPrompt,
    PromptBundle,
    bundle_from_prediction,
    prompts_from_label,
)
from matchseg.segmenter import (
    ExternalSegmenterAdapter,
    NotTrainableError,
    OracleSegmenter,
    SegmenterError,
    ToyPromptSegmenter,
    UnsupportedPromptError,
    finetune_step,
    load_external_segmenter,
    refine_pseudo_label,
    segment,
)

from conftest import random_label


def make_case(rng, shape=(16, 16), c=2, sample_id="case0"):
    classes = np.zeros(shape, dtype=np.int64)
    classes[2:7, 3:9] = 1
    classes[9:13, 9:14] = 2
    truth = LabelMask(classes, class_count=c)
    image = ImageSample(id=sample_id, pixels=rng.random(shape))
    return image, truth


def point_prompt(cls, r, c):
    return ClassPromptSet(cls, points=(PointPrompt(r, c, "positive"),))


# ---- oracle ---------------------------------------------------------------------

def test_oracle_exact_truth(rng):
    image, truth = make_case(rng)
    oracle = OracleSegmenter({image.id: truth})
    scores = segment(oracle, image, point_prompt(1, 3, 4))
    assert np.array_equal(scores > 0.5, truth.classes == 1)
    assert scores.min() >= 0.0 and scores.max() <= 1.0


def test_oracle_deterministic_even_with_noise(rng):
    image, truth = make_case(rng)
    oracle = OracleSegmenter({image.id: truth}, boundary_noise=2, failure_rate=0.5, seed=3)
    a = segment(oracle, image, point_prompt(1, 3, 4))
    b = segment(oracle, image, point_prompt(1, 3, 4))
    assert np.array_equal(a, b)


def test_oracle_unknown_image_errors(rng):
    image, truth = make_case(rng)
    oracle = OracleSegmenter({})
    with pytest.raises(SegmenterError, match="case0"):
        segment(oracle, image, point_prompt(1, 3, 4))


def test_oracle_respects_view_geometry(rng):
    image, truth = make_case(rng)
    oracle = OracleSegmenter({image.id: truth})
    g = np.random.default_rng(5)
    for _ in range(10):
        t = sample_weak_transform(g, image.shape)
        weak = apply_weak(image, t)
        truth_t = transform_mask(truth, t)
        if not (truth_t.classes == 1).any():
            continue
        scores = segment(oracle, weak, point_prompt(1, 0, 0))
        assert np.array_equal(scores > 0.5, truth_t.classes == 1)


def test_oracle_failure_mode_keeps_prompted_component(rng):
    classes = np.zeros((16, 16), dtype=np.int64)
    classes[1:4, 1:4] = 1
    classes[10:14, 10:14] = 1
    truth = LabelMask(classes, class_count=1)
    image = ImageSample(id="two_blobs", pixels=rng.random((16, 16)))
    oracle = OracleSegmenter({image.id: truth}, failure_rate=1.0, seed=0)
    scores = segment(oracle, image, point_prompt(1, 11, 11))
    got = scores > 0.5
    assert got[11, 11] and not got[2, 2]


def test_oracle_boundary_noise_changes_mask(rng):
    image, truth = make_case(rng)
    clean = OracleSegmenter({image.id: truth})
    noisy = OracleSegmenter({image.id: truth}, boundary_noise=2, seed=1)
    a = segment(clean, image, point_prompt(1, 3, 4))
    b = segment(noisy, image, point_prompt(1, 3, 4))
    assert not np.array_equal(a, b)


# ---- refine ----------------------------------------------------------------------

def test_refine_empty_bundle_returns_fallback(rng):
    image, truth = make_case(rng)
    oracle = OracleSegmenter({image.id: truth})
    fallback = PseudoLabel(rng.integers(0, 3, image.shape),
                           rng.random(image.shape) < 0.5, "teacher", 2)
    out = refine_pseudo_label(oracle, image, PromptBundle(), fallback)
    assert out is fallback


def test_refine_oracle_closure_reproduces_truth(rng):
    for seed in range(20):
        g = np.random.default_rng(seed)
        truth = random_label(g, (16, 16), class_count=2)
        image = ImageSample(id=f"s{seed}", pixels=g.random((16, 16)))
        oracle = OracleSegmenter({image.id: truth})
        bundle = prompts_from_label(truth, rng=g, mode="points")
        fallback = PseudoLabel(np.zeros(image.shape, int),
                               np.zeros(image.shape, bool), "teacher", 2)
        refined = refine_pseudo_label(oracle, image, bundle, fallback)
        assert np.array_equal(refined.classes, truth.classes)
        assert refined.valid.all()
        assert refined.origin == "segmenter"


def test_refine_fallback_preserved_for_absent_classes(rng):
    image, truth = make_case(rng)
    oracle = OracleSegmenter({image.id: truth})
    fallback_classes = rng.integers(0, 3, image.shape)
    fallback_valid = rng.random(image.shape) < 0.5
    fallback = PseudoLabel(fallback_classes, fallback_valid, "teacher", 2)
    bundle = PromptBundle(classes=(point_prompt(1, 3, 4),))  # class 2 absent
    refined = refine_pseudo_label(oracle, image, bundle, fallback)
    m_fb = fallback.classes == 2
    m_rf = refined.classes == 2
    assert np.array_equal(m_fb, m_rf)
    assert np.array_equal(refined.valid[m_rf], fallback.valid[m_fb])
    # prompted class matches the oracle truth
    assert np.array_equal((refined.classes == 1) & ~m_fb, (truth.classes == 1) & ~m_fb)


class ConstantScoreSegmenter(ToyPromptSegmenter):
    """Per-class constant score maps for fusion tests."""

    def __init__(self, score_by_class):
        super().__init__()
        self.score_by_class = score_by_class

    def segment(self, image, prompts):
        return np.full(image.shape, self.score_by_class[prompts.class_id])


def test_refine_overlap_resolved_by_max_score(rng):
    image, _ = make_case(rng)
    seg = ConstantScoreSegmenter({1: 0.7, 2: 0.9})
    bundle = PromptBundle(classes=(point_prompt(1, 0, 0), point_prompt(2, 1, 1)))
    fallback = PseudoLabel(np.zeros(image.shape, int), np.zeros(image.shape, bool),
                           "teacher", 2)
    refined = refine_pseudo_label(seg, image, bundle, fallback)
    assert (refined.classes == 2).all()


# ---- finetune --------------------------------------------------------------------

def finetune_setup(rng):
    pixels = np.zeros((16, 16))
    pixels[4:9, 4:9] = 1.0
    image = ImageSample(id="ft", pixels=pixels)
    gt = LabelMask((pixels > 0.5).astype(np.int64), class_count=1)
    bundle = prompts_from_label(gt, rng=np.random.default_rng(0), mode="points")
    return image, gt, bundle


def test_finetune_zero_lr_keeps_params_bit_identical(rng):
    image, gt, bundle = finetune_setup(rng)
    seg = ToyPromptSegmenter()
    before = {k: np.float64(v) for k, v in seg.params.items()}
    loss = finetune_step(seg, image, gt, bundle, lr=0.0)
    assert loss > 0.0
    for k, v in before.items():
        assert seg.params[k] == v


def test_finetune_perfect_scores_near_zero_loss(rng):
    image, gt, bundle = finetune_setup(rng)
    # saturated logistic: fg pixels -> ~1, bg pixels -> ~0
    seg = ToyPromptSegmenter(gain_image=1000.0, gain_prompt=0.0, bias=-500.0)
    loss = finetune_step(seg, image, gt, bundle, lr=0.0)
    assert loss < 1e-4


def test_finetune_loss_non_increasing_over_windows(rng):
    image, gt, bundle = finetune_setup(rng)
    seg = ToyPromptSegmenter()
    losses = [finetune_step(seg, image, gt, bundle, lr=5e-5) for _ in range(50)]
    for k in range(len(losses) - 5):
        assert losses[k + 5] <= losses[k] + 1e-12


def test_finetune_frozen_parameters_untouched(rng):
    image, gt, bundle = finetune_setup(rng)
    seg = ToyPromptSegmenter()
    frozen_before = np.float64(seg.params["heat_sigma"])
    for _ in range(5):
        finetune_step(seg, image, gt, bundle, lr=1e-3)
    assert seg.params["heat_sigma"] == frozen_before


def test_finetune_requires_trainable_and_gt_prompts(rng):
    image, gt, bundle = finetune_setup(rng)
    oracle = OracleSegmenter({image.id: gt})
    with pytest.raises(NotTrainableError):
        finetune_step(oracle, image, gt, bundle, lr=1e-3)
    pred_bundle = bundle_from_prediction(
        prediction_from_label(gt), pseudo_from_label(gt, origin="teacher"),
        np.random.default_rng(0))
    with pytest.raises(ValueError):
        finetune_step(ToyPromptSegmenter(), image, gt, pred_bundle, lr=1e-3)


# ---- external adapters --------------------------------------------------------------

class StubBackend:
    def predict(self, pixels, points, box):
        # image-dependent, deterministic
        return np.clip(pixels * 0.5 + 0.25, 0, 1)


def test_sam_adapter_rejects_box_prompts(rng):
    image, _ = make_case(rng)
    adapter = ExternalSegmenterAdapter("sam", StubBackend())
    box_only = ClassPromptSet(1, box=BoxPrompt(0, 0, 3, 3))
    with pytest.raises(UnsupportedPromptError):
        segment(adapter, image, box_only)
    scores = segment(adapter, image, point_prompt(1, 2, 2))
    assert scores.shape == image.shape


def test_medsam_adapter_rejects_point_prompts(rng):
    image, _ = make_case(rng)
    adapter = ExternalSegmenterAdapter("medsam", StubBackend())
    with pytest.raises(UnsupportedPromptError):
        segment(adapter, image, point_prompt(1, 2, 2))
    scores = segment(adapter, image, ClassPromptSet(1, box=BoxPrompt(0, 0, 3, 3)))
    assert scores.shape == image.shape


def test_adapter_native_resize_round_trip(rng):
    image, _ = make_case(rng)
    adapter = ExternalSegmenterAdapter("sam", StubBackend(), native_size=32)
    scores = segment(adapter, image, point_prompt(1, 2, 2))
    assert scores.shape == image.shape
    assert scores.min() >= 0.0 and scores.max() <= 1.0


def test_adapter_deterministic(rng):
    image, _ = make_case(rng)
    adapter = ExternalSegmenterAdapter("medsam", StubBackend())
    cps = ClassPromptSet(1, box=BoxPrompt(1, 1, 5, 5))
    assert np.array_equal(segment(adapter, image, cps), segment(adapter, image, cps))


def test_load_external_missing_checkpoint_names_path(tmp_path):
    missing = tmp_path / "nope.pth"
    with pytest.raises(FileNotFoundError, match="nope.pth"):
        load_external_segmenter("sam", missing)


def test_load_external_requires_optional_packages(tmp_path):
    ckpt = tmp_path / "fake.pth"
    ckpt.write_bytes(b"not a real checkpoint")
    try:
        import segment_anything  # noqa: F401
        pytest.skip("segment_anything installed; adapter would try a real load")
    except ImportError:
        pass
    with pytest.raises(SegmenterError, match="segment_anything"):
        load_external_segmenter("sam", ckpt)


def test_load_external_unknown_kind(tmp_path):
    with pytest.raises(ValueError):
        load_external_segmenter("sam2", tmp_path / "x.pth")
