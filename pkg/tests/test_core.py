import numpy as np
import pytest

from matchseg.core import (
    ImageSample,
    LabelMask,
    PseudoLabel,
    SoftPrediction,
    one_hot,
    prediction_from_label,
    pseudo_from_label,
    validate_prediction,
)


def test_image_sample_rejects_bad_pixels():
    with pytest.raises(ValueError):
        ImageSample(id="a", pixels=np.full((8, 8), 1.5))
    with pytest.raises(ValueError):
        ImageSample(id="a", pixels=np.full((8, 8), np.nan))
    with pytest.raises(ValueError):
        ImageSample(id="a", pixels=np.zeros((4, 8)))  # below minimum size


def test_label_mask_range_checked():
    LabelMask(np.array([[0, 1], [2, 0]]), class_count=2)
    with pytest.raises(ValueError):
        LabelMask(np.array([[0, 3]]), class_count=2)
    with pytest.raises(ValueError):
        LabelMask(np.array([[-1, 0]]), class_count=2)


def test_validate_prediction_uniform_ok():
    k, h, w = 3, 8, 8
    pred = SoftPrediction(np.full((k, h, w), 1.0 / k))
    assert validate_prediction(pred).ok


def test_validate_prediction_flags_bad_sum_pixel():
    probs = np.full((2, 8, 8), 0.5)
    probs[:, 3, 4] = [0.5, 0.4]  # sums to 0.9
    report = validate_prediction(SoftPrediction(probs))
    assert not report.ok
    assert report.pixel == (3, 4)
    assert "0.9" in report.message


def test_validate_prediction_rejects_nan():
    probs = np.full((2, 8, 8), 0.5)
    probs[0, 0, 0] = np.nan
    report = validate_prediction(SoftPrediction(probs))
    assert not report.ok
    assert "non-finite" in report.message


def test_one_hot_argmax_round_trip(rng):
    classes = rng.integers(0, 4, (10, 12))
    oh = one_hot(classes, class_count=3)
    pred = SoftPrediction(oh)
    assert validate_prediction(pred).ok
    assert np.array_equal(pred.argmax(), classes)


def test_one_hot_of_argmax_always_validates(rng):
    for _ in range(20):
        probs = rng.random((3, 9, 9))
        probs /= probs.sum(axis=0)
        pred = SoftPrediction(probs)
        hardened = SoftPrediction(one_hot(pred.argmax(), class_count=2))
        assert validate_prediction(hardened).ok


def test_prediction_from_label_round_trip(rng):
    label = LabelMask(rng.integers(0, 3, (9, 9)), class_count=2)
    pred = prediction_from_label(label)
    assert validate_prediction(pred).ok
    assert np.array_equal(pred.argmax(), label.classes)


def test_pseudo_from_label_all_valid(rng):
    label = LabelMask(rng.integers(0, 3, (9, 9)), class_count=2)
    pseudo = pseudo_from_label(label)
    assert pseudo.valid.all()
    assert pseudo.origin == "ground_truth"
    assert np.array_equal(pseudo.classes, label.classes)


def test_pseudo_label_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        PseudoLabel(classes=np.zeros((4, 4), int), valid=np.ones((4, 5), bool),
                    origin="teacher", class_count=1)
