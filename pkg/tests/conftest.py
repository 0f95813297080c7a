import numpy as np
import pytest

from matchseg.core import ImageSample, LabelMask


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_label(rng, shape=(16, 16), class_count=2):
    return LabelMask(rng.integers(0, class_count + 1, shape), class_count)


def random_image(rng, shape=(16, 16), sample_id="img"):
    return ImageSample(id=sample_id, pixels=rng.random(shape))


def blobby_mask(rng, shape=(32, 32)):
    """Random mask with structure: a few rectangles/ellipses plus salt noise."""
    h, w = shape
    mask = np.zeros(shape, dtype=bool)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(int(rng.integers(0, 3))):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(1, h / 3), rng.uniform(1, w / 3)
        if rng.random() < 0.5:
            mask |= ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:
            mask |= (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    if rng.random() < 0.3:
        mask |= rng.random(shape) < 0.05
    return mask


@pytest.fixture(scope="session")
def tiny_synth(tmp_path_factory):
    """16x16 synthetic dataset + manifest for fast trainer tests."""
    from matchseg.data import SynthConfig, synth_generate

    root = tmp_path_factory.mktemp("tiny_synth")
    cfg = SynthConfig(n_images=12, image_size=16, class_count=2,
                      contrast=0.5, noise_sigma=0.05, seed=7)
    manifest, samples = synth_generate(cfg, root, labeled_count=2,
                                       val_count=2, test_count=2)
    return manifest, samples
