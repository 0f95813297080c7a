import numpy as np
import pytest

from matchseg.unet import (
    UNet,
    UNetSpec,
    add_scaled,
    channel_dropout_mask,
    softmax_channels,
    zeros_like_params,
)


def test_spec_validation():
    with pytest.raises(ValueError):
        UNetSpec(depth=1)
    with pytest.raises(ValueError):
        UNetSpec(base_channels=2)
    with pytest.raises(ValueError):
        UNetSpec(convs_per_block=3)


def test_forward_shapes_and_softmax(rng):
    net = UNet(UNetSpec(depth=2, base_channels=4, class_count=2, dtype="float64"), seed=0)
    x = rng.random((3, 1, 16, 16))
    logits = net.forward(x)
    assert logits.shape == (3, 3, 16, 16)
    probs = softmax_channels(logits)
    assert np.allclose(probs.sum(axis=1), 1.0)


def test_forward_rejects_indivisible_dims(rng):
    net = UNet(UNetSpec(depth=3, base_channels=4), seed=0)
    with pytest.raises(ValueError):
        net.forward(rng.random((1, 1, 12, 16)))


def test_forward_train_matches_forward(rng):
    net = UNet(UNetSpec(depth=2, base_channels=4, class_count=1, dtype="float64"), seed=1)
    x = rng.random((2, 1, 8, 8))
    logits, cache = net.forward_train(x)
    assert np.array_equal(logits, net.forward(x))
    assert cache["head_in"].shape[1] == 4


def test_dropout_mask_zero_p_is_ones(rng):
    m = channel_dropout_mask(rng, 4, 16, 0.0)
    assert np.array_equal(m, np.ones((4, 16)))
    m = channel_dropout_mask(rng, 4, 16, 0.5)
    assert set(np.unique(m)) <= {0.0, 2.0}
    with pytest.raises(ValueError):
        channel_dropout_mask(rng, 1, 4, 1.0)


def test_flat_params_round_trip(rng):
    net = UNet(UNetSpec(depth=2, base_channels=4), seed=2)
    vec = net.flat_params()
    vec2 = vec + 0.5
    net.set_flat_params(vec2)
    assert np.allclose(net.flat_params(), vec2)
    with pytest.raises(ValueError):
        net.set_flat_params(vec[:-1])


def test_copy_is_independent():
    net = UNet(UNetSpec(depth=2, base_channels=4), seed=3)
    dup = net.copy()
    name = net.param_names[0]
    dup.params[name] += 1.0
    assert not np.array_equal(net.params[name], dup.params[name])


def test_param_dict_helpers():
    net = UNet(UNetSpec(depth=2, base_channels=4, dtype="float64"), seed=4)
    zeros = zeros_like_params(net.params)
    add_scaled(zeros, net.params, 2.0)
    name = net.param_names[0]
    assert np.allclose(zeros[name], 2.0 * net.params[name])


def test_params_mismatch_rejected():
    net = UNet(UNetSpec(depth=2, base_channels=4), seed=0)
    bad = dict(net.params)
    bad.pop(net.param_names[0])
    with pytest.raises(ValueError):
        UNet(net.spec, params=bad)


def test_backward_gradient_spot_check(rng):
    """End-to-end FD spot check on a few parameters (full check lives in acceptance)."""
    net = UNet(UNetSpec(depth=2, base_channels=4, class_count=1, dtype="float64"), seed=5)
    x = rng.random((1, 1, 8, 8))
    target = rng.integers(0, 2, (1, 8, 8))
    valid = np.ones((1, 8, 8), bool)
    from matchseg import match_engine as me

    logits, cache = net.forward_train(x)
    _, _, _, dlog = me.dice_ce_grad_batch(logits, target, valid)
    grads = net.backward(cache, dlog)
    ga = net.flatten_grads(grads)

    def loss_at(vec):
        net.set_flat_params(vec)
        d, c = me.dice_ce_batch(softmax_channels(net.forward(x)), target, valid)
        return d + c

    theta = net.flat_params()
    h = 1e-6
    idx = rng.choice(theta.size, 40, replace=False)
    for i in idx:
        p = theta.copy(); p[i] += h
        m = theta.copy(); m[i] -= h
        fd = (loss_at(p) - loss_at(m)) / (2 * h)
        assert fd == pytest.approx(ga[i], rel=5e-4, abs=1e-9)
    net.set_flat_params(theta)
