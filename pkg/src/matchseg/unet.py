"""A small encoder-decoder segmentation network in plain numpy.

Forward and backward passes are written by hand (im2col convolutions, max
pooling with cached argmax, nearest upsampling with skip concatenation), so
gradients can be verified against central finite differences and training is
bit-reproducible. Channel dropout at the bottleneck output serves as the
feature-level perturbation hook for consistency training.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass(frozen=True)
class UNetSpec:
    """Architecture descriptor: ``depth`` downsamplings, doubling channels."""

    depth: int = 4
    base_channels: int = 16
    in_channels: int = 1
    class_count: int = 1
    convs_per_block: int = 2
    dtype: str = "float32"

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("depth must be at least 2")
        if self.base_channels < 4:
            raise ValueError("base_channels must be at least 4")
        if self.convs_per_block not in (1, 2):
            raise ValueError("convs_per_block must be 1 or 2")
        if self.class_count < 1:
            raise ValueError("class_count must be positive")

    @property
    def out_channels(self) -> int:
        return self.class_count + 1

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels * (2 ** self.depth)


def softmax_channels(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    m = logits.max(axis=axis, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=axis, keepdims=True)


def conv3x3_forward(x, w, b, keep_cols=False):
    b_, c, h, wd = x.shape
    cout = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b_ * h * wd, c * 9)
    y = cols @ w.reshape(cout, -1).T
    y += b
    y = np.ascontiguousarray(y.reshape(b_, h, wd, cout).transpose(0, 3, 1, 2))
    return y, (cols if keep_cols else None)


def conv3x3_backward(dy, cols, w, x_shape):
    b_, c, h, wd = x_shape
    cout = w.shape[0]
    dy_mat = dy.transpose(0, 2, 3, 1).reshape(-1, cout)
    dw = (dy_mat.T @ cols).reshape(w.shape)
    db = dy_mat.sum(axis=0)
    dcols = dy_mat @ w.reshape(cout, -1)
    d = dcols.reshape(b_, h, wd, c, 3, 3).transpose(0, 3, 1, 2, 4, 5)
    dxp = np.zeros((b_, c, h + 2, wd + 2), dtype=dy.dtype)
    for di in range(3):
        for dj in range(3):
            dxp[:, :, di : di + h, dj : dj + wd] += d[:, :, :, :, di, dj]
    return dxp[:, :, 1 : h + 1, 1 : wd + 1], dw, db


def maxpool2_forward(x):
    b, c, h, w = x.shape
    win = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(b, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return y, idx


def maxpool2_backward(dy, idx, x_shape):
    b, c, h, w = x_shape
    dwin = np.zeros((b, c, h // 2, w // 2, 4), dtype=dy.dtype)
    np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
    dwin = dwin.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(dwin.reshape(b, c, h, w))


def upsample2(x):
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2_backward(dy):
    b, c, h, w = dy.shape
    return dy.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def channel_dropout_mask(rng: np.random.Generator, batch: int, channels: int,
                         p: float, dtype=np.float64) -> np.ndarray:
    """Per-sample channel keep mask scaled by 1/(1-p); p=0 gives exact identity."""
    if p < 0 or p >= 1:
        raise ValueError("dropout probability must lie in [0, 1)")
    if p == 0:
        return np.ones((batch, channels), dtype=dtype)
    keep = rng.random((batch, channels)) >= p
    return keep.astype(dtype) / (1.0 - p)


class UNet:
    """Encoder-decoder network over parameter dict ``params`` (name -> array)."""

    def __init__(self, spec: UNetSpec, seed: int = 0,
                 params: Optional[Dict[str, np.ndarray]] = None):
        self.spec = spec
        self.dtype = np.dtype(spec.dtype)
        if params is not None:
            self.params = {k: np.asarray(v, dtype=self.dtype) for k, v in params.items()}
            if set(self.params) != set(self._shapes()):
                raise ValueError("parameter names do not match the architecture")
        else:
            self.params = self._init_params(np.random.default_rng(seed))

    # ---- construction -------------------------------------------------

    def _channel_plan(self):
        s = self.spec
        plan = {}
        for i in range(s.depth):
            cin = s.in_channels if i == 0 else s.base_channels * (2 ** (i - 1))
            plan[f"enc{i}"] = (cin, s.base_channels * (2 ** i))
        plan["bott"] = (s.base_channels * (2 ** (s.depth - 1)), s.bottleneck_channels)
        for i in range(s.depth):
            cout = s.base_channels * (2 ** i)
            plan[f"dec{i}"] = (cout + 2 * cout, cout)
        return plan

    def _shapes(self) -> Dict[str, Tuple[int, ...]]:
        s = self.spec
        shapes = {}
        for prefix, (cin, cout) in self._channel_plan().items():
            c = cin
            for j in range(s.convs_per_block):
                shapes[f"{prefix}.c{j}.w"] = (cout, c, 3, 3)
                shapes[f"{prefix}.c{j}.b"] = (cout,)
                c = cout
        shapes["head.w"] = (s.out_channels, s.base_channels)
        shapes["head.b"] = (s.out_channels,)
        return shapes

    def _init_params(self, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        params = {}
        for name, shape in self._shapes().items():
            if name.endswith(".b"):
                params[name] = np.zeros(shape, dtype=self.dtype)
            else:
                fan_in = int(np.prod(shape[1:]))
                std = np.sqrt(2.0 / fan_in)
                params[name] = (rng.standard_normal(shape) * std).astype(self.dtype)
        return params

    def copy(self) -> "UNet":
        return UNet(self.spec, params={k: v.copy() for k, v in self.params.items()})

    @property
    def param_names(self):
        return sorted(self.params)

    def flat_params(self) -> np.ndarray:
        return np.concatenate([self.params[n].ravel() for n in self.param_names])

    def set_flat_params(self, vec: np.ndarray) -> None:
        off = 0
        for n in self.param_names:
            p = self.params[n]
            self.params[n] = vec[off : off + p.size].reshape(p.shape).astype(self.dtype)
            off += p.size
        if off != vec.size:
            raise ValueError(f"flat vector length {vec.size} != parameter count {off}")

    def flatten_grads(self, grads: Dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([grads[n].ravel() for n in self.param_names])

    # ---- forward / backward -------------------------------------------

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ValueError(
                f"expected input of shape (B, {self.spec.in_channels}, H, W), got {x.shape}"
            )
        div = 2 ** self.spec.depth
        if x.shape[2] % div or x.shape[3] % div:
            raise ValueError(
                f"input dims {x.shape[2]}x{x.shape[3]} must be divisible by {div}"
            )
        return np.ascontiguousarray(x, dtype=self.dtype)

    def _block_forward(self, prefix, h, cache):
        for j in range(self.spec.convs_per_block):
            w = self.params[f"{prefix}.c{j}.w"]
            b = self.params[f"{prefix}.c{j}.b"]
            in_shape = h.shape
            y, cols = conv3x3_forward(h, w, b, keep_cols=cache is not None)
            h = np.maximum(y, 0.0)
            if cache is not None:
                cache[f"{prefix}.c{j}"] = (cols, h, in_shape)
        return h

    def _block_backward(self, prefix, dh, cache, grads):
        for j in reversed(range(self.spec.convs_per_block)):
            cols, act, in_shape = cache[f"{prefix}.c{j}"]
            dy = dh * (act > 0)
            dh, dw, db = conv3x3_backward(dy, cols, self.params[f"{prefix}.c{j}.w"], in_shape)
            grads[f"{prefix}.c{j}.w"] = dw
            grads[f"{prefix}.c{j}.b"] = db
        return dh

    def _forward_impl(self, x, dropout_mask, want_cache):
        x = self._check_input(x)
        cache: Optional[dict] = {} if want_cache else None
        depth = self.spec.depth
        skips = []
        h = x
        for i in range(depth):
            h = self._block_forward(f"enc{i}", h, cache)
            skips.append(h)
            pooled, idx = maxpool2_forward(h)
            if want_cache:
                cache[f"pool{i}"] = (idx, h.shape)
            h = pooled
        h = self._block_forward("bott", h, cache)
        if dropout_mask is not None:
            dropout_mask = np.asarray(dropout_mask, dtype=self.dtype)
            if dropout_mask.shape != (x.shape[0], self.spec.bottleneck_channels):
                raise ValueError(
                    f"dropout mask shape {dropout_mask.shape} != "
                    f"({x.shape[0]}, {self.spec.bottleneck_channels})"
                )
            h = h * dropout_mask[:, :, None, None]
        if want_cache:
            cache["drop"] = dropout_mask
        for i in reversed(range(depth)):
            h = upsample2(h)
            h = np.concatenate([skips[i], h], axis=1)
            if want_cache:
                cache[f"cat{i}"] = skips[i].shape[1]
            h = self._block_forward(f"dec{i}", h, cache)
        logits = np.einsum("oc,bchw->bohw", self.params["head.w"], h, optimize=True)
        logits += self.params["head.b"][None, :, None, None]
        if want_cache:
            cache["head_in"] = h
        return logits, cache

    def forward(self, x: np.ndarray, dropout_mask: Optional[np.ndarray] = None) -> np.ndarray:
        """Logits of shape (B, C+1, H, W); apply ``softmax_channels`` for probabilities."""
        logits, _ = self._forward_impl(x, dropout_mask, want_cache=False)
        return logits

    def forward_train(self, x: np.ndarray, dropout_mask: Optional[np.ndarray] = None):
        """Forward pass that also returns the cache required by ``backward``."""
        return self._forward_impl(x, dropout_mask, want_cache=True)

    def backward(self, cache: dict, dlogits: np.ndarray) -> Dict[str, np.ndarray]:
        """Parameter gradients for a loss whose logit gradient is ``dlogits``."""
        grads: Dict[str, np.ndarray] = {}
        depth = self.spec.depth
        h_in = cache["head_in"]
        dlogits = np.ascontiguousarray(dlogits, dtype=self.dtype)
        grads["head.w"] = np.einsum("bohw,bchw->oc", dlogits, h_in, optimize=True)
        grads["head.b"] = dlogits.sum(axis=(0, 2, 3))
        dh = np.einsum("oc,bohw->bchw", self.params["head.w"], dlogits, optimize=True)
        dskips = [None] * depth
        for i in range(depth):
            dcat = self._block_backward(f"dec{i}", dh, cache, grads)
            c_skip = cache[f"cat{i}"]
            dskips[i] = dcat[:, :c_skip]
            dh = upsample2_backward(dcat[:, c_skip:])
        if cache["drop"] is not None:
            dh = dh * cache["drop"][:, :, None, None]
        dh = self._block_backward("bott", dh, cache, grads)
        for i in reversed(range(depth)):
            idx, pre_pool_shape = cache[f"pool{i}"]
            dh = maxpool2_backward(dh, idx, pre_pool_shape) + dskips[i]
            dh = self._block_backward(f"enc{i}", dh, cache, grads)
        return grads


def zeros_like_params(params: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


def add_scaled(dst: Dict[str, np.ndarray], src: Dict[str, np.ndarray], scale: float) -> None:
    """In-place dst += scale * src over matching parameter names."""
    for k in dst:
        dst[k] += scale * src[k]
