"""Minimal reverse-mode layers for the fixed decoder architectures.

Each layer exposes a forward function returning (output, cache) and a
matching backward function mapping the output gradient to input and
parameter gradients.  All tensors are (batch, channels, height, width)
float64.  There is no general graph: the decoder and VAE compose these
by hand.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NORM_EPS = 1e-5


# ---------------------------------------------------------------------------
# convolution (zero padding, stride 1, odd square kernels and 1x1)


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """x (N,C,H,W), w (O,C,k,k) odd k, b (O,) -> y (N,O,H,W)."""
    n, c, h, wd = x.shape
    o, c2, kh, kw = w.shape
    if c != c2 or kh != kw or kh % 2 == 0:
        raise ValueError("kernel must be odd square with matching channels")
    if kh == 1:
        y = np.einsum("nchw,oc->nohw", x, w[:, :, 0, 0], optimize=True) + b[None, :, None, None]
        return y, (x, w, None)
    p = kh // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (N,C,H,W,kh,kw)
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n, h * wd, c * kh * kw)
    wm = w.reshape(o, c * kh * kw)
    y = (cols @ wm.T).transpose(0, 2, 1).reshape(n, o, h, wd) + b[None, :, None, None]
    return y, (x, w, cols)


def conv2d_backward(cache, gy: np.ndarray):
    x, w, cols = cache
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    gb = gy.sum(axis=(0, 2, 3))
    if kh == 1:
        gw = np.einsum("nohw,nchw->oc", gy, x, optimize=True).reshape(o, c, 1, 1)
        gx = np.einsum("nohw,oc->nchw", gy, w[:, :, 0, 0], optimize=True)
        return gx, gw, gb
    gym = gy.reshape(n, o, h * wd)
    gw = np.einsum("nop,npk->ok", gym, cols, optimize=True).reshape(o, c, kh, kw)
    # input gradient: same-padding convolution with the flipped kernel
    wflip = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)  # (C,O,k,k)
    p = kh // 2
    gyp = np.pad(gy, ((0, 0), (0, 0), (p, p), (p, p)))
    gcols = sliding_window_view(gyp, (kh, kw), axis=(2, 3))
    gcols = gcols.transpose(0, 2, 3, 1, 4, 5).reshape(n, h * wd, o * kh * kw)
    wfm = wflip.reshape(c, o * kh * kw)
    gx = (gcols @ wfm.T).transpose(0, 2, 1).reshape(n, c, h, wd)
    return gx, gw, gb


# ---------------------------------------------------------------------------
# activations, pooling, upsampling


def leaky_relu_forward(x: np.ndarray, slope: float):
    y = np.where(x >= 0, x, slope * x)
    return y, (x >= 0, slope)


def leaky_relu_backward(cache, gy: np.ndarray) -> np.ndarray:
    pos, slope = cache
    return np.where(pos, gy, slope * gy)


def avgpool2_forward(x: np.ndarray):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError("avg pool requires even spatial size")
    y = x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    return y, (h, w)


def avgpool2_backward(cache, gy: np.ndarray) -> np.ndarray:
    h, w = cache
    return np.repeat(np.repeat(gy, 2, axis=2), 2, axis=3) / 4.0


@lru_cache(maxsize=64)
def _bilinear_weights(h: int, w: int):
    """Index/weight arrays for 2x bilinear upsampling (half-pixel centers)."""

    def axis(n_in: int):
        src = (np.arange(2 * n_in) + 0.5) / 2.0 - 0.5
        i0 = np.clip(np.floor(src).astype(int), 0, n_in - 1)
        i1 = np.clip(i0 + 1, 0, n_in - 1)
        t = np.clip(src - np.floor(src), 0.0, 1.0)
        t = np.where(src < 0, 0.0, np.where(src > n_in - 1, 1.0, t))
        return i0, i1, t

    return axis(h), axis(w)


def upsample2_forward(x: np.ndarray):
    n, c, h, w = x.shape
    (i0, i1, ti), (j0, j1, tj) = _bilinear_weights(h, w)
    top = x[:, :, i0, :] * (1 - ti)[None, None, :, None] + x[:, :, i1, :] * ti[None, None, :, None]
    y = top[:, :, :, j0] * (1 - tj)[None, None, None, :] + top[:, :, :, j1] * tj[None, None, None, :]
    return y, (h, w)


def upsample2_backward(cache, gy: np.ndarray) -> np.ndarray:
    h, w = cache
    (i0, i1, ti), (j0, j1, tj) = _bilinear_weights(h, w)
    n, c = gy.shape[:2]
    gtop = np.zeros((n, c, 2 * h, w), dtype=np.float64)
    np.add.at(gtop, (slice(None), slice(None), slice(None), j0),
              gy * (1 - tj)[None, None, None, :])
    np.add.at(gtop, (slice(None), slice(None), slice(None), j1),
              gy * tj[None, None, None, :])
    gx = np.zeros((n, c, h, w), dtype=np.float64)
    np.add.at(gx, (slice(None), slice(None), i0, slice(None)),
              gtop * (1 - ti)[None, None, :, None])
    np.add.at(gx, (slice(None), slice(None), i1, slice(None)),
              gtop * ti[None, None, :, None])
    return gx


# ---------------------------------------------------------------------------
# guided modulation: per-channel normalization, then scale/shift maps


def modulate_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray):
    """Normalize each channel over its pixels, then y = gamma*xhat + beta."""
    mean = x.mean(axis=(2, 3), keepdims=True)
    var = x.var(axis=(2, 3), keepdims=True)
    s = np.sqrt(var + NORM_EPS)
    xhat = (x - mean) / s
    y = gamma * xhat + beta
    return y, (xhat, s, gamma)


def modulate_backward(cache, gy: np.ndarray):
    xhat, s, gamma = cache
    ggamma = gy * xhat
    gbeta = gy
    gxhat = gy * gamma
    m = gxhat.mean(axis=(2, 3), keepdims=True)
    mx = (gxhat * xhat).mean(axis=(2, 3), keepdims=True)
    gx = (gxhat - m - xhat * mx) / s
    return gx, ggamma, gbeta


# ---------------------------------------------------------------------------
# parameter initialization and Adam


def init_conv(gen: np.random.Generator, out_ch: int, in_ch: int, k: int,
              bias: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
    """Uniform(-a, a) weights with a = sqrt(1 / fan_in)."""
    a = np.sqrt(1.0 / (in_ch * k * k))
    w = gen.uniform(-a, a, size=(out_ch, in_ch, k, k))
    b = np.full(out_ch, float(bias))
    return w, b


def param_generator(seed: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(key=np.uint64(seed) + (np.uint64(stream + 100) << np.uint64(32)))
    )


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: Dict[str, np.ndarray],
              grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """One bias-corrected Adam update; returns the new parameter dict."""
    state.t += 1
    t = state.t
    out = {}
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {key}")
        m = state.m.get(key)
        v = state.v.get(key)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.m[key] = m
        state.v[key] = v
        mhat = m / (1 - state.beta1 ** t)
        vhat = v / (1 - state.beta2 ** t)
        out[key] = p - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return out
