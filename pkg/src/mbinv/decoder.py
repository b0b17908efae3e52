"""Guided deep decoder: an untrained generative map from a latent field to
subspace coefficients, modulated by features of the high-resolution image.

The decoder stream is [URU x L_up: 2x bilinear upsample -> 3x3 conv ->
guided modulation -> LeakyReLU] then [FRU x n_fru: 3x3 conv -> guided
modulation -> LeakyReLU] then a 1x1 linear conv.  Guided modulation
normalizes each channel over its pixels and applies scale/shift maps
produced from the guidance features of the matching scale by a 1x1 conv.
The guidance encoder (a small conv pyramid) is trained jointly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import nn
from .cubes import ImageCube, ObservationSet
from .mbio import GddConfig
from .operators import standard_normal
from .subspace import SpectralBasis


@dataclass(frozen=True)
class FeatureMap:
    """Channel-major real feature stack."""

    data: np.ndarray  # (channels, height, width)

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 3:
            raise ValueError("feature map must be (channels, height, width)")
        if not np.all(np.isfinite(d)):
            raise ValueError("feature map contains non-finite values")
        object.__setattr__(self, "data", d)


LatentCode = FeatureMap


@dataclass
class GuidedDecoderModel:
    latent_channels: int
    width: int
    n_fru: int
    upsample_levels: int
    out_channels: int
    leaky_slope: float
    params: Dict[str, np.ndarray]
    hr: np.ndarray                       # (C_g, H, W) guidance image
    guidance_features: Optional[List[np.ndarray]] = None  # last computed pyramid

    @property
    def height(self) -> int:
        return self.hr.shape[1]

    @property
    def width_px(self) -> int:
        return self.hr.shape[2]

    def latent_shape(self) -> Tuple[int, int, int]:
        s = 2 ** self.upsample_levels
        if self.height % s or self.width_px % s:
            raise ValueError("guidance size not divisible by 2^upsample_levels")
        return (self.latent_channels, self.height // s, self.width_px // s)


def init_gdd(hr: ImageCube, out_channels: int, cfg: GddConfig, seed: int) -> GuidedDecoderModel:
    gen = nn.param_generator(seed, stream=1)
    cg = hr.bands
    w = cfg.width
    params: Dict[str, np.ndarray] = {}
    for lev in range(cfg.upsample_levels + 1):
        in_ch = cg if lev == 0 else w
        params[f"genc{lev}_w"], params[f"genc{lev}_b"] = nn.init_conv(gen, w, in_ch, 3)
    for j in range(cfg.upsample_levels):
        in_ch = cfg.latent_channels if j == 0 else w
        params[f"uru{j}_w"], params[f"uru{j}_b"] = nn.init_conv(gen, w, in_ch, 3)
        params[f"uru{j}_mod_w"], params[f"uru{j}_mod_b"] = _init_mod(gen, w)
    for i in range(cfg.n_fru):
        in_ch = cfg.latent_channels if (cfg.upsample_levels == 0 and i == 0) else w
        params[f"fru{i}_w"], params[f"fru{i}_b"] = nn.init_conv(gen, w, in_ch, 3)
        params[f"fru{i}_mod_w"], params[f"fru{i}_mod_b"] = _init_mod(gen, w)
    params["out_w"], params["out_b"] = nn.init_conv(gen, out_channels, w, 1)
    return GuidedDecoderModel(
        latent_channels=cfg.latent_channels,
        width=w,
        n_fru=cfg.n_fru,
        upsample_levels=cfg.upsample_levels,
        out_channels=out_channels,
        leaky_slope=cfg.leaky_slope,
        params=params,
        hr=np.asarray(hr.data, dtype=np.float64),
    )


def _init_mod(gen, width: int):
    """1x1 conv producing (gamma, beta); gamma bias starts at 1 so the
    identity-scale path is open at initialization."""
    w, b = nn.init_conv(gen, 2 * width, width, 1)
    b[:width] = 1.0
    return w, b


def draw_latent(model: GuidedDecoderModel, seed: int, scale: float = 0.1) -> np.ndarray:
    """Fixed Gaussian latent field, N(0, scale^2)."""
    return scale * standard_normal(model.latent_shape(), seed, stream=7)


def guidance_encode(hr: ImageCube, levels: int, width: int,
                    params: Optional[Dict[str, np.ndarray]] = None,
                    slope: float = 0.2, seed: int = 0) -> List[FeatureMap]:
    """Standalone guidance pyramid: conv -> LeakyReLU (-> 2x avg pool)."""
    if params is None:
        gen = nn.param_generator(seed, stream=1)
        params = {}
        for lev in range(levels + 1):
            in_ch = hr.bands if lev == 0 else width
            params[f"genc{lev}_w"], params[f"genc{lev}_b"] = nn.init_conv(gen, width, in_ch, 3)
    feats, _ = _guidance_forward(np.asarray(hr.data, dtype=np.float64), levels, params, slope)
    return [FeatureMap(f[0]) for f in feats]


def _guidance_forward(hr: np.ndarray, levels: int, params: Dict[str, np.ndarray], slope: float):
    x = hr[None]
    feats = []
    caches = []
    for lev in range(levels + 1):
        if lev > 0:
            x, cpool = nn.avgpool2_forward(x)
        else:
            cpool = None
        y, cconv = nn.conv2d_forward(x, params[f"genc{lev}_w"], params[f"genc{lev}_b"])
        f, crelu = nn.leaky_relu_forward(y, slope)
        feats.append(f)
        caches.append((cpool, cconv, crelu))
        x = f
    return feats, caches


def _guidance_backward(caches, gfeats, levels: int, grads: Dict[str, np.ndarray], slope: float):
    """Backprop the pyramid; gfeats[lev] accumulates modulation gradients."""
    carry = None
    for lev in range(levels, -1, -1):
        g = gfeats[lev]
        if carry is not None:
            g = g + carry
        cpool, cconv, crelu = caches[lev]
        g = nn.leaky_relu_backward(crelu, g)
        gx, gw, gb = nn.conv2d_backward(cconv, g)
        grads[f"genc{lev}_w"] = grads.get(f"genc{lev}_w", 0) + gw
        grads[f"genc{lev}_b"] = grads.get(f"genc{lev}_b", 0) + gb
        if cpool is not None:
            carry = nn.avgpool2_backward(cpool, gx)
        else:
            carry = None
    return carry  # gradient w.r.t. hr; unused


def _block_forward(x, gfeat, wkey, params, slope, records):
    y, cconv = nn.conv2d_forward(x, params[f"{wkey}_w"], params[f"{wkey}_b"])
    gb, cmod1 = nn.conv2d_forward(gfeat, params[f"{wkey}_mod_w"], params[f"{wkey}_mod_b"])
    width = y.shape[1]
    gamma, beta = gb[:, :width], gb[:, width:]
    m, cmod = nn.modulate_forward(y, gamma, beta)
    out, crelu = nn.leaky_relu_forward(m, slope)
    records.append((wkey, cconv, cmod1, cmod, crelu))
    return out


def _block_backward(rec, gy, params, grads, gfeats_grad, level, slope):
    wkey, cconv, cmod1, cmod, crelu = rec
    g = nn.leaky_relu_backward(crelu, gy)
    g, ggamma, gbeta = nn.modulate_backward(cmod, g)
    ggb = np.concatenate([ggamma, gbeta], axis=1)
    gfeat, gmw, gmb = nn.conv2d_backward(cmod1, ggb)
    grads[f"{wkey}_mod_w"] = gmw
    grads[f"{wkey}_mod_b"] = gmb
    gfeats_grad[level] = gfeats_grad[level] + gfeat
    gx, gw, gb = nn.conv2d_backward(cconv, g)
    grads[f"{wkey}_w"] = gw
    grads[f"{wkey}_b"] = gb
    return gx


def decoder_forward(model: GuidedDecoderModel, z: np.ndarray):
    """Map a latent field (k, h, w) to coefficients (out_channels, H, W)."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != model.latent_shape():
        raise ValueError(f"latent shape {z.shape} != expected {model.latent_shape()}")
    L = model.upsample_levels
    feats, gcaches = _guidance_forward(model.hr, L, model.params, model.leaky_slope)
    model.guidance_features = [f[0] for f in feats]
    x = z[None]
    records = []
    ups = []
    for j in range(L):
        x, cup = nn.upsample2_forward(x)
        ups.append(cup)
        lev = L - 1 - j
        x = _block_forward(x, feats[lev], f"uru{j}", model.params, model.leaky_slope, records)
    for i in range(model.n_fru):
        x = _block_forward(x, feats[0], f"fru{i}", model.params, model.leaky_slope, records)
    out, cout = nn.conv2d_forward(x, model.params["out_w"], model.params["out_b"])
    cache = (records, ups, gcaches, cout, feats)
    return out[0], cache


def decoder_backward(model: GuidedDecoderModel, cache, grad_out: np.ndarray):
    """Exact reverse-mode gradients of :func:`decoder_forward`.

    Returns (grad_z, grads) where grads covers every parameter including
    the guidance encoder convs.
    """
    records, ups, gcaches, cout, feats = cache
    L = model.upsample_levels
    grads: Dict[str, np.ndarray] = {}
    gfeats_grad = [np.zeros_like(f) for f in feats]
    g = np.asarray(grad_out, dtype=np.float64)[None]
    g, gw, gb = nn.conv2d_backward(cout, g)
    grads["out_w"] = gw
    grads["out_b"] = gb
    for i in range(model.n_fru - 1, -1, -1):
        g = _block_backward(records[L + i], g, model.params, grads, gfeats_grad, 0,
                            model.leaky_slope)
    for j in range(L - 1, -1, -1):
        g = _block_backward(records[j], g, model.params, grads, gfeats_grad, L - 1 - j,
                            model.leaky_slope)
        g = nn.upsample2_backward(ups[j], g)
    _guidance_backward(gcaches, gfeats_grad, L, grads, model.leaky_slope)
    return g[0], grads


def train_gdd(obs: ObservationSet, basis: SpectralBasis, problem, cfg: GddConfig,
              seed: int) -> Tuple[GuidedDecoderModel, np.ndarray, List[float]]:
    """Fit the decoder parameters to the observed data through the task's
    forward map (the latent field stays fixed, deep-image-prior style)."""
    model = init_gdd(obs.hr, basis.dim, cfg, seed)
    z = draw_latent(model, seed)
    n = model.height * model.width_px
    state = nn.AdamState(lr=cfg.lr)
    losses: List[float] = []
    for epoch in range(cfg.epochs):
        # Adam warm restarts: clearing the moment estimates periodically lets
        # the optimizer escape the flat basin it settles into late in a cycle
        if cfg.restart_every and epoch and epoch % cfg.restart_every == 0:
            state = nn.AdamState(lr=cfg.lr)
        a, cache = decoder_forward(model, z)
        amat = a.reshape(basis.dim, n)
        loss = problem.misfit(amat)
        if not np.isfinite(loss):
            raise FloatingPointError(f"GDD training diverged at epoch {epoch}")
        ga = problem.misfit_grad(amat).reshape(a.shape)
        _, grads = decoder_backward(model, cache, ga)
        model.params = nn.adam_step(state, model.params, grads)
        losses.append(loss)
    return model, z, losses


# ---------------------------------------------------------------------------
# checkpoint format: JSON header line + little-endian f64 payload


def save_gdd(path, model: GuidedDecoderModel, z: np.ndarray, seed: int) -> None:
    keys = sorted(model.params)
    header = {
        "kind": "gdd",
        "seed": seed,
        "latent_channels": model.latent_channels,
        "width": model.width,
        "n_fru": model.n_fru,
        "upsample_levels": model.upsample_levels,
        "out_channels": model.out_channels,
        "leaky_slope": model.leaky_slope,
        "z_shape": list(z.shape),
        "params": [[k, list(model.params[k].shape)] for k in keys],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        for k in keys:
            fh.write(model.params[k].astype("<f8").tobytes())
        fh.write(np.asarray(z, dtype="<f8").tobytes())


def load_gdd(path, hr: ImageCube) -> Tuple[GuidedDecoderModel, np.ndarray, int]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("kind") != "gdd":
            raise ValueError("not a GDD checkpoint")
        params = {}
        for k, shape in header["params"]:
            n = int(np.prod(shape))
            params[k] = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape).copy()
        zshape = header["z_shape"]
        n = int(np.prod(zshape))
        z = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(zshape).copy()
    model = GuidedDecoderModel(
        latent_channels=header["latent_channels"],
        width=header["width"],
        n_fru=header["n_fru"],
        upsample_levels=header["upsample_levels"],
        out_channels=header["out_channels"],
        leaky_slope=header["leaky_slope"],
        params=params,
        hr=np.asarray(hr.data, dtype=np.float64),
    )
    return model, z, header["seed"]


class GddGenerator:
    """Adapter giving the ADMM a uniform generate/backward surface."""

    def __init__(self, model: GuidedDecoderModel):
        self.model = model

    def latent_shape(self):
        return self.model.latent_shape()

    def generate(self, z: np.ndarray):
        a, cache = decoder_forward(self.model, z)
        return a.reshape(self.model.out_channels, -1), cache

    def generate_backward(self, cache, grad_a: np.ndarray):
        h, w = self.model.height, self.model.width_px
        gz, _ = decoder_backward(self.model, cache,
                                 grad_a.reshape(self.model.out_channels, h, w))
        return gz
