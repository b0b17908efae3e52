"""Patch variational autoencoder used as an uninformed generative prior.

Encoder and decoder are small stacks of 3x3 conv + LeakyReLU blocks
(fully convolutional, so the decoder accepts any patch size).  Trained on
single-band patches drawn from the guidance image only; after training
the decoder generates each coefficient channel patchwise, with uniform
averaging on half-patch overlaps.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from . import nn
from .cubes import ImageCube
from .mbio import VaeConfig
from .operators import standard_normal


@dataclass
class VaeModel:
    latent_dim: int
    width: int
    enc_blocks: int
    dec_blocks: int
    patch: int
    leaky_slope: float
    kl_weight: float
    params: Dict[str, np.ndarray]


def init_vae(cfg: VaeConfig, seed: int) -> VaeModel:
    gen = nn.param_generator(seed, stream=2)
    params: Dict[str, np.ndarray] = {}
    for p in range(cfg.enc_blocks):
        in_ch = 1 if p == 0 else cfg.width
        params[f"enc{p}_w"], params[f"enc{p}_b"] = nn.init_conv(gen, cfg.width, in_ch, 3)
    params["enc_head_w"], params["enc_head_b"] = nn.init_conv(gen, 2 * cfg.latent_dim, cfg.width, 1)
    for q in range(cfg.dec_blocks):
        in_ch = cfg.latent_dim if q == 0 else cfg.width
        params[f"dec{q}_w"], params[f"dec{q}_b"] = nn.init_conv(gen, cfg.width, in_ch, 3)
    params["dec_head_w"], params["dec_head_b"] = nn.init_conv(gen, 1, cfg.width, 1)
    return VaeModel(
        latent_dim=cfg.latent_dim,
        width=cfg.width,
        enc_blocks=cfg.enc_blocks,
        dec_blocks=cfg.dec_blocks,
        patch=cfg.patch,
        leaky_slope=cfg.leaky_slope,
        kl_weight=cfg.kl_weight,
        params=params,
    )


def encode(model: VaeModel, x: np.ndarray):
    """x (n, 1, h, w) -> (mu, logvar) each (n, latent_dim, h, w), plus cache."""
    caches = []
    h = x
    for p in range(model.enc_blocks):
        y, cc = nn.conv2d_forward(h, model.params[f"enc{p}_w"], model.params[f"enc{p}_b"])
        h, cr = nn.leaky_relu_forward(y, model.leaky_slope)
        caches.append((cc, cr))
    head, chead = nn.conv2d_forward(h, model.params["enc_head_w"], model.params["enc_head_b"])
    mu = head[:, :model.latent_dim]
    logvar = head[:, model.latent_dim:]
    return mu, logvar, (caches, chead)


def encode_backward(model: VaeModel, cache, gmu: np.ndarray, glogvar: np.ndarray,
                    grads: Dict[str, np.ndarray]):
    caches, chead = cache
    g = np.concatenate([gmu, glogvar], axis=1)
    g, gw, gb = nn.conv2d_backward(chead, g)
    grads["enc_head_w"] = grads.get("enc_head_w", 0) + gw
    grads["enc_head_b"] = grads.get("enc_head_b", 0) + gb
    for p in range(model.enc_blocks - 1, -1, -1):
        cc, cr = caches[p]
        g = nn.leaky_relu_backward(cr, g)
        g, gw, gb = nn.conv2d_backward(cc, g)
        grads[f"enc{p}_w"] = grads.get(f"enc{p}_w", 0) + gw
        grads[f"enc{p}_b"] = grads.get(f"enc{p}_b", 0) + gb
    return g


def decode(model: VaeModel, z: np.ndarray):
    """z (n, latent_dim, h, w) -> patches (n, 1, h, w), plus cache."""
    caches = []
    h = z
    for q in range(model.dec_blocks):
        y, cc = nn.conv2d_forward(h, model.params[f"dec{q}_w"], model.params[f"dec{q}_b"])
        h, cr = nn.leaky_relu_forward(y, model.leaky_slope)
        caches.append((cc, cr))
    out, chead = nn.conv2d_forward(h, model.params["dec_head_w"], model.params["dec_head_b"])
    return out, (caches, chead)


def decode_backward(model: VaeModel, cache, gout: np.ndarray,
                    grads: Dict[str, np.ndarray]):
    caches, chead = cache
    g, gw, gb = nn.conv2d_backward(chead, gout)
    grads["dec_head_w"] = grads.get("dec_head_w", 0) + gw
    grads["dec_head_b"] = grads.get("dec_head_b", 0) + gb
    for q in range(model.dec_blocks - 1, -1, -1):
        cc, cr = caches[q]
        g = nn.leaky_relu_backward(cr, g)
        g, gw, gb = nn.conv2d_backward(cc, g)
        grads[f"dec{q}_w"] = grads.get(f"dec{q}_w", 0) + gw
        grads[f"dec{q}_b"] = grads.get(f"dec{q}_b", 0) + gb
    return g


def kl_divergence(mu: np.ndarray, logvar: np.ndarray) -> float:
    """KL(N(mu, diag exp(logvar)) || N(0, I)), summed over latent entries."""
    return float(0.5 * np.sum(mu * mu + np.exp(logvar) - 1.0 - logvar))


def extract_patches(hr: ImageCube, n_patches: int, patch: int, seed: int) -> np.ndarray:
    """Random single-band patches from the guidance image, (n, 1, p, p)."""
    if patch > min(hr.height, hr.width):
        raise ValueError("patch larger than guidance image")
    gen = np.random.Generator(np.random.Philox(key=np.uint64(seed) + (np.uint64(21) << np.uint64(32))))
    bands = gen.integers(0, hr.bands, n_patches)
    ys = gen.integers(0, hr.height - patch + 1, n_patches)
    xs = gen.integers(0, hr.width - patch + 1, n_patches)
    out = np.stack([hr.data[b, y:y + patch, x:x + patch]
                    for b, y, x in zip(bands, ys, xs)])
    return out[:, None]


def train_vae(patches: np.ndarray, cfg: VaeConfig, seed: int,
              batch: int = 32) -> Tuple[VaeModel, List[float]]:
    """Minimize reconstruction MSE + kl_weight * KL by Adam with one
    reparameterization draw per sample per epoch."""
    model = init_vae(cfg, seed)
    n = patches.shape[0]
    state = nn.AdamState(lr=cfg.lr)
    losses: List[float] = []
    shuffler = np.random.Generator(np.random.Philox(key=np.uint64(seed) + (np.uint64(22) << np.uint64(32))))
    for epoch in range(cfg.epochs):
        order = shuffler.permutation(n)
        eps_all = standard_normal((n, cfg.latent_dim) + patches.shape[2:], seed,
                                  stream=1000 + epoch)
        total = 0.0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            x = patches[idx]
            eps = eps_all[idx]
            nb = x.shape[0]
            grads: Dict[str, np.ndarray] = {}
            mu, logvar, ecache = encode(model, x)
            sigma = np.exp(0.5 * logvar)
            z = mu + sigma * eps
            xhat, dcache = decode(model, z)
            recon = float(np.sum((xhat - x) ** 2) / nb)
            kl = kl_divergence(mu, logvar) / nb
            loss = recon + cfg.kl_weight * kl
            if not np.isfinite(loss):
                raise FloatingPointError(f"VAE training diverged at epoch {epoch}")
            gxhat = 2.0 * (xhat - x) / nb
            gz = decode_backward(model, dcache, gxhat, grads)
            gmu = gz + cfg.kl_weight * mu / nb
            glogvar = gz * eps * 0.5 * sigma + cfg.kl_weight * 0.5 * (np.exp(logvar) - 1.0) / nb
            encode_backward(model, ecache, gmu, glogvar, grads)
            model.params = nn.adam_step(state, model.params, grads)
            total += loss * nb
        losses.append(total / n)
    return model, losses


# ---------------------------------------------------------------------------
# patchwise generation over a full image


def patch_grid(extent: int, patch: int, stride: int) -> List[int]:
    if patch > extent:
        raise ValueError("patch larger than image")
    starts = list(range(0, extent - patch + 1, stride))
    if starts[-1] != extent - patch:
        starts.append(extent - patch)
    return starts


def vae_generate(model: VaeModel, z_patches: np.ndarray, height: int, width: int,
                 stride: int | None = None):
    """Assemble decoded patches into (channels, height, width) with uniform
    averaging on overlaps.  z_patches is (channels, n_patches, latent_dim,
    patch, patch) in row-major patch-grid order."""
    p = model.patch
    stride = stride or max(1, p // 2)
    ys = patch_grid(height, p, stride)
    xs = patch_grid(width, p, stride)
    c, n_patches = z_patches.shape[:2]
    if n_patches != len(ys) * len(xs):
        raise ValueError(f"expected {len(ys) * len(xs)} patches, got {n_patches}")
    flat = z_patches.reshape(c * n_patches, model.latent_dim, p, p)
    dec, cache = decode(model, flat)
    dec = dec.reshape(c, n_patches, p, p)
    out = np.zeros((c, height, width))
    weight = np.zeros((height, width))
    k = 0
    for y in ys:
        for x in xs:
            out[:, y:y + p, x:x + p] += dec[:, k]
            weight[y:y + p, x:x + p] += 1.0
            k += 1
    if np.any(weight == 0):
        raise ValueError("patch grid leaves coverage gaps")
    out /= weight
    return out, (cache, ys, xs, weight, z_patches.shape)


def vae_generate_backward(model: VaeModel, cache, grad_out: np.ndarray) -> np.ndarray:
    dcache, ys, xs, weight, zshape = cache
    c = zshape[0]
    p = model.patch
    gw = grad_out / weight[None]
    gpatches = np.empty((c, zshape[1], p, p))
    k = 0
    for y in ys:
        for x in xs:
            gpatches[:, k] = gw[:, y:y + p, x:x + p]
            k += 1
    grads: Dict[str, np.ndarray] = {}
    gz = decode_backward(model, dcache, gpatches.reshape(-1, 1, p, p), grads)
    return gz.reshape(zshape)


class VaeGenerator:
    """Adapter matching the ADMM generate/backward surface."""

    def __init__(self, model: VaeModel, out_channels: int, height: int, width: int,
                 stride: int | None = None):
        self.model = model
        self.out_channels = out_channels
        self.height = height
        self.width = width
        self.stride = stride or max(1, model.patch // 2)
        self.n_patches = (len(patch_grid(height, model.patch, self.stride))
                          * len(patch_grid(width, model.patch, self.stride)))

    def latent_shape(self):
        return (self.out_channels, self.n_patches, self.model.latent_dim,
                self.model.patch, self.model.patch)

    def draw_latent(self, seed: int, scale: float = 0.1) -> np.ndarray:
        return scale * standard_normal(self.latent_shape(), seed, stream=8)

    def generate(self, z: np.ndarray):
        a, cache = vae_generate(self.model, z, self.height, self.width, self.stride)
        return a.reshape(self.out_channels, -1), cache

    def generate_backward(self, cache, grad_a: np.ndarray):
        return vae_generate_backward(
            self.model, cache, grad_a.reshape(self.out_channels, self.height, self.width))


def save_vae(path, model: VaeModel, seed: int) -> None:
    keys = sorted(model.params)
    header = {
        "kind": "vae",
        "seed": seed,
        "latent_dim": model.latent_dim,
        "width": model.width,
        "enc_blocks": model.enc_blocks,
        "dec_blocks": model.dec_blocks,
        "patch": model.patch,
        "leaky_slope": model.leaky_slope,
        "kl_weight": model.kl_weight,
        "params": [[k, list(model.params[k].shape)] for k in keys],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        for k in keys:
            fh.write(model.params[k].astype("<f8").tobytes())


def load_vae(path) -> Tuple[VaeModel, int]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("kind") != "vae":
            raise ValueError("not a VAE checkpoint")
        params = {}
        for k, shape in header["params"]:
            n = int(np.prod(shape))
            params[k] = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape).copy()
    model = VaeModel(
        latent_dim=header["latent_dim"],
        width=header["width"],
        enc_blocks=header["enc_blocks"],
        dec_blocks=header["dec_blocks"],
        patch=header["patch"],
        leaky_slope=header["leaky_slope"],
        kl_weight=header["kl_weight"],
        params=params,
    )
    return model, header["seed"]
