"""File formats: MBC1 cube files, run configuration, metric reports.

An MBC file is a single UTF-8 JSON header line terminated by ``\\n``
followed by the raw samples as little-endian 32-bit floats, band
sequential, row-major within each band.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import numpy as np

from .cubes import EntryMask, ImageCube

MAGIC = "MBC1"
_MAX_DIM = 2**31 - 1


class FormatError(ValueError):
    """Raised on malformed MBC files or configs."""


def write_cube(path, cube: ImageCube) -> None:
    header: Dict[str, Any] = {
        "magic": MAGIC,
        "height": cube.height,
        "width": cube.width,
        "bands": cube.bands,
        "dtype": "f32",
        "interleave": "bsq",
    }
    if cube.wavelengths is not None:
        header["wavelengths"] = list(cube.wavelengths)
    payload = cube.data.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(payload)


def read_cube(path) -> ImageCube:
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"unreadable MBC header: {exc}") from exc
        if not isinstance(header, dict) or header.get("magic") != MAGIC:
            raise FormatError(f"bad magic, expected {MAGIC!r}")
        if header.get("dtype") != "f32" or header.get("interleave") != "bsq":
            raise FormatError("unsupported dtype/interleave")
        try:
            bands = int(header["height"]), int(header["width"]), int(header["bands"])
            h, w, b = bands
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError("missing or invalid dimensions") from exc
        if not (1 <= h <= _MAX_DIM and 1 <= w <= _MAX_DIM and 1 <= b <= _MAX_DIM):
            raise FormatError("dimension overflow")
        n = b * h * w
        raw = fh.read(4 * n)
        if len(raw) != 4 * n:
            raise FormatError(f"truncated payload: expected {4 * n} bytes, got {len(raw)}")
        data = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(b, h, w)
        return ImageCube(data, wavelengths=header.get("wavelengths"))


def write_mask(path, mask: EntryMask) -> None:
    """Masks are stored as MBC cubes with a 0/1 payload."""
    write_cube(path, ImageCube(mask.kept.astype(np.float64)))


def read_mask(path) -> EntryMask:
    cube = read_cube(path)
    return EntryMask(cube.data > 0.5)


@dataclass(frozen=True)
class GddConfig:
    epochs: int = 2000
    lr: float = 0.01
    latent_channels: int = 32
    width: int = 32
    n_fru: int = 4
    upsample_levels: int = 0
    leaky_slope: float = 0.2
    restart_every: int = 0

    def validate(self):
        if self.epochs < 0 or self.lr <= 0:
            raise FormatError("gdd epochs must be >= 0 and lr > 0")
        if self.latent_channels < 1 or self.width < 1 or self.n_fru < 1:
            raise FormatError("gdd channel/block counts must be >= 1")
        if self.upsample_levels < 0:
            raise FormatError("gdd upsample_levels must be >= 0")
        if self.restart_every < 0:
            raise FormatError("gdd restart_every must be >= 0")


@dataclass(frozen=True)
class VaeConfig:
    epochs: int = 100
    lr: float = 1e-3
    patch: int = 25
    kl_weight: float = 1e-2
    latent_dim: int = 4
    width: int = 16
    enc_blocks: int = 2
    dec_blocks: int = 2
    leaky_slope: float = 0.2

    def validate(self):
        if self.epochs < 0 or self.lr <= 0:
            raise FormatError("vae epochs must be >= 0 and lr > 0")
        if self.patch < 1 or self.latent_dim < 1 or self.width < 1:
            raise FormatError("vae patch/latent/width must be >= 1")
        if self.kl_weight < 0:
            raise FormatError("vae kl_weight must be >= 0")


@dataclass(frozen=True)
class DegradationConfig:
    blur_size: int = 5
    blur_sigma: float = 2.0
    factor: int = 5
    srf: str = "avg"
    snr_hs: float = 35.0
    snr_hr: float = 30.0
    mask_pixels: Optional[float] = None

    def validate(self):
        if self.blur_size < 1 or self.blur_size % 2 == 0:
            raise FormatError("blur_size must be odd and >= 1")
        if self.blur_sigma <= 0 or self.factor < 1:
            raise FormatError("blur_sigma must be > 0 and factor >= 1")
        if self.mask_pixels is not None and not (0.0 < self.mask_pixels <= 1.0):
            raise FormatError("mask_pixels must lie in (0, 1]")


@dataclass(frozen=True)
class RunConfig:
    task: str = "fusion"
    subspace_dim: int = 8
    mu: float = 1e-4          # fusion default; inpainting default is 1e-3
    lam: float = 1e-5
    admm_iters: int = 50
    z_steps: int = 50
    z_lr: float = 0.01
    decoder: str = "gdd"
    gdd: GddConfig = field(default_factory=GddConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    degradation: DegradationConfig = field(default_factory=DegradationConfig)
    seed: int = 0

    def validate(self):
        if self.task not in ("fusion", "inpainting"):
            raise FormatError(f"unknown task {self.task!r}")
        if self.decoder not in ("gdd", "vae"):
            raise FormatError(f"unknown decoder {self.decoder!r}")
        if self.mu <= 0:
            raise FormatError("mu must be > 0")
        if self.lam < 0:
            raise FormatError("lambda must be >= 0")
        if self.subspace_dim < 1:
            raise FormatError("subspace_dim must be >= 1")
        if self.admm_iters < 1:
            raise FormatError("admm_iters must be >= 1")
        if self.z_steps < 0 or self.z_lr <= 0:
            raise FormatError("z_steps must be >= 0 and z_lr > 0")
        self.gdd.validate()
        self.vae.validate()
        self.degradation.validate()


_TASK_MU = {"fusion": 1e-4, "inpainting": 1e-3}


def _build(cls, doc: dict, what: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise FormatError(f"unknown {what} keys: {sorted(unknown)}")
    return cls(**doc)


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise FormatError("config document must be a JSON object")
    doc = dict(doc)
    if "lambda" in doc:
        doc["lam"] = doc.pop("lambda")
    task = doc.get("task", "fusion")
    doc.setdefault("mu", _TASK_MU.get(task, 1e-4))
    for key, cls in (("gdd", GddConfig), ("vae", VaeConfig), ("degradation", DegradationConfig)):
        if key in doc:
            sub = doc[key]
            if not isinstance(sub, dict):
                raise FormatError(f"{key} section must be an object")
            doc[key] = _build(cls, sub, key)
    cfg = _build(RunConfig, doc, "config")
    cfg.validate()
    return cfg


def read_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"config parse error: {exc}") from exc
    return config_from_dict(doc)


def write_report(path, metrics) -> None:
    """Serialize a metric report (see :mod:`mbinv.metrics`) as JSON."""

    def _scalar(x: float):
        return "inf" if math.isinf(x) else float(x)

    doc = {
        "psnr": _scalar(metrics.psnr),
        "sam": float(metrics.sam),
        "uiqi": float(metrics.uiqi),
        "ergas": float(metrics.ergas),
        "ssim": float(metrics.ssim),
        "psnr_bands": [_scalar(v) for v in metrics.psnr_bands],
        "uiqi_bands": [float(v) for v in metrics.uiqi_bands],
        "ssim_bands": [float(v) for v in metrics.ssim_bands],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def read_report(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)

    def _undo(x):
        return math.inf if x == "inf" else x

    doc["psnr"] = _undo(doc["psnr"])
    doc["psnr_bands"] = [_undo(v) for v in doc["psnr_bands"]]
    return doc
