"""Command-line workbench: phantom | degrade | train | fuse | inpaint | eval."""
from __future__ import annotations

import argparse
import csv
import math
import sys
from typing import Optional

import numpy as np

from . import mbio
from .cubes import EntryMask, ImageCube, ObservationSet
from .decoder import GddGenerator, draw_latent, load_gdd, save_gdd, train_gdd
from .mbio import RunConfig, read_config
from .metrics import evaluate
from .operators import (BlurOperator, DegradationModel, Downsampler,
                        SpectralResponse, degrade, gaussian_kernel,
                        random_pixel_mask)
from .phantom import PhantomSpec, make_phantom
from .solvers import FusionProblem, InpaintProblem, admm_solve, write_trace
from .subspace import estimate_subspace
from .vae import VaeGenerator, extract_patches, load_vae, save_vae, train_vae

PRESETS = {
    # Wald-protocol recipes for the standard experiment setups
    "pavia": dict(task="fusion", blur_size=5, blur_sigma=2.0, factor=5,
                  srf="avg", snr_hs=35.0, snr_hr=30.0),
    "moffett": dict(task="fusion", blur_size=7, blur_sigma=2.0, factor=7,
                    srf="band-range=1:41", snr_hs=30.0, snr_hr=35.0),
    "ugr": dict(task="inpainting", blur_size=1, blur_sigma=1.0, factor=1,
                srf="rgb", snr_hs=math.inf, snr_hr=math.inf,
                stripe_bands=25, stripe_cols=0.1),
    "fru": dict(task="inpainting", blur_size=1, blur_sigma=1.0, factor=1,
                srf="rgb", snr_hs=math.inf, snr_hr=math.inf,
                mask_pixels=0.05),
}


def _parse_srf(spec: str, bands: int) -> SpectralResponse:
    if spec == "avg":
        return SpectralResponse.average(bands)
    if spec == "identity":
        return SpectralResponse.identity(bands)
    if spec == "rgb":
        return SpectralResponse.rgb_like(min(3, bands), bands)
    if spec.startswith("band-range=") or spec.startswith("band-range:"):
        rng = spec[len("band-range="):]
        first, last = rng.split(":")
        return SpectralResponse.band_range(int(first), int(last), bands)
    raise ValueError(f"unknown SRF spec {spec!r} "
                     "(expected avg | identity | rgb | band-range=a:b)")


def _load_config(path: Optional[str], task: str) -> RunConfig:
    if path is None:
        return mbio.config_from_dict({"task": task})
    cfg = read_config(path)
    if cfg.task != task:
        raise ValueError(f"config task {cfg.task!r} does not match command task {task!r}")
    return cfg


def _estimate_basis(hs: ImageCube, dim: int, mask: Optional[EntryMask]):
    """PCA of the observed spectra; with a mask, only fully observed pixels."""
    if mask is not None:
        full = mask.flat().all(axis=0).reshape(hs.height, hs.width)
        if full.any():
            cols = hs.data[:, full]
            sub = ImageCube(cols[:, :, None])
            return estimate_subspace(sub, min(dim, cols.shape[1]))
    return estimate_subspace(hs, dim)


def cmd_phantom(args) -> int:
    spec = PhantomSpec(height=args.height, width=args.width, bands=args.bands,
                       n_endmembers=args.endmembers, seed=args.seed)
    mbio.write_cube(args.out, make_phantom(spec))
    print(f"wrote {args.out}: {spec.height}x{spec.width}x{spec.bands} "
          f"(rank <= {spec.n_endmembers})")
    return 0


def cmd_degrade(args) -> int:
    ref = mbio.read_cube(args.ref)
    blur = BlurOperator.from_kernel(
        gaussian_kernel(args.blur_size, args.blur_sigma) if args.blur_size > 1
        else np.ones((1, 1)), ref.height, ref.width)
    down = Downsampler(args.factor)
    srf = _parse_srf(args.srf, ref.bands)
    mask = None
    if args.task == "inpainting":
        kept_bands = np.ones(ref.bands, dtype=bool)
        if args.mask_bands:
            kept_bands[:] = False
            with open(args.mask_bands) as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        kept_bands[int(line)] = True
        if args.stripe_bands:
            kept = np.ones((ref.bands, ref.height, ref.width), dtype=bool)
            gen = np.random.Generator(np.random.Philox(key=np.uint64(args.seed) + (np.uint64(33) << np.uint64(32))))
            bad_bands = gen.permutation(ref.bands)[:args.stripe_bands]
            n_cols = max(1, int(round(args.stripe_cols * ref.width)))
            for b in bad_bands:
                cols = gen.permutation(ref.width)[:n_cols]
                kept[b, :, cols] = False
            kept &= kept_bands[:, None, None]
            mask = EntryMask(kept)
        else:
            frac = args.mask_pixels if args.mask_pixels is not None else 1.0
            kept_pixels = random_pixel_mask(ref.height // args.factor,
                                            ref.width // args.factor, frac, args.seed)
            mask = EntryMask(kept_bands[:, None, None]
                             & kept_pixels[None, :, :])
    model = DegradationModel(blur=blur, down=down, srf=srf, snr_hs=args.snr_hs,
                             snr_hr=args.snr_hr, hs_mask=mask, seed=args.seed)
    obs = degrade(ref, model)
    mbio.write_cube(args.out_hs, obs.hs)
    mbio.write_cube(args.out_hr, obs.hr)
    if mask is not None and args.out_mask:
        mbio.write_mask(args.out_mask, mask)
    print(f"wrote hs {obs.hs.bands}x{obs.hs.height}x{obs.hs.width} -> {args.out_hs}; "
          f"hr {obs.hr.bands}x{obs.hr.height}x{obs.hr.width} -> {args.out_hr}")
    return 0


def _build_problem(task: str, hs: ImageCube, hr: ImageCube,
                   mask: Optional[EntryMask], basis, cfg: RunConfig):
    if task == "fusion":
        d = cfg.degradation
        blur = BlurOperator.from_kernel(
            gaussian_kernel(d.blur_size, d.blur_sigma) if d.blur_size > 1
            else np.ones((1, 1)), hr.height, hr.width)
        return FusionProblem(hs, hr, basis, blur, Downsampler(d.factor),
                             _parse_srf(d.srf, hs.bands))
    if mask is None:
        mask = EntryMask.all_kept(hs.bands, hs.height, hs.width)
    return InpaintProblem(hs, mask, basis)


def _write_loss_csv(path, losses):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss"])
        for i, v in enumerate(losses):
            writer.writerow([i, f"{v:.12g}"])


def cmd_train(args) -> int:
    task = args.task
    cfg = _load_config(args.config, task)
    hs = mbio.read_cube(args.hs)
    mask = mbio.read_mask(args.mask) if args.mask else None
    if args.decoder == "gdd":
        if not args.hr:
            print("error: --hr is required for the guided decoder", file=sys.stderr)
            return 2
        hr = mbio.read_cube(args.hr)
        basis = _estimate_basis(hs, cfg.subspace_dim, mask)
        obs = ObservationSet(hs=hs, hr=hr, hs_mask=mask)
        problem = _build_problem(task, hs, hr, mask, basis, cfg)
        model, z, losses = train_gdd(obs, basis, problem, cfg.gdd, cfg.seed)
        save_gdd(args.out_model, model, z, cfg.seed)
    else:
        if not args.hr:
            print("error: --hr is required to draw VAE training patches", file=sys.stderr)
            return 2
        hr = mbio.read_cube(args.hr)
        patches = extract_patches(hr, args.vae_patches, cfg.vae.patch, cfg.seed)
        model, losses = train_vae(patches, cfg.vae, cfg.seed)
        save_vae(args.out_model, model, cfg.seed)
    if args.loss_csv:
        _write_loss_csv(args.loss_csv, losses)
    print(f"trained {args.decoder}: final loss {losses[-1]:.6g} -> {args.out_model}")
    return 0


def _run_admm(args, task: str) -> int:
    cfg = _load_config(args.config, task)
    hs = mbio.read_cube(args.hs)
    hr = mbio.read_cube(args.hr)
    mask = mbio.read_mask(args.mask) if getattr(args, "mask", None) else None
    basis = _estimate_basis(hs, cfg.subspace_dim, mask)
    problem = _build_problem(task, hs, hr, mask, basis, cfg)
    with open(args.model, "rb") as fh:
        kind = fh.readline()
    if b'"gdd"' in kind:
        model, z0, _ = load_gdd(args.model, hr)
        generator = GddGenerator(model)
    else:
        model, seed = load_vae(args.model)
        generator = VaeGenerator(model, basis.dim, hr.height, hr.width)
        z0 = generator.draw_latent(seed)
    x_hat, state, trace = admm_solve(problem, generator, z0, cfg.mu, cfg.lam,
                                     cfg.admm_iters, cfg.z_steps, cfg.z_lr)
    mbio.write_cube(args.out, x_hat)
    if args.trace:
        write_trace(args.trace, trace)
    print(f"{task}: {state.iter} ADMM iterations, "
          f"final primal residual {state.residual_history[-1][0]:.6g} -> {args.out}")
    return 0


def cmd_fuse(args) -> int:
    return _run_admm(args, "fusion")


def cmd_inpaint(args) -> int:
    return _run_admm(args, "inpainting")


def cmd_eval(args) -> int:
    ref = mbio.read_cube(args.ref)
    est = mbio.read_cube(args.est)
    report = evaluate(ref, est, ratio=args.ratio)
    mbio.write_report(args.out, report)
    print(f"psnr={report.psnr:.4f} sam={report.sam:.4f} uiqi={report.uiqi:.4f} "
          f"ergas={report.ergas:.4f} ssim={report.ssim:.4f} -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mbinv",
                                     description="Multiband image inversion workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic reference cube")
    p.add_argument("--out", required=True)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--bands", type=int, default=31)
    p.add_argument("--endmembers", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("degrade", help="synthesize observations from a reference")
    p.add_argument("--ref", required=True)
    p.add_argument("--task", choices=["fusion", "inpainting"], default="fusion")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--blur-size", type=int, default=5)
    p.add_argument("--blur-sigma", type=float, default=2.0)
    p.add_argument("--factor", type=int, default=5)
    p.add_argument("--srf", default="avg")
    p.add_argument("--snr-hs", type=float, default=35.0)
    p.add_argument("--snr-hr", type=float, default=30.0)
    p.add_argument("--mask-pixels", type=float, default=None)
    p.add_argument("--mask-bands", default=None)
    p.add_argument("--stripe-bands", type=int, default=0)
    p.add_argument("--stripe-cols", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-hs", required=True)
    p.add_argument("--out-hr", required=True)
    p.add_argument("--out-mask", default=None)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("train", help="train a generative decoder")
    p.add_argument("--hs", required=True)
    p.add_argument("--hr", default=None)
    p.add_argument("--mask", default=None)
    p.add_argument("--task", choices=["fusion", "inpainting"], default="fusion")
    p.add_argument("--decoder", choices=["gdd", "vae"], default="gdd")
    p.add_argument("--config", default=None)
    p.add_argument("--vae-patches", type=int, default=500)
    p.add_argument("--out-model", required=True)
    p.add_argument("--loss-csv", default=None)
    p.set_defaults(func=cmd_train)

    for name, fn in (("fuse", cmd_fuse), ("inpaint", cmd_inpaint)):
        p = sub.add_parser(name, help=f"run the {name} ADMM pipeline")
        p.add_argument("--hs", required=True)
        p.add_argument("--hr", required=True)
        if name == "inpaint":
            p.add_argument("--mask", default=None)
        p.add_argument("--model", required=True)
        p.add_argument("--config", default=None)
        p.add_argument("--out", required=True)
        p.add_argument("--trace", default=None)
        p.set_defaults(func=fn)

    p = sub.add_parser("eval", help="compute quality metrics")
    p.add_argument("--ref", required=True)
    p.add_argument("--est", required=True)
    p.add_argument("--ratio", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def _apply_preset(argv):
    """Expand --preset before parsing so explicit flags still win."""
    if "--preset" not in argv:
        return argv
    i = argv.index("--preset")
    name = argv[i + 1]
    if name not in PRESETS:
        return argv
    injected = []
    for key, val in PRESETS[name].items():
        flag = "--" + key.replace("_", "-")
        if flag not in argv:
            injected += [flag, str(val)]
    return argv[:i] + injected + argv[i:]


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0] == "degrade":
        argv = [argv[0]] + _apply_preset(argv[1:])
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ValueError, OSError, FloatingPointError, mbio.FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
