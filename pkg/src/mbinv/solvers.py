"""ADMM driver and the two closed-form coefficient updates.

Fusion solves the Sylvester system C1 A + A C2 = C3 in the 2-D DFT
basis: decimation couples each frequency with its f^2 aliases through a
rank-one block, inverted per eigenvalue of C1 by a Sherman-Morrison
correction.  Inpainting decouples per pixel into small SPD solves.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import nn
from .cubes import EntryMask, ImageCube, cube_to_matrix, matrix_to_cube
from .operators import (BlurOperator, Downsampler, SpectralResponse, cyclic_blur,
                        downsample, upsample_adjoint)
from .subspace import SpectralBasis, reconstruct


@dataclass
class AdmmState:
    a: np.ndarray                 # (dim, N)
    z: np.ndarray                 # latent field
    u: np.ndarray                 # (dim, N) scaled dual
    mu: float
    lam: float
    iter: int = 0
    residual_history: List[Tuple[float, float]] = field(default_factory=list)


@dataclass
class AdmmTraceRow:
    iter: int
    objective: float
    primal_residual: float
    a_change: float


class FusionProblem:
    """Data terms ||Y_hs - V A B S||^2 + ||Y_hr - R V A||^2 in A-space."""

    def __init__(self, y_hs: ImageCube, y_hr: ImageCube, basis: SpectralBasis,
                 blur: BlurOperator, down: Downsampler, srf: SpectralResponse):
        if y_hr.height % down.factor or y_hr.width % down.factor:
            raise ValueError("downsampling factor must divide the target size")
        if (y_hs.height, y_hs.width) != (y_hr.height // down.factor,
                                         y_hr.width // down.factor):
            raise ValueError("hs spatial size inconsistent with hr size and factor")
        if y_hs.bands != basis.bands:
            raise ValueError("hs band count must match basis")
        self.y_hs = y_hs
        self.y_hr = y_hr
        self.basis = basis
        self.blur = blur
        self.down = down
        self.srf = srf
        self.height = y_hr.height
        self.width = y_hr.width
        self.rv = srf.matrix @ basis.v                      # (B_hr, dim)
        self.rv_gram = self.rv.T @ self.rv                  # (dim, dim)
        # fixed part of C3: V^T Y_hs (BS)^T + (RV)^T Y_hr
        up = upsample_adjoint(y_hs, down, self.height, self.width)
        bt = cyclic_blur(up, blur, adjoint=True)
        self.c3_data = basis.v.T @ cube_to_matrix(bt) + self.rv.T @ cube_to_matrix(y_hr)
        self._eig_cache: Dict[float, Tuple[np.ndarray, np.ndarray]] = {}

    # -- dense-free application of the forward map and misfit ---------------

    def _apply_m_hs(self, a: np.ndarray) -> ImageCube:
        cube = matrix_to_cube(a, self.height, self.width)
        return downsample(cyclic_blur(cube, self.blur), self.down)

    def misfit(self, a: np.ndarray) -> float:
        hs_pred = self.basis.v @ cube_to_matrix(self._apply_m_hs(a))
        hr_pred = self.rv @ a
        return float(np.sum((hs_pred - cube_to_matrix(self.y_hs)) ** 2)
                     + np.sum((hr_pred - cube_to_matrix(self.y_hr)) ** 2))

    def misfit_grad(self, a: np.ndarray) -> np.ndarray:
        r1 = self.basis.v @ cube_to_matrix(self._apply_m_hs(a)) - cube_to_matrix(self.y_hs)
        r1 = matrix_to_cube(self.basis.v.T @ r1, self.y_hs.height, self.y_hs.width)
        up = upsample_adjoint(r1, self.down, self.height, self.width)
        g1 = cube_to_matrix(cyclic_blur(up, self.blur, adjoint=True))
        g2 = self.rv.T @ (self.rv @ a - cube_to_matrix(self.y_hr))
        return 2.0 * (g1 + g2)

    # -- Sylvester machinery -------------------------------------------------

    def _c1_eig(self, mu: float):
        cached = self._eig_cache.get(mu)
        if cached is None:
            c1 = self.rv_gram + mu * np.eye(self.basis.dim)
            lam, q = np.linalg.eigh(c1)
            if lam.min() < mu * (1 - 1e-9):
                raise AssertionError("C1 lost positive definiteness")
            cached = (lam, q)
            self._eig_cache[mu] = cached
        return cached

    def apply_c2(self, a: np.ndarray) -> np.ndarray:
        """A (BS)(BS)^T as a matrix-free operator on (dim, N)."""
        cube = matrix_to_cube(a, self.height, self.width)
        coarse = downsample(cyclic_blur(cube, self.blur), self.down)
        up = upsample_adjoint(coarse, self.down, self.height, self.width)
        return cube_to_matrix(cyclic_blur(up, self.blur, adjoint=True))


def fusion_a_update(problem: FusionProblem, dz: np.ndarray, u: np.ndarray,
                    mu: float, check_residual: bool = True) -> np.ndarray:
    """Minimize the fusion ADMM A-subproblem via the frequency-domain
    Sylvester solve."""
    if mu <= 0:
        raise ValueError("mu must be > 0")
    h, w = problem.height, problem.width
    f = problem.down.factor
    nh, nw = h // f, w // f
    dim = problem.basis.dim
    c3 = problem.c3_data + mu * (dz + u / (2.0 * mu))
    lam, q = problem._c1_eig(mu)
    c3t = q.T @ c3                                   # rows in C1 eigenbasis
    d = problem.blur.eigenvalues                     # (h, w)
    dg = d.reshape(f, nh, f, nw)
    denom_base = np.sum(np.abs(dg) ** 2, axis=(0, 2))   # (nh, nw): sum over aliases
    at = np.empty((dim, h, w), dtype=np.complex128)
    c3_img = c3t.reshape(dim, h, w)
    ch_all = np.fft.fft2(c3_img, axes=(1, 2))
    for i in range(dim):
        li = lam[i]
        ch = ch_all[i].reshape(f, nh, f, nw)
        num = np.sum(np.conj(dg) * ch, axis=(0, 2))      # (nh, nw)
        corr = dg * (num / (li * (f * f * li + denom_base)))[None, :, None, :]
        at[i] = (ch / li - corr).reshape(h, w)
    a_rows = np.fft.ifft2(at, axes=(1, 2))
    resid_im = np.linalg.norm(a_rows.imag)
    a = (q @ a_rows.real.reshape(dim, h * w))
    if check_residual:
        lhs = (problem.rv_gram + mu * np.eye(dim)) @ a + problem.apply_c2(a)
        rel = np.linalg.norm(lhs - c3) / max(np.linalg.norm(c3), 1e-300)
        if rel > 1e-8 or resid_im > 1e-6 * max(np.linalg.norm(a), 1e-300):
            raise FloatingPointError(f"Sylvester residual {rel:.2e} beyond tolerance")
    return a


class InpaintProblem:
    """Data term ||mask .* (V A - Y_hs)||^2; decouples over pixels."""

    def __init__(self, y_hs: ImageCube, mask: EntryMask, basis: SpectralBasis):
        if (y_hs.bands, y_hs.height, y_hs.width) != (mask.bands, mask.height, mask.width):
            raise ValueError("mask shape must match observed cube")
        if y_hs.bands != basis.bands:
            raise ValueError("band count must match basis")
        self.y_hs = y_hs
        self.mask = mask
        self.basis = basis
        self.height = y_hs.height
        self.width = y_hs.width
        self._mask_flat = mask.flat()                         # (B, N)
        self._y_flat = cube_to_matrix(y_hs) * self._mask_flat
        # group pixels by identical observed band pattern
        patterns, inverse = np.unique(self._mask_flat.T, axis=0, return_inverse=True)
        self._patterns = patterns                             # (G, B)
        self._pixel_group = inverse                           # (N,)
        self._vty = basis.v.T @ self._y_flat                  # (dim, N)
        self._solve_cache: Dict[float, list] = {}

    def misfit(self, a: np.ndarray) -> float:
        r = self._mask_flat * (self.basis.v @ a) - self._y_flat
        return float(np.sum(r * r))

    def misfit_grad(self, a: np.ndarray) -> np.ndarray:
        r = self._mask_flat * (self.basis.v @ a) - self._y_flat
        return 2.0 * (self.basis.v.T @ (self._mask_flat * r))

    def _group_inverses(self, mu: float):
        inv = self._solve_cache.get(mu)
        if inv is None:
            dim = self.basis.dim
            inv = []
            for pat in self._patterns:
                vs = self.basis.v[pat, :]
                m = vs.T @ vs + mu * np.eye(dim)
                inv.append(np.linalg.inv(m))
            self._solve_cache[mu] = inv
        return inv


def inpaint_a_update(problem: InpaintProblem, dz: np.ndarray, u: np.ndarray,
                     mu: float) -> np.ndarray:
    """Per-pixel closed form: A_n = (V_S^T V_S + mu I)^-1 (V_S^T y_n + mu g_n)."""
    if mu <= 0:
        raise ValueError("mu must be > 0")
    g = dz + u / (2.0 * mu)
    rhs = problem._vty + mu * g                      # (dim, N)
    inv = problem._group_inverses(mu)
    a = np.empty_like(rhs)
    for gi, m_inv in enumerate(inv):
        cols = problem._pixel_group == gi
        a[:, cols] = m_inv @ rhs[:, cols]
    return a


def z_update(generator, a: np.ndarray, u: np.ndarray, mu: float, lam: float,
             z_init: np.ndarray, steps: int, lr: float,
             adam: "nn.AdamState" = None) -> np.ndarray:
    """Adam descent on ||D(Z) - (A - U/(2mu))||^2 + (lam/mu)||Z||^2.

    Passing a persistent ``adam`` state lets the outer loop warm-start the
    inner solver between ADMM iterations, which keeps the effective step
    size shrinking as the splitting converges.
    """
    target = a - u / (2.0 * mu)
    w = lam / mu

    def objective_and_grad(z):
        dz, cache = generator.generate(z)
        r = dz - target
        obj = float(np.sum(r * r) + w * np.sum(z * z))
        gz = generator.generate_backward(cache, 2.0 * r) + 2.0 * w * z
        return obj, gz

    z = z_init.copy()
    if steps == 0:
        return z
    if adam is None:
        adam = nn.AdamState(lr=lr)
    for _ in range(steps):
        obj, gz = objective_and_grad(z)
        if not math.isfinite(obj):
            raise FloatingPointError("non-finite objective in z update")
        z = nn.adam_step(adam, {"z": z}, {"z": gz})["z"]
    return z


def dual_update(u: np.ndarray, dz_new: np.ndarray, a_new: np.ndarray,
                mu: float) -> np.ndarray:
    """U <- U + 2 mu (D(Z) - A)."""
    return u + 2.0 * mu * (dz_new - a_new)


def admm_solve(problem, generator, z0: np.ndarray, mu: float, lam: float,
               admm_iters: int, z_steps: int, z_lr: float,
               tol: float = 1e-4) -> Tuple[ImageCube, AdmmState, List[AdmmTraceRow]]:
    """Alternate the A, Z and dual updates until the iteration budget or the
    relative A-change tolerance is met; returns V D(Z) as the estimate."""
    if isinstance(problem, FusionProblem):
        a_step = fusion_a_update
    elif isinstance(problem, InpaintProblem):
        a_step = inpaint_a_update
    else:
        raise TypeError(f"unsupported problem type {type(problem).__name__}")
    basis = problem.basis
    n = problem.height * problem.width
    state = AdmmState(
        a=np.zeros((basis.dim, n)),
        z=z0.copy(),
        u=np.zeros((basis.dim, n)),
        mu=mu,
        lam=lam,
    )
    trace: List[AdmmTraceRow] = []
    dz, _ = generator.generate(state.z)
    adam = nn.AdamState(lr=z_lr)
    for it in range(1, admm_iters + 1):
        a_prev = state.a
        state.a = a_step(problem, dz, state.u, mu)
        state.z = z_update(generator, state.a, state.u, mu, lam, state.z,
                           z_steps, z_lr, adam=adam)
        dz, _ = generator.generate(state.z)
        state.u = dual_update(state.u, dz, state.a, mu)
        state.iter = it
        if not (np.all(np.isfinite(state.a)) and np.all(np.isfinite(state.u))
                and np.all(np.isfinite(dz))):
            raise FloatingPointError(f"non-finite ADMM state at iteration {it}")
        primal = float(np.linalg.norm(dz - state.a))
        objective = float(problem.misfit(dz) + lam * np.sum(state.z ** 2))
        a_change = float(np.linalg.norm(state.a - a_prev)
                         / max(np.linalg.norm(state.a), 1e-300))
        state.residual_history.append((primal, objective))
        trace.append(AdmmTraceRow(it, objective, primal, a_change))
        if a_change < tol and it > 1:
            break
    x_hat = reconstruct(dz, basis, problem.height, problem.width)
    return x_hat, state, trace


def write_trace(path, trace: List[AdmmTraceRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "objective", "primal_residual", "a_change"])
        for row in trace:
            writer.writerow([row.iter, f"{row.objective:.12g}",
                             f"{row.primal_residual:.12g}", f"{row.a_change:.12g}"])
