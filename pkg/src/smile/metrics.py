"""Image-quality metrics, pseudo-replica g-factor maps and slice leakage."""

from __future__ import annotations

import csv
import io as _io
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.ndimage import uniform_filter

from .model import as_array, complex_noise

__all__ = [
    "SER_CAP_DB",
    "ser",
    "ssim",
    "ssim_components",
    "GFactorMap",
    "g_factor_pseudo_replica",
    "leakage",
    "error_map",
    "MetricsReport",
]

SER_CAP_DB = 300.0


def _mag_pair(reference, recon):
    ref = np.abs(as_array(reference))
    rec = np.abs(as_array(recon))
    if ref.shape != rec.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {rec.shape}")
    return ref, rec


def ser(reference, recon, support=None) -> float:
    """Signal-to-error ratio ``20 log10(||ref|| / ||ref - recon||)`` in dB.

    Computed on magnitudes, optionally restricted to a boolean ``support``.
    Exact agreement returns :data:`SER_CAP_DB`.
    """
    ref, rec = _mag_pair(reference, recon)
    if support is not None:
        support = np.broadcast_to(np.asarray(support, dtype=bool), ref.shape)
        ref, rec = ref[support], rec[support]
    num = np.linalg.norm(ref)
    if num == 0:
        raise ValueError("reference has zero energy")
    err = np.linalg.norm(ref - rec)
    if err == 0:
        return SER_CAP_DB
    return float(min(20 * math.log10(num / err), SER_CAP_DB))


def ssim_components(reference, recon, window: int = 7, k1: float = 0.01, k2: float = 0.03,
                    data_range: float = 1.0):
    """Local luminance, contrast-structure and SSIM maps of a 2D magnitude pair.

    Uniform ``window x window`` statistics with population variances.
    """
    ref, rec = _mag_pair(reference, recon)
    if ref.ndim != 2:
        raise ValueError("ssim expects 2D images")
    if window > min(ref.shape):
        raise ValueError(f"window {window} is larger than the image {ref.shape}")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    def mean(a):
        return uniform_filter(a, size=window, mode="reflect")

    mx, my = mean(ref), mean(rec)
    vx = np.maximum(mean(ref * ref) - mx * mx, 0.0)
    vy = np.maximum(mean(rec * rec) - my * my, 0.0)
    cxy = mean(ref * rec) - mx * my
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    cs = (2 * cxy + c2) / (vx + vy + c2)
    return lum, cs, lum * cs


def ssim(reference, recon, support=None, window: int = 7, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean local SSIM of magnitude images, over ``support`` if given.

    3D inputs are treated slice by slice and the slice means averaged.
    """
    ref, rec = _mag_pair(reference, recon)
    if ref.ndim == 3:
        sup = [None] * len(ref) if support is None else np.broadcast_to(support, ref.shape)
        return float(np.mean([ssim(a, b, s, window, k1, k2, data_range)
                              for a, b, s in zip(ref, rec, sup)]))
    _, _, smap = ssim_components(ref, rec, window, k1, k2, data_range)
    if support is not None:
        support = np.asarray(support, dtype=bool)
        if not support.any():
            raise ValueError("empty support")
        return float(smap[support].mean())
    return float(smap.mean())


@dataclass
class GFactorMap:
    """Per-pixel g-factor; ``nan`` where the pixel is outside the support."""

    values: np.ndarray
    trials: int
    R: float
    mask_id: str = ""
    dropped: int = 0

    @property
    def mean(self) -> float:
        v = self.values[~np.isnan(self.values)]
        return float(np.mean(v)) if v.size else math.nan

    @property
    def max(self) -> float:
        return float(np.nanmax(self.values))


def g_factor_pseudo_replica(recon: Callable, noise_shape, mask, trials: int = 64,
                            seed: int = 0, support=None, max_drop_fraction: float = 0.25,
                            mask_id: str = "", batched: bool = False,
                            cache: Optional[dict] = None) -> GFactorMap:
    """Pseudo multiple replica g-factor.

    Each trial draws unit-variance complex white noise of ``noise_shape``
    (k-space layout with the PE axis at position -2 of the data passed
    on) from its own child stream of ``numpy.random.SeedSequence(seed)``
    and calls ``recon(noise, keep)`` twice: with the acceleration mask and
    with full sampling. Both calls see the same noise, so at ``R = 1`` the
    ratio is exactly 1. The g-factor is

    ``std_trials(accelerated) / (std_trials(full) * sqrt(R))``

    per pixel, with ``R = N_PE / sampled lines``. A trial whose ``recon``
    raises is dropped; more than ``max_drop_fraction`` dropped trials is an
    error. Non-finite accelerated images (singular systems) give ``inf``.
    Pixels outside ``support`` are ``nan``.

    With ``batched`` the noise of all trials is stacked on a new leading
    axis and ``recon`` is called once per mask; a failure then fails the
    whole estimate. A ``cache`` dict then keeps the noise stack and the
    full-sampling reconstruction for reuse by later masks with the same
    seed, trial count and shape.
    """
    if trials < 2:
        raise ValueError("at least two trials are required")
    keep = np.asarray(getattr(mask, "keep", mask), dtype=bool)
    full = np.ones_like(keep)
    R = keep.size / keep.sum()
    children = np.random.SeedSequence(seed).spawn(trials)
    dropped = 0
    if batched:
        key = (seed, trials, tuple(noise_shape))
        if cache is not None and key in cache:
            noise, ref = cache[key]
        else:
            noise = np.stack([complex_noise(np.random.default_rng(c), noise_shape, 1.0)
                              for c in children])
            ref = np.asarray(recon(noise, full))
            if cache is not None:
                cache[key] = (noise, ref)
        acc = np.asarray(recon(noise, keep))
    else:
        acc, ref = [], []
        for child in children:
            noise = complex_noise(np.random.default_rng(child), noise_shape, 1.0)
            try:
                a = np.asarray(recon(noise, keep))
                f = np.asarray(recon(noise, full))
            except (ValueError, ArithmeticError, np.linalg.LinAlgError):
                dropped += 1
                continue
            acc.append(a)
            ref.append(f)
        if dropped > max_drop_fraction * trials:
            raise RuntimeError(f"{dropped} of {trials} pseudo-replica trials failed")
        acc = np.stack(acc)
        ref = np.stack(ref)
    with np.errstate(invalid="ignore", divide="ignore"):
        finite = np.all(np.isfinite(acc), axis=0)
        sa = np.where(finite, np.std(np.where(np.isfinite(acc), acc, 0), axis=0), np.inf)
        sf = np.std(ref, axis=0)
        g = sa / (sf * math.sqrt(R))
    g = np.where(sf > 0, g, np.nan)
    if support is not None:
        g = np.where(np.broadcast_to(support, g.shape), g, np.nan)
    return GFactorMap(g, len(acc), float(R), mask_id, dropped)


def leakage(recon: Callable, slices, mb: Optional[int] = None) -> np.ndarray:
    """Inter-slice leakage matrix from single-slice simulations.

    For each source slice ``s``, ``recon(stack)`` reconstructs a stack in
    which every slice but ``s`` is zeroed; ``L[s, t]`` is
    ``||recon_t|| / ||recon_s||``. The diagonal is 1 by construction.
    """
    data = as_array(slices)
    mb = data.shape[0] if mb is None else mb
    L = np.zeros((mb, mb))
    for s in range(mb):
        only = np.zeros_like(data)
        only[s] = data[s]
        out = as_array(recon(only))
        norms = np.linalg.norm(out.reshape(mb, -1), axis=1)
        if norms[s] == 0:
            raise ValueError(f"reconstruction of slice {s} has zero energy")
        L[s] = norms / norms[s]
    return L


def error_map(reference, recon, scale: float = 1.0):
    """``|ref| - |recon|`` in absolute value per slice, plus display metadata."""
    ref, rec = _mag_pair(reference, recon)
    return np.abs(ref - rec), {"scale": float(scale)}


@dataclass
class MetricsReport:
    """Per-method metrics table.

    ``leakage`` is an ``MB x MB`` matrix with unit diagonal or ``None``.
    Runtime is kept out of the serialised files so repeated runs produce
    identical bytes; it is reported on the console only.
    """

    method: str
    ser_per_slice: list
    ser_total: float
    ssim_per_slice: list
    g_mean: Optional[float] = None
    g_max: Optional[float] = None
    leakage: Optional[np.ndarray] = None
    runtime: float = 0.0
    settings: dict = field(default_factory=dict)

    def rows(self):
        out = []
        for s, (e, q) in enumerate(zip(self.ser_per_slice, self.ssim_per_slice)):
            out.append([self.method, str(s), f"{e:.6f}", f"{q:.6f}"])
        out.append([self.method, "all", f"{self.ser_total:.6f}",
                    f"{float(np.mean(self.ssim_per_slice)):.6f}"])
        return out

    def to_csv(self, header: bool = True) -> str:
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(["method", "slice", "ser_db", "ssim"])
        w.writerows(self.rows())
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"[{self.method}]",
                 f"ser_db = {self.ser_total:.4f}",
                 "ser_db_per_slice = " + ", ".join(f"{v:.4f}" for v in self.ser_per_slice),
                 "ssim_per_slice = " + ", ".join(f"{v:.4f}" for v in self.ssim_per_slice)]
        if self.g_mean is not None:
            lines.append(f"g_mean = {self.g_mean:.4f}")
            lines.append(f"g_max = {self.g_max:.4f}")
        if self.leakage is not None:
            lines.append("leakage =")
            for row in np.atleast_2d(self.leakage):
                lines.append("  " + " ".join(f"{v:.3e}" for v in row))
        for k in sorted(self.settings):
            lines.append(f"{k} = {self.settings[k]}")
        return "\n".join(lines) + "\n"
