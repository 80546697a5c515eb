"""Synthetic multi-slice phantoms and exactly band-limited coil maps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import CoilMapSet, SliceStack, as_array, ifft2c

__all__ = [
    "PhantomSpec",
    "CoilSpec",
    "make_phantom",
    "make_coil_maps",
    "random_content",
    "sum_of_squares_reference",
    "support_mask",
]

# Modified Shepp-Logan: intensity, semi-axis a (x), semi-axis b (y), x0, y0, angle [deg]
_SHEPP_LOGAN = np.array([
    [1.00, 0.6900, 0.920, 0.00, 0.0000, 0.0],
    [-0.80, 0.6624, 0.874, 0.00, -0.0184, 0.0],
    [-0.20, 0.1100, 0.310, 0.22, 0.0000, -18.0],
    [-0.20, 0.1600, 0.410, -0.22, 0.0000, 18.0],
    [0.10, 0.2100, 0.250, 0.00, 0.3500, 0.0],
    [0.10, 0.0460, 0.046, 0.00, 0.1000, 0.0],
    [0.10, 0.0460, 0.046, 0.00, -0.1000, 0.0],
    [0.10, 0.0460, 0.023, -0.08, -0.6050, 0.0],
    [0.10, 0.0230, 0.023, 0.00, -0.6060, 0.0],
    [0.10, 0.0230, 0.046, 0.06, -0.6050, 0.0],
])

BORDER = 2


@dataclass
class PhantomSpec:
    """Geometry and randomisation of a synthetic slice stack."""

    nx: int = 128
    ny: int = 128
    mb: int = 3
    style: str = "ellipses"
    max_rotation: float = 15.0
    contrast_jitter: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.nx < 16 or self.ny < 16:
            raise ValueError("phantom grid must be at least 16x16")
        if not 1 <= self.mb <= 8:
            raise ValueError("MB must lie in [1, 8]")
        if self.style not in ("ellipses", "ring-and-disks"):
            raise ValueError(f"unknown phantom style {self.style!r}")


@dataclass
class CoilSpec:
    """Synthetic receive array: coil count, k-space support and slice similarity.

    ``support`` is ``(C_x, C_y)``. ``similarity`` interpolates between
    independent per-slice maps (0) and identical maps on every slice (1).
    """

    ncoils: int = 8
    support: tuple = (7, 7)
    similarity: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.support = tuple(int(c) for c in self.support)
        if self.ncoils < 2:
            raise ValueError("at least two coils are required")
        if len(self.support) != 2 or min(self.support) < 1:
            raise ValueError("support must be a pair of positive integers")
        if not 0.0 <= self.similarity <= 1.0:
            raise ValueError("similarity must lie in [0, 1]")


def _grid(ny, nx):
    # y axis points up so the table reads like the textbook phantom
    y = (ny // 2 - np.arange(ny)) / (ny / 2)
    x = (np.arange(nx) - nx // 2) / (nx / 2)
    return np.meshgrid(y, x, indexing="ij")


def _ellipse(yy, xx, a, b, x0, y0, angle_deg):
    t = np.deg2rad(angle_deg)
    xr = (xx - x0) * np.cos(t) + (yy - y0) * np.sin(t)
    yr = -(xx - x0) * np.sin(t) + (yy - y0) * np.cos(t)
    return (xr / a) ** 2 + (yr / b) ** 2 <= 1.0


def _shepp_logan_slice(yy, xx, rng, spec, first):
    table = _SHEPP_LOGAN.copy()
    if first:
        rot, scale = 0.0, 0.9
        shifts = np.zeros((len(table), 2))
        gains = np.ones(len(table))
    else:
        rot = rng.uniform(-spec.max_rotation, spec.max_rotation)
        scale = rng.uniform(0.8, 0.9)
        shifts = rng.uniform(-0.04, 0.04, size=(len(table), 2))
        gains = 1 + rng.uniform(-spec.contrast_jitter, spec.contrast_jitter, size=len(table))
    shifts[:2] = 0
    gains[:2] = 1
    img = np.zeros(yy.shape)
    t = np.deg2rad(rot)
    for k, (amp, a, b, x0, y0, ang) in enumerate(table):
        x0, y0 = x0 + shifts[k, 0], y0 + shifts[k, 1]
        xc = scale * (x0 * np.cos(t) - y0 * np.sin(t))
        yc = scale * (x0 * np.sin(t) + y0 * np.cos(t))
        img += amp * gains[k] * _ellipse(yy, xx, scale * a, scale * b, xc, yc, ang + rot)
    return img


def _ring_and_disks_slice(yy, xx, rng, spec, frac):
    # crude short-axis heart: body, LV blood pool, myocardial ring, RV
    rot = rng.uniform(-spec.max_rotation, spec.max_rotation)
    jit = 1 + rng.uniform(-spec.contrast_jitter, spec.contrast_jitter, size=4)
    lv_r = 0.22 * (1.0 - 0.5 * frac) + rng.uniform(-0.02, 0.02)
    wall = 0.10
    img = 0.25 * jit[0] * _ellipse(yy, xx, 0.85, 0.68, 0.0, 0.0, rot)
    cx, cy = -0.12 + rng.uniform(-0.03, 0.03), 0.05 + rng.uniform(-0.03, 0.03)
    ring = _ellipse(yy, xx, lv_r + wall, lv_r + wall, cx, cy, 0.0)
    pool = _ellipse(yy, xx, lv_r, lv_r, cx, cy, 0.0)
    img[ring] = 0.55 * jit[1]
    img[pool] = 1.0 * jit[2]
    rv = _ellipse(yy, xx, 0.16 * (1 - 0.4 * frac), 0.26 * (1 - 0.4 * frac), cx + lv_r + wall + 0.12, cy + 0.02, rot)
    img[rv & ~ring] = 0.8 * jit[3]
    # a few small bright disks (vessels / papillary muscles)
    for _ in range(3):
        r = rng.uniform(0.02, 0.05)
        px, py = rng.uniform(-0.5, 0.5), rng.uniform(-0.45, -0.2)
        img[_ellipse(yy, xx, r, r, px, py, 0.0)] = 0.9
    return img


def make_phantom(spec: PhantomSpec) -> SliceStack:
    """Generate a reproducible real-valued slice stack.

    Every slice is normalised to a maximum magnitude of 1 and has an
    all-zero frame of at least two pixels.
    """
    rng = np.random.default_rng(spec.seed)
    yy, xx = _grid(spec.ny, spec.nx)
    out = np.zeros((spec.mb, spec.ny, spec.nx))
    for s in range(spec.mb):
        if spec.style == "ellipses":
            img = _shepp_logan_slice(yy, xx, rng, spec, first=(s == 0 and spec.seed == 0))
        else:
            img = _ring_and_disks_slice(yy, xx, rng, spec, s / max(spec.mb - 1, 1))
        img = np.clip(img, 0.0, None)
        img[:BORDER] = img[-BORDER:] = 0
        img[:, :BORDER] = img[:, -BORDER:] = 0
        out[s] = img / img.max()
    return SliceStack(out)


def random_content(mb: int, shape, seed: int = 0) -> SliceStack:
    """Dense complex white-noise slices (no limited-support structure)."""
    rng = np.random.default_rng(seed)
    ny, nx = shape
    data = rng.standard_normal((mb, ny, nx)) + 1j * rng.standard_normal((mb, ny, nx))
    return SliceStack(data / np.sqrt(2))


def support_rect(n, c):
    """Index range of a centered length-``c`` window on an ``n`` grid."""
    start = n // 2 - c // 2
    return slice(start, start + c)


def make_coil_maps(spec: CoilSpec, mb: int, shape) -> CoilMapSet:
    """Draw coil maps whose spectra live in a centered ``C_y x C_x`` box.

    Coefficients are complex Gaussian with a mild Gaussian taper and a
    boosted DC term (keeps the sum-of-squares away from zero). The maps
    are the inverse centered FFT of the zero-padded coefficient box, so
    the support bound is exact. Slice ``s`` uses
    ``similarity * shared + (1 - similarity) * own_s`` coefficients.
    A single global scale sets the mean sum-of-squares to 1; a per-pixel
    normalisation would break band-limitation.
    """
    ny, nx = shape
    cx, cy = spec.support
    if cx > nx or cy > ny:
        raise ValueError("coil support exceeds the image grid")
    if spec.ncoils > cx * cy:
        raise ValueError(
            f"{spec.ncoils} coils cannot be linearly independent within a "
            f"{cx}x{cy} support")
    rng = np.random.default_rng(spec.seed)
    ky = np.arange(cy) - cy // 2
    kx = np.arange(cx) - cx // 2
    taper = np.exp(-(ky[:, None] / max(cy / 2, 1)) ** 2 - (kx[None, :] / max(cx / 2, 1)) ** 2)

    def draw(size):
        c = rng.standard_normal(size + (cy, cx)) + 1j * rng.standard_normal(size + (cy, cx))
        c = c * taper
        dc_phase = np.exp(2j * np.pi * rng.random(size))
        c[..., cy // 2, cx // 2] += 2.0 * dc_phase
        return c

    shared = draw((spec.ncoils,))
    own = draw((spec.ncoils, mb))
    w = spec.similarity
    coef = w * shared[:, None] + (1 - w) * own

    ksp = np.zeros((spec.ncoils, mb, ny, nx), dtype=complex)
    ksp[:, :, support_rect(ny, cy), support_rect(nx, cx)] = coef
    maps = ifft2c(ksp) * np.sqrt(ny * nx)
    sos = np.sum(np.abs(maps) ** 2, axis=0)
    maps /= np.sqrt(sos.mean())
    return CoilMapSet(maps, declared_support=(cx, cy))


def sum_of_squares_reference(slices: SliceStack, maps: CoilMapSet) -> SliceStack:
    """Matched-filter combined magnitude reference from the true maps.

    ``|sum_c conj(S_c) * (S_c x)| / sum_c |S_c|^2``; this equals ``|x|``
    wherever the coils have any sensitivity.
    """
    if maps.mb != slices.mb or tuple(maps.shape) != tuple(slices.shape):
        raise ValueError("slice stack and coil maps disagree in shape")
    coil_imgs = maps.maps * slices.data[None]
    num = np.sum(np.conj(maps.maps) * coil_imgs, axis=0)
    den = np.sum(np.abs(maps.maps) ** 2, axis=0)
    out = np.zeros(den.shape)
    ok = den > 0
    out[ok] = np.abs(num[ok] / den[ok])
    return SliceStack(out)


def support_mask(reference, threshold: float = 0.05) -> np.ndarray:
    """Pixels whose magnitude exceeds ``threshold`` times the stack maximum."""
    mag = np.abs(as_array(reference))
    return mag > threshold * mag.max()
