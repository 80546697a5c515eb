"""Forward-model vocabulary: data containers, centered FFTs, extended-FOV
assembly and the SMILE / CAIPI acquisition operators.

Array layout conventions used throughout the package:

* slice stacks are ``(slice, y, x)``
* coil maps are ``(coil, slice, y, x)``
* k-space is ``(coil, ky, kx)``; ``ky`` is the phase-encoding axis.

All transforms are centered and unitary with DC at index ``N // 2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "InvalidPlacement",
    "as_array",
    "SliceStack",
    "CoilMapSet",
    "ExtendedImage",
    "KSpaceData",
    "fftc",
    "ifftc",
    "fft2c",
    "ifft2c",
    "uniform_offsets",
    "assemble_extended",
    "extract_segments",
    "extended_maps",
    "smile_forward",
    "caipi_phases",
    "caipi_forward",
    "caipi_equivalent_extended",
    "caipi_lines_from_extended",
    "complex_noise",
]


class InvalidPlacement(ValueError):
    """Slice offsets overlap or do not fit in the extended FOV."""


# --------------------------------------------------------------------------
# Centered unitary transforms
# --------------------------------------------------------------------------

def fftc(x, axis=-1):
    """Centered orthonormal 1D FFT along ``axis``."""
    x = np.asarray(x)
    tmp = np.fft.ifftshift(x, axes=axis)
    tmp = np.fft.fft(tmp, axis=axis, norm="ortho")
    return np.fft.fftshift(tmp, axes=axis)


def ifftc(x, axis=-1):
    """Centered orthonormal 1D inverse FFT along ``axis``."""
    x = np.asarray(x)
    tmp = np.fft.ifftshift(x, axes=axis)
    tmp = np.fft.ifft(tmp, axis=axis, norm="ortho")
    return np.fft.fftshift(tmp, axes=axis)


def fft2c(img):
    """Centered orthonormal 2D FFT over the last two axes.

    Leading axes (coils, slices, trials) are treated as batch dimensions.
    """
    img = np.asarray(img)
    if img.ndim < 2:
        raise ValueError("fft2c needs an array with at least 2 dimensions")
    tmp = np.fft.ifftshift(img, axes=(-2, -1))
    tmp = np.fft.fft2(tmp, axes=(-2, -1), norm="ortho")
    return np.fft.fftshift(tmp, axes=(-2, -1))


def ifft2c(ksp):
    """Centered orthonormal 2D inverse FFT over the last two axes."""
    ksp = np.asarray(ksp)
    if ksp.ndim < 2:
        raise ValueError("ifft2c needs an array with at least 2 dimensions")
    tmp = np.fft.ifftshift(ksp, axes=(-2, -1))
    tmp = np.fft.ifft2(tmp, axes=(-2, -1), norm="ortho")
    return np.fft.fftshift(tmp, axes=(-2, -1))


# --------------------------------------------------------------------------
# Containers
# --------------------------------------------------------------------------

@dataclass
class SliceStack:
    """Per-slice images of the excited slab, shape ``(MB, Ny, Nx)``."""

    data: np.ndarray
    pixel_size: float = 1.0

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3:
            raise ValueError(f"SliceStack expects (slice, y, x), got shape {data.shape}")
        mb, ny, nx = data.shape
        if mb < 1 or ny < 2 or nx < 2:
            raise ValueError(f"invalid SliceStack shape {data.shape}")
        self.data = data

    @property
    def mb(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self):
        return self.data.shape[1:]

    def __len__(self):
        return self.mb


@dataclass
class CoilMapSet:
    """Coil sensitivities ``(Nc, MB, Ny, Nx)`` with a declared k-space support.

    ``declared_support`` is ``(C_x, C_y)``: the extent of the centered
    rectangle holding each map's spectrum on the single-slice grid.
    """

    maps: np.ndarray
    declared_support: Optional[tuple] = None

    def __post_init__(self):
        maps = np.asarray(self.maps)
        if maps.ndim == 3:
            maps = maps[:, None]
        if maps.ndim != 4:
            raise ValueError(f"CoilMapSet expects (coil, slice, y, x), got {maps.shape}")
        self.maps = maps
        if self.declared_support is not None:
            self.declared_support = tuple(int(c) for c in self.declared_support)

    @property
    def ncoils(self) -> int:
        return self.maps.shape[0]

    @property
    def mb(self) -> int:
        return self.maps.shape[1]

    @property
    def shape(self):
        return self.maps.shape[2:]

    def independence_ratio(self) -> float:
        """Smallest over largest singular value of the stacked map matrix."""
        mat = self.maps.reshape(self.ncoils, -1)
        sv = np.linalg.svd(mat, compute_uv=False)
        return float(sv[-1] / sv[0])

    def scaled(self, factor) -> "CoilMapSet":
        return CoilMapSet(self.maps * factor, self.declared_support)


@dataclass
class ExtendedImage:
    """Coil images over the n-times extended PE field of view.

    ``data`` has shape ``(Nc, n * Ny, Nx)``; slice ``s`` occupies rows
    ``offsets[s] : offsets[s] + Ny``.
    """

    data: np.ndarray
    extension: int
    offsets: tuple
    slice_height: int

    @property
    def mb(self) -> int:
        return len(self.offsets)


@dataclass
class KSpaceData:
    """Multi-coil k-space ``(Nc, ky, kx)`` on a collapsed or extended grid.

    ``grid`` is ``"collapsed"`` (single-slice FOV, optional CAIPI ``phases``
    of shape ``(Ny, MB)``) or ``"extended"`` (``extension`` times the
    single-slice PE extent, slices at ``offsets``). ``mask`` is a boolean
    PE-line vector; unsampled lines are exactly zero when it is set.
    """

    data: np.ndarray
    grid: str = "collapsed"
    extension: int = 1
    offsets: Optional[tuple] = None
    phases: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.grid not in ("collapsed", "extended"):
            raise ValueError(f"unknown grid type {self.grid!r}")
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError("KSpaceData expects (coil, ky, kx)")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != (self.data.shape[1],):
                raise ValueError("mask length must equal the number of PE lines")

    @property
    def ncoils(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self):
        return self.data.shape[1:]

    @property
    def slice_height(self) -> int:
        return self.data.shape[1] // self.extension


# --------------------------------------------------------------------------
# Extended FOV
# --------------------------------------------------------------------------

def uniform_offsets(mb: int, ny: int) -> tuple:
    """Default placement: slice ``s`` starts at row ``s * ny``."""
    return tuple(s * ny for s in range(mb))


def _check_offsets(offsets, ny, total, allow_overlap):
    offsets = tuple(int(o) for o in offsets)
    if any(b <= a for a, b in zip(offsets, offsets[1:])):
        raise InvalidPlacement(f"slice offsets must be strictly increasing: {offsets}")
    if offsets[0] < 0 or offsets[-1] + ny > total:
        raise InvalidPlacement(
            f"offsets {offsets} with slice height {ny} do not fit in {total} rows")
    if not allow_overlap:
        for a, b in zip(offsets, offsets[1:]):
            if b - a < ny:
                raise InvalidPlacement(f"slices at rows {a} and {b} overlap")
    return offsets


def assemble_extended(slices: SliceStack, maps: CoilMapSet, n: int,
                      offsets: Optional[Sequence[int]] = None,
                      allow_overlap: bool = False) -> ExtendedImage:
    """Place coil-weighted slices into an ``n``-times extended PE FOV.

    Rows not covered by any slice segment are zero. With ``allow_overlap``
    the overlapping contributions add.
    """
    if maps.mb != slices.mb or tuple(maps.shape) != tuple(slices.shape):
        raise ValueError("slice stack and coil maps disagree in shape")
    n = int(n)
    if n < 1:
        raise ValueError("extension factor must be >= 1")
    ny, nx = slices.shape
    if offsets is None:
        offsets = uniform_offsets(slices.mb, ny)
    offsets = _check_offsets(offsets, ny, n * ny, allow_overlap)
    if len(offsets) != slices.mb:
        raise ValueError("one offset per slice is required")
    out = np.zeros((maps.ncoils, n * ny, nx), dtype=np.result_type(slices.data, maps.maps, np.complex64))
    for s, off in enumerate(offsets):
        out[:, off:off + ny] += maps.maps[:, s] * slices.data[s]
    return ExtendedImage(out, n, offsets, ny)


def extract_segments(extended: np.ndarray, offsets, ny: int) -> np.ndarray:
    """Cut ``(..., n*Ny, Nx)`` back into ``(..., MB, Ny, Nx)`` at ``offsets``."""
    return np.stack([extended[..., off:off + ny, :] for off in offsets], axis=-3)


def extended_maps(maps: CoilMapSet, n: int, offsets=None) -> np.ndarray:
    """Coil maps laid out over the extended FOV, shape ``(Nc, n*Ny, Nx)``.

    Rows outside every slice segment carry zero sensitivity.
    """
    ny, nx = maps.shape
    if offsets is None:
        offsets = uniform_offsets(maps.mb, ny)
    out = np.zeros((maps.ncoils, n * ny, nx), dtype=maps.maps.dtype)
    for s, off in enumerate(offsets):
        out[:, off:off + ny] += maps.maps[:, s]
    return out


# --------------------------------------------------------------------------
# Acquisition
# --------------------------------------------------------------------------

def as_array(obj) -> np.ndarray:
    """The array held by a container type (``SliceStack``, ``KSpaceData``), or ``obj`` itself."""
    if isinstance(obj, np.ndarray):
        return obj
    if isinstance(obj, (SliceStack, KSpaceData, ExtendedImage)):
        return obj.data
    return np.asarray(obj)


def _keep(mask, length):
    if mask is None:
        return np.ones(length, dtype=bool)
    keep = np.asarray(getattr(mask, "keep", mask), dtype=bool)
    if keep.ndim != 1:
        raise ValueError("a single-frame PE mask is required")
    if keep.shape[0] != length:
        raise ValueError(f"mask has {keep.shape[0]} PE lines, grid has {length}")
    return keep


def complex_noise(rng, shape, sigma) -> np.ndarray:
    """Circular complex Gaussian noise with ``E|n|^2 = sigma^2``."""
    scale = sigma / np.sqrt(2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def _acquire(full, keep, noise_sigma, seed):
    data = full.copy()
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        data = data + complex_noise(rng, data.shape, noise_sigma)
    data[:, ~keep, :] = 0
    return data


def smile_forward(ext: ExtendedImage, mask=None, noise_sigma: float = 0.0,
                  seed: int = 0) -> KSpaceData:
    """Simulate a SMILE acquisition of an extended-FOV coil image.

    Per-coil centered FFT, keep the PE lines selected by ``mask`` and add
    complex Gaussian noise of standard deviation ``noise_sigma`` to the
    kept samples. Noise is drawn for the full grid before masking so a
    given seed yields the same noise on a line regardless of the mask.
    """
    nrows = ext.data.shape[1]
    keep = _keep(mask, nrows)
    data = _acquire(fft2c(ext.data), keep, noise_sigma, seed)
    return KSpaceData(data, grid="extended", extension=ext.extension,
                      offsets=tuple(ext.offsets), mask=keep.copy())


def caipi_phases(ny: int, mb: int, cycle: Optional[int] = None) -> np.ndarray:
    """CAIPI phase table ``phase[m, s] = 2*pi*s*m/cycle`` (default cycle = MB).

    ``m`` is the raw PE row index of the collapsed k-space array.
    """
    cycle = mb if cycle is None else int(cycle)
    m = np.arange(ny)[:, None]
    s = np.arange(mb)[None, :]
    return 2 * np.pi * s * m / cycle


def caipi_forward(slices: SliceStack, maps: CoilMapSet, phases=None, mask=None,
                  noise_sigma: float = 0.0, seed: int = 0) -> KSpaceData:
    """Collapsed-FOV SMS acquisition with per-line inter-slice phases.

    Line ``m`` of the output is ``sum_s exp(1j*phases[m, s]) * K_s[m]`` where
    ``K_s`` is the coil k-space of slice ``s``. ``phases=None`` means no
    phase modulation (plain slice sum).
    """
    if maps.mb != slices.mb:
        raise ValueError("slice stack and coil maps disagree in slice count")
    mb = slices.mb
    ny, nx = slices.shape
    if phases is None:
        phases = np.zeros((ny, mb))
    phases = np.asarray(phases, dtype=float)
    if phases.shape != (ny, mb):
        raise ValueError(f"phase table must have shape {(ny, mb)}, got {phases.shape}")
    keep = _keep(mask, ny)
    coil_k = fft2c(maps.maps * slices.data[None])          # (c, s, ky, kx)
    mod = np.exp(1j * phases).T[None, :, :, None]           # (1, s, ky, 1)
    full = (coil_k * mod).sum(axis=1)
    data = _acquire(full, keep, noise_sigma, seed)
    return KSpaceData(data, grid="collapsed", extension=1, phases=phases, mask=keep.copy())


def _fourier_shift_rows(img, shift):
    """Circularly shift along axis -2 by a possibly fractional ``shift``."""
    ny = img.shape[-2]
    f = np.arange(ny) - ny // 2
    ramp = np.exp(-2j * np.pi * f * shift / ny)[:, None]
    return ifftc(fftc(img, axis=-2) * ramp, axis=-2)


def caipi_equivalent_extended(slices: SliceStack, maps: CoilMapSet,
                              cycle: Optional[int] = None) -> ExtendedImage:
    """Extended-FOV image whose uniform R=n subsampling reproduces CAIPI data.

    Each slice is placed at its uniform offset ``s*Ny`` after being moved by
    its CAIPI in-plane shift (``-s*Ny/cycle`` rows, applied as a Fourier
    shift) and multiplied by the constant phase that the raw-index phase
    table contributes. With ``n = cycle`` and noiseless data,
    :func:`caipi_lines_from_extended` applied to the SMILE spectrum of this
    image equals :func:`caipi_forward` with :func:`caipi_phases`.
    """
    mb = slices.mb
    ny, _ = slices.shape
    n = mb if cycle is None else int(cycle)
    if n < mb:
        raise ValueError("cycle must be >= MB for a non-overlapping placement")
    c = ny // 2
    coil_imgs = maps.maps * slices.data[None]
    out = np.zeros((maps.ncoils, n * ny, slices.shape[1]), dtype=complex)
    for s in range(mb):
        const = np.exp(2j * np.pi * s * c / n)
        seg = const * _fourier_shift_rows(coil_imgs[:, s], -s * ny / n)
        out[:, s * ny:(s + 1) * ny] = seg
    return ExtendedImage(out, n, uniform_offsets(mb, ny), ny)


def caipi_lines_from_extended(ext_kspace: np.ndarray, ny: int, n: int) -> np.ndarray:
    """Pick the collapsed-grid lines out of an extended-FOV spectrum.

    Collapsed line ``m`` (frequency ``f = m - Ny//2``) sits at extended
    frequency ``n*f``. The factor ``sqrt(n)`` restores unitary scaling, and
    ``(-1)**(f*(n-1))`` (even ``Ny``) reconciles the two grid centres.
    """
    ext_kspace = np.asarray(ext_kspace)
    total = ext_kspace.shape[-2]
    if total != n * ny:
        raise ValueError("extended spectrum does not match n * Ny")
    f = np.arange(ny) - ny // 2
    rows = total // 2 + n * f
    c, ce = ny // 2, total // 2
    conv = np.exp(2j * np.pi * f * (c - ce) / ny)
    return np.sqrt(n) * conv[:, None] * ext_kspace[..., rows, :]
