"""Annihilating-kernel theory and calibration.

Kernel existence is predicted by the counting inequality
``E_x * E_y * N_c > (C_x + E_x - 1) * (C_y + E_y - 1)`` and checked
independently through the nullspace of the calibration matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .model import CoilMapSet, KSpaceData, as_array, extract_segments, ifft2c, uniform_offsets

__all__ = [
    "KernelSizeSpec",
    "KernelSet",
    "ACSRegion",
    "centered_acs",
    "counting_bound_holds",
    "optimal_kernel_size",
    "build_calibration_matrix",
    "estimate_kernels",
    "apply_kernel",
    "singular_ratio",
    "minimal_kernel_extent",
    "estimate_coil_maps_from_acs",
]


@dataclass
class KernelSizeSpec:
    """Support bound ``(C_x, C_y)``, coil count and kernel extent.

    On an ``n``-times extended PE grid the PE support becomes
    ``D_y = n * C_y``.
    """

    cx: int
    cy: int
    ncoils: int
    ex: int
    ey: int
    n: int = 1

    def __post_init__(self):
        for name in ("cx", "cy", "ncoils", "ex", "ey", "n"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")

    @property
    def dy(self) -> int:
        return self.n * self.cy


@dataclass
class KernelSet:
    """Annihilating (or prediction) kernels, coefficients ``(K, Nc, E_y, E_x)``.

    Annihilating kernels are scaled so the centre tap of
    ``designated_coil[k]`` is exactly -1 (``None`` when every centre tap is
    numerically zero and the kernel is left unit-norm). ``residual`` holds
    the singular value behind each kernel.
    """

    coefficients: np.ndarray
    kind: str
    residual: np.ndarray
    designated_coil: list

    def __len__(self):
        return self.coefficients.shape[0]

    @property
    def extent(self):
        return self.coefficients.shape[-1], self.coefficients.shape[-2]


@dataclass
class ACSRegion:
    """Fully sampled k-space rectangle ``[ky0, ky1) x [kx0, kx1)``."""

    ky: tuple
    kx: tuple

    @property
    def shape(self):
        return self.ky[1] - self.ky[0], self.kx[1] - self.kx[0]

    def take(self, data):
        return data[..., self.ky[0]:self.ky[1], self.kx[0]:self.kx[1]]


def centered_acs(shape, ny_lines: int, nx_lines: Optional[int] = None) -> ACSRegion:
    """Centered ACS block of ``ny_lines`` PE lines (all readout points by default)."""
    ny, nx = shape
    nx_lines = nx if nx_lines is None else nx_lines
    y0 = ny // 2 - ny_lines // 2
    x0 = nx // 2 - nx_lines // 2
    if ny_lines > ny or nx_lines > nx or ny_lines < 1 or nx_lines < 1:
        raise ValueError("ACS block does not fit in the grid")
    return ACSRegion((y0, y0 + ny_lines), (x0, x0 + nx_lines))


def counting_bound_holds(spec: KernelSizeSpec) -> bool:
    """Counting condition for an ``[E_x, E_y, N_c]`` annihilating kernel."""
    return spec.ex * spec.ey * spec.ncoils > (spec.cx + spec.ex - 1) * (spec.dy + spec.ey - 1)


def optimal_kernel_size(cx: float, cy: float, ncoils: int, n: int = 1):
    """Smallest real-valued kernel ``(E_x*, E_y*)`` meeting the counting bound.

    ``(1 + sqrt(N_c)) / (N_c - 1) * (C_x - 1, D_y - 1)`` with
    ``D_y = n * C_y``.
    """
    if ncoils < 2:
        raise ValueError("the kernel size bound needs at least two coils")
    if min(cx, cy) < 2:
        raise ValueError("support must be at least 2 in each direction")
    factor = (1 + math.sqrt(ncoils)) / (ncoils - 1)
    return factor * (cx - 1), factor * (n * cy - 1)


def build_calibration_matrix(kspace, region: Optional[ACSRegion], E) -> np.ndarray:
    """Sliding-window (block-Hankel) calibration matrix.

    Rows are valid kernel positions inside ``region`` (ky-major, then kx);
    columns are the ``N_c * E_y * E_x`` taps, ordered coil-major, then ky,
    then kx. ``E`` is ``(E_x, E_y)``.
    """
    data = as_array(kspace)
    block = data if region is None else region.take(data)
    ex, ey = (int(e) for e in E)
    nc, ry, rx = block.shape
    if ry < ey or rx < ex:
        raise ValueError(
            f"calibration region {ry}x{rx} (ky x kx) is smaller than the kernel; "
            f"it needs at least {ey}x{ex}")
    win = sliding_window_view(block, (ey, ex), axis=(1, 2))      # (nc, py, px, ey, ex)
    py, px = win.shape[1:3]
    return np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(py * px, nc * ey * ex)


def _singular_values_padded(mat):
    sv = np.linalg.svd(mat, compute_uv=False)
    return np.concatenate((sv, np.zeros(mat.shape[1] - sv.size))) if sv.size < mat.shape[1] else sv


def singular_ratio(mat) -> float:
    """Smallest over largest singular value, counting the column deficit as zeros."""
    sv = _singular_values_padded(mat)
    return float(sv[-1] / sv[0]) if sv[0] > 0 else 0.0


def estimate_kernels(calib_matrix, threshold: float = 1e-8, ncoils: Optional[int] = None,
                     E=None) -> KernelSet:
    """Nullspace of the calibration matrix as annihilating kernels.

    Right singular vectors whose singular value is at most
    ``threshold * sigma_max`` are kept (vectors of a column-rank deficit
    count as zero). The kernel ``v`` satisfies ``A @ v = 0``, i.e. it acts
    as a correlation over each window. ``E = (E_x, E_y)`` and ``ncoils``
    give the tap layout.
    """
    A = np.asarray(calib_matrix)
    if A.size == 0:
        raise ValueError("empty calibration matrix")
    ncols = A.shape[1]
    if E is None or ncoils is None:
        raise ValueError("kernel extent E and coil count are required to reshape taps")
    ex, ey = E
    if ncoils * ex * ey != ncols:
        raise ValueError("E and ncoils do not match the number of columns")
    _, sv, vh = np.linalg.svd(A, full_matrices=True)
    sv = np.concatenate((sv, np.zeros(ncols - sv.size))) if sv.size < ncols else sv
    smax = sv[0] if sv[0] > 0 else 1.0
    idx = np.flatnonzero(sv <= threshold * smax)
    vecs = vh[idx].conj()                       # rows are nullspace vectors
    coefs = vecs.reshape(len(idx), ncoils, ey, ex)
    designated = []
    for k in range(len(idx)):
        centre = coefs[k, :, ey // 2, ex // 2]
        c = int(np.argmax(np.abs(centre)))
        if np.abs(centre[c]) > 1e-12:
            coefs[k] *= -1.0 / centre[c]
            coefs[k, c, ey // 2, ex // 2] = -1.0
            designated.append(c)
        else:
            designated.append(None)
    return KernelSet(coefs, "annihilating", sv[idx].copy(), designated)


def apply_kernel(kspace, kernel: np.ndarray) -> np.ndarray:
    """Valid-window annihilation residual ``sum_taps kernel * window``.

    ``kernel`` is ``(Nc, E_y, E_x)``; returns the residual map over all
    valid positions of the full k-space.
    """
    data = as_array(kspace)
    nc, ey, ex = kernel.shape
    win = sliding_window_view(data, (ey, ex), axis=(1, 2))
    return np.einsum("cyxij,cij->yx", win, kernel)


def minimal_kernel_extent(kspace, region: Optional[ACSRegion], ex: int,
                          threshold: float = 1e-6, max_ey: int = 64) -> Optional[int]:
    """Smallest ``E_y`` (for fixed ``E_x``) whose calibration matrix has a
    singular-value ratio at or below ``threshold``; ``None`` if none up to
    ``max_ey``."""
    for ey in range(1, max_ey + 1):
        mat = build_calibration_matrix(kspace, region, (ex, ey))
        if singular_ratio(mat) <= threshold:
            return ey
    return None


def _taper(length, full, beta=4.0):
    # Kaiser window on truncated axes; none when the ACS spans the axis
    if length == full:
        return np.ones(length)
    return np.kaiser(length, beta)


def estimate_coil_maps_from_acs(kspace: KSpaceData, region: ACSRegion,
                                mb: Optional[int] = None, offsets=None,
                                eps: float = 1e-12) -> CoilMapSet:
    """Low-resolution maps from an apodised, zero-filled ACS reconstruction.

    The ACS block is windowed with a Kaiser taper (beta 4) along each axis on which it
    is truncated (no taper along an axis it spans completely), zero-filled,
    inverse transformed and divided by the coil sum-of-squares. For
    extended-grid data the maps are cut back into slices at ``offsets``.
    """
    data = kspace.data
    nc, ny, nx = data.shape
    if kspace.mask is not None:
        rows = np.arange(region.ky[0], region.ky[1])
        if not np.all(kspace.mask[rows]):
            raise ValueError("ACS region contains unsampled PE lines")
    block = region.take(data)
    if np.any(np.all(block == 0, axis=(0, 2))):
        raise ValueError("ACS region contains empty PE lines")
    ly, lx = region.shape
    win = _taper(ly, ny)[:, None] * _taper(lx, nx)[None, :]
    lowres = np.zeros_like(data)
    lowres[:, region.ky[0]:region.ky[1], region.kx[0]:region.kx[1]] = block * win
    imgs = ifft2c(lowres)
    sos = np.sqrt(np.sum(np.abs(imgs) ** 2, axis=0))
    maps = imgs / np.maximum(sos, eps)
    if kspace.grid == "extended":
        n = kspace.extension
        h = ny // n
        mb = mb or n
        offsets = offsets or kspace.offsets or uniform_offsets(mb, h)
        seg = extract_segments(maps, offsets, h)                  # (nc, mb, h, nx)
        return CoilMapSet(seg)
    return CoilMapSet(maps[:, None])
