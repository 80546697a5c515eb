"""Parallel-imaging reconstruction: CG-SENSE, uniform GRAPPA and slice-GRAPPA."""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from .calib import ACSRegion, estimate_coil_maps_from_acs
from .model import (CoilMapSet, KSpaceData, SliceStack, as_array, extended_maps,
                    extract_segments, fft2c, fftc, ifft2c, ifftc, uniform_offsets)

__all__ = [
    "ReconConfig",
    "ReconResult",
    "cg_sense",
    "ColumnSense",
    "grappa_uniform",
    "slice_grappa",
    "matched_filter_combine",
    "uniform_lattice",
]

METHODS = ("cg_sense", "grappa_uniform", "slice_grappa")


@dataclass
class ReconConfig:
    """Reconstruction settings.

    ``lam`` is a Tikhonov weight (CG-SENSE) or a ridge weight relative to
    the mean source energy (GRAPPA kernels). ``kernel`` is ``(E_x, E_y)``;
    for GRAPPA ``E_y`` counts acquired source lines.
    """

    method: str = "cg_sense"
    lam: float = 0.0
    max_iters: int = 200
    cg_tolerance: float = 1e-8
    kernel: tuple = (5, 4)
    precondition: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.cg_tolerance > 0:
            raise ValueError("cg_tolerance must be > 0")
        self.kernel = tuple(int(e) for e in self.kernel)
        if len(self.kernel) != 2 or min(self.kernel) < 1:
            raise ValueError("kernel must be a pair of positive integers")


@dataclass
class ReconResult:
    slices: SliceStack
    iterations: int = 0
    residual: float = 0.0
    wall_time: float = 0.0
    converged: bool = True
    flags: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    extended: Optional[np.ndarray] = None


def matched_filter_combine(coil_imgs, maps, eps: float = 1e-12):
    """``sum_c conj(S_c) x_c / sum_c |S_c|^2`` over the coil axis 0."""
    den = np.sum(np.abs(maps) ** 2, axis=0)
    num = np.sum(np.conj(maps) * coil_imgs, axis=0)
    out = np.zeros(np.broadcast_shapes(num.shape, den.shape), dtype=complex)
    ok = np.broadcast_to(den > eps, out.shape)
    out[ok] = (num / np.where(den > eps, den, 1.0))[ok]
    return out


# --------------------------------------------------------------------------
# CG-SENSE
# --------------------------------------------------------------------------

def _keep_of(kspace, mask):
    if mask is not None:
        keep = np.asarray(getattr(mask, "keep", mask), dtype=bool)
    elif kspace.mask is not None:
        keep = kspace.mask
    else:
        keep = np.ones(kspace.data.shape[1], dtype=bool)
    if keep.shape != (kspace.data.shape[1],):
        raise ValueError("mask length does not match the k-space PE extent")
    return keep


class _SenseOperator:
    """Normal operator ``E^H E + lam`` of a masked multi-coil encoding."""

    def __init__(self, kspace: KSpaceData, maps: CoilMapSet, keep, lam):
        self.keep = keep
        self.lam = lam
        nc, nky, nkx = kspace.data.shape
        if maps.ncoils != nc:
            raise ValueError("coil count of maps and k-space differ")
        if kspace.grid == "extended":
            n = kspace.extension
            ny = nky // n
            if tuple(maps.shape) != (ny, nkx):
                raise ValueError(
                    f"maps {tuple(maps.shape)} do not match extended grid {(nky, nkx)} / {n}")
            self.offsets = tuple(kspace.offsets or uniform_offsets(maps.mb, ny))
            if len(self.offsets) != maps.mb:
                raise ValueError("one slice offset per map slice is required")
            self.smaps = extended_maps(maps, n, self.offsets)[:, None]    # (c, 1, Y, x)
            self.phases = None
            self.ny = ny
        else:
            if tuple(maps.shape) != (nky, nkx):
                raise ValueError("maps do not match the collapsed grid")
            self.smaps = maps.maps                                          # (c, s, y, x)
            ph = kspace.phases if kspace.phases is not None else np.zeros((nky, maps.mb))
            if ph.shape != (nky, maps.mb):
                raise ValueError("phase table does not match maps")
            self.phases = np.exp(1j * ph).T[:, :, None]                     # (s, ky, 1)
            self.ny = nky
        sos = np.sum(np.abs(self.smaps) ** 2, axis=0)
        self.support = sos > 0
        frac = keep.mean()
        self.diag = frac * sos + lam

    def forward(self, x):
        k = fft2c(self.smaps * x[None])
        if self.phases is not None:
            k = np.sum(k * self.phases[None], axis=1)
        else:
            k = k[:, 0]
        return k * self.keep[None, :, None]

    def adjoint(self, y):
        y = y * self.keep[None, :, None]
        if self.phases is not None:
            y = y[:, None] * np.conj(self.phases)[None]
        else:
            y = y[:, None]
        return np.sum(np.conj(self.smaps) * ifft2c(y), axis=0)

    def normal(self, x):
        return self.adjoint(self.forward(x)) + self.lam * x


def cg_sense(kspace: KSpaceData, maps: CoilMapSet, mask=None,
             cfg: Optional[ReconConfig] = None, x0=None) -> ReconResult:
    """Tikhonov-regularised SENSE solved by (Jacobi-preconditioned) CG.

    Solves ``(E^H E + lam I) x = E^H y`` where ``E`` is coil weighting,
    centered 2D FFT (plus CAIPI phase modulation and slice sum on the
    collapsed grid) and PE-line masking. On the extended grid the unknown
    is the whole extended image; the per-slice images are cut out at the
    k-space offsets afterwards. Pixels without sensitivity stay zero.

    Stops when ``||r|| <= cg_tolerance * ||E^H y||`` or after ``max_iters``
    (a ``RuntimeWarning`` is issued and ``converged`` is False). ``history``
    records the data-fit objective ``||E x - y||^2 + lam ||x||^2`` after
    every iteration.
    """
    cfg = cfg or ReconConfig()
    t0 = time.perf_counter()
    keep = _keep_of(kspace, mask)
    op = _SenseOperator(kspace, maps, keep, cfg.lam)
    y = kspace.data * keep[None, :, None]
    b = op.adjoint(y) * op.support
    bnorm = np.linalg.norm(b)
    inv_diag = np.where(op.support, 1.0 / np.where(op.diag > 0, op.diag, 1.0), 0.0)
    if not cfg.precondition:
        inv_diag = op.support.astype(float)

    def objective(x):
        return float(np.linalg.norm(op.forward(x) - y) ** 2 + cfg.lam * np.linalg.norm(x) ** 2)

    x = np.zeros(b.shape, dtype=complex) if x0 is None else np.array(x0, dtype=complex)
    r = b - op.normal(x) * op.support
    z = inv_diag * r
    p = z.copy()
    rz = np.vdot(r, z).real
    history = [objective(x)]
    it = 0
    res = np.linalg.norm(r) / bnorm if bnorm > 0 else 0.0
    converged = res <= cfg.cg_tolerance
    while not converged and it < cfg.max_iters:
        q = op.normal(p) * op.support
        pq = np.vdot(p, q).real
        if pq <= 0:
            break
        alpha = rz / pq
        x = x + alpha * p
        r = r - alpha * q
        it += 1
        history.append(objective(x))
        res = np.linalg.norm(r) / bnorm
        if res <= cfg.cg_tolerance:
            converged = True
            break
        z = inv_diag * r
        rz_new = np.vdot(r, z).real
        p = z + (rz_new / rz) * p
        rz = rz_new
    if not converged:
        warnings.warn(f"CG-SENSE stopped after {it} iterations at relative residual {res:.3g}",
                      RuntimeWarning, stacklevel=2)
    flags = {}
    if kspace.grid == "extended":
        offs = op.offsets
        if any(b_ - a_ < op.ny for a_, b_ in zip(offs, offs[1:])):
            flags["overlap"] = True
        img = extract_segments(x[0], offs, op.ny)
        extended = x[0]
    else:
        img = x
        extended = None
    return ReconResult(SliceStack(img), it, float(res), time.perf_counter() - t0,
                       converged, flags, history, extended)


# --------------------------------------------------------------------------
# Exact column-wise SENSE (fast path for noise studies)
# --------------------------------------------------------------------------

class ColumnSense:
    """Direct SENSE solve per readout column for a fixed PE mask.

    With the readout axis fully sampled, the normal matrix decouples into
    one ``Y x Y`` Hermitian system per column ``x``:
    ``A_x = P * G_x + lam I`` (elementwise product), where
    ``P = F^H diag(mask) F`` is the PE point-spread (circulant) matrix and
    ``G_x[y, y'] = sum_c conj(S_c[y, x]) S_c[y', x]``. Each ``A_x`` is
    Cholesky-factorised once; columns whose pivots collapse below
    ``singular_tol`` (relative) are marked singular and solve to ``inf``.

    ``maps`` is ``(Nc, Y, Nx)`` (already laid out on the grid of the data).
    Only rows with nonzero sensitivity are unknowns. ``gram`` may pass a
    precomputed :meth:`column_gram` to reuse it across masks.
    """

    def __init__(self, maps, keep, columns=None, lam: float = 0.0,
                 singular_tol: float = 1e-12, gram=None):
        maps = np.asarray(maps)
        nc, Y, nx = maps.shape
        self.keep = np.asarray(keep, dtype=bool)
        if self.keep.shape != (Y,):
            raise ValueError("mask length must equal the map PE extent")
        self.columns = np.arange(nx) if columns is None else np.asarray(columns, dtype=int)
        self.maps = maps[:, :, self.columns]                     # (c, Y, ncol)
        self.rows = np.flatnonzero(np.any(self.maps != 0, axis=(0, 2)))
        self.lam = lam
        if gram is None:
            gram = self.column_gram(maps, self.columns)
        eye = np.eye(Y)
        P = ifftc(self.keep[:, None] * fftc(eye, axis=0), axis=0)
        A = P[np.ix_(self.rows, self.rows)][None] * gram
        idx = np.arange(len(self.rows))
        A[:, idx, idx] += lam
        self.singular = np.zeros(len(self.columns), dtype=bool)
        try:
            L = np.linalg.cholesky(A)
            factors = list(L)
        except np.linalg.LinAlgError:
            factors = []
            for j in range(len(self.columns)):
                try:
                    factors.append(np.linalg.cholesky(A[j]))
                except np.linalg.LinAlgError:
                    factors.append(None)
        for j, Lj in enumerate(factors):
            if Lj is None:
                self.singular[j] = True
                continue
            piv = np.abs(np.diagonal(Lj)) ** 2
            if not np.all(np.isfinite(piv)) or piv.min() <= singular_tol * piv.max():
                self.singular[j] = True
                factors[j] = None
        self.factors = factors

    @staticmethod
    def column_gram(maps, columns=None):
        """Per-column coil Gram matrices over rows with nonzero sensitivity."""
        maps = np.asarray(maps)
        if columns is not None:
            maps = maps[:, :, np.asarray(columns, dtype=int)]
        rows = np.flatnonzero(np.any(maps != 0, axis=(0, 2)))
        S = maps[:, rows].transpose(2, 0, 1)                     # (ncol, c, y)
        return np.matmul(np.conj(S).transpose(0, 2, 1), S)

    def adjoint(self, hybrid):
        """``E^H y`` for hybrid data ``(..., Nc, Y, ncol)`` (ky, x)."""
        y = hybrid * self.keep[:, None]
        img = ifftc(y, axis=-2)[..., self.rows, :]
        return np.sum(np.conj(self.maps[:, self.rows]) * img, axis=-3)

    def solve(self, hybrid):
        """Reconstruct ``(..., Y, ncol)`` images from hybrid data ``(..., Nc, Y, ncol)``."""
        b = self.adjoint(hybrid)                                 # (..., y, ncol)
        lead = b.shape[:-2]
        b2 = b.reshape((-1,) + b.shape[-2:])
        out = np.zeros(lead + (self.maps.shape[1], len(self.columns)), dtype=complex)
        out2 = out.reshape((-1,) + out.shape[-2:])
        for j, L in enumerate(self.factors):
            if L is None:
                out2[:, self.rows, j] = np.inf
                continue
            rhs = b2[:, :, j].T
            w = scipy.linalg.solve_triangular(L, rhs, lower=True, check_finite=False)
            sol = scipy.linalg.solve_triangular(L, w, lower=True, trans="C", check_finite=False)
            out2[:, self.rows, j] = sol.T
        return out


# --------------------------------------------------------------------------
# GRAPPA
# --------------------------------------------------------------------------

def uniform_lattice(keep) -> tuple:
    """``(R, offset)`` if ``keep`` is a full uniform lattice, else ValueError."""
    idx = np.flatnonzero(keep)
    n = len(keep)
    if idx.size == 0:
        raise ValueError("mask samples no lines")
    if idx.size == n:
        return 1, 0
    steps = np.diff(idx)
    R = int(steps[0]) if steps.size else n
    expected = np.zeros(n, dtype=bool)
    expected[idx[0] % R::R] = True
    if steps.size == 0 or np.any(steps != R) or not np.array_equal(expected, keep):
        raise ValueError("mask is not a uniform lattice; use cg_sense for arbitrary masks")
    return R, int(idx[0] % R)


def _tap_offsets(ey, ex, R, r):
    jy = np.arange(ey) - (ey - 1) // 2
    dys = -r + R * jy
    dxs = np.arange(ex) - ex // 2
    return dys, dxs


def _gather(data, rows, dys, dxs, wrap_y=True, x_valid=None):
    """Source matrix ``(len(rows) * nx', Nc * Ey * Ex)`` from taps around each row.

    Sample ``data[c, row + dy, x + dx]`` with circular indexing in x; in
    ky either circular (``wrap_y``) or the caller guarantees validity.
    """
    nc, ny, nx = data.shape
    xs = np.arange(nx) if x_valid is None else x_valid
    ridx = (rows[:, None] + dys[None, :])
    if wrap_y:
        ridx = ridx % ny
    cidx = (xs[:, None] + dxs[None, :]) % nx
    # (c, rows, ey, xs, ex)
    g = data[:, ridx[:, :, None, None], cidx[None, None, :, :]]
    g = g.transpose(1, 3, 0, 2, 4)                          # rows, xs, c, ey, ex
    return g.reshape(len(rows) * len(xs), -1)


def _fit(src, tgt, lam):
    if lam > 0:
        gram = src.conj().T @ src
        scale = np.real(np.trace(gram)) / gram.shape[0]
        gram[np.diag_indices_from(gram)] += lam * scale
        return np.linalg.solve(gram, src.conj().T @ tgt)
    return np.linalg.lstsq(src, tgt, rcond=None)[0]


def _training_rows(ny_block, dys):
    lo = -dys.min()
    hi = ny_block - dys.max()
    return np.arange(max(lo, 0), min(hi, ny_block))


def _acs_x(acs: ACSRegion, nx):
    full = acs.shape[1] == nx
    return full


def grappa_uniform(kspace: KSpaceData, acs: Optional[ACSRegion], R: Optional[int] = None,
                   cfg: Optional[ReconConfig] = None, calib=None) -> KSpaceData:
    """Fill a uniformly undersampled k-space with trained prediction kernels.

    For each missing lattice offset ``r`` a kernel maps the ``E_y``
    nearest acquired lines (spacing ``R``) and ``E_x`` readout taps of all
    coils to every coil at the missing point. Kernels are least-squares
    fits over the ACS block (``acs`` in ``calib`` if given, else in
    ``kspace``); ``cfg.lam > 0`` adds a ridge term. Kernels are applied
    with circular indexing, so DFT-simulated data are treated exactly.
    Acquired lines are copied through untouched.
    """
    cfg = cfg or ReconConfig(method="grappa_uniform")
    keep = _keep_of(kspace, None)
    R_mask, offset = uniform_lattice(keep)
    if R is not None and int(R) != R_mask and R_mask != 1:
        raise ValueError(f"mask lattice has R={R_mask}, not {R}")
    R = R_mask
    out = kspace.data.copy()
    if R == 1:
        return KSpaceData(out, kspace.grid, kspace.extension, kspace.offsets,
                          kspace.phases, keep.copy(), dict(kspace.meta))
    ex, ey = cfg.kernel
    src_data = kspace.data if calib is None else as_array(calib)
    if acs is None:
        raise ValueError("an ACS region is required")
    block = acs.take(src_data)
    nc, by, bx = block.shape
    nx = kspace.data.shape[2]
    wrap_x = bx == nx
    if not wrap_x and bx < ex:
        raise ValueError(f"ACS readout extent {bx} is smaller than E_x={ex}")
    x_valid = None if wrap_x else np.arange(ex // 2, bx - (ex - 1 - ex // 2))
    ny = kspace.data.shape[1]
    for r in range(1, R):
        dys, dxs = _tap_offsets(ey, ex, R, r)
        rows = _training_rows(by, dys)
        if rows.size == 0:
            raise ValueError(
                f"ACS has {by} PE lines; at least {dys.max() - dys.min() + 1} are needed for "
                f"E_y={ey} at R={R}")
        src = _gather(block, rows, dys, dxs, wrap_y=False, x_valid=x_valid)
        tgt = _gather(block, rows, np.array([0]), np.array([0]), wrap_y=False, x_valid=x_valid)
        W = _fit(src, tgt, cfg.lam)
        miss = np.arange((offset + r) % R, ny, R)
        miss = miss[~keep[miss]]
        app = _gather(kspace.data, miss, dys, dxs, wrap_y=True)
        pred = (app @ W).reshape(len(miss), nx, nc).transpose(2, 0, 1)
        out[:, miss, :] = pred
    meta = dict(kspace.meta, grappa_R=R, grappa_kernel=(ex, ey))
    return KSpaceData(out, kspace.grid, kspace.extension, kspace.offsets, kspace.phases,
                      np.ones(ny, dtype=bool), meta)


def slice_grappa(caipi_kspace: KSpaceData, per_slice_calibration: Sequence,
                 cfg: Optional[ReconConfig] = None, acs: Optional[ACSRegion] = None,
                 maps: Optional[CoilMapSet] = None, inplane: bool = True,
                 inplane_kernel: Optional[tuple] = None) -> ReconResult:
    """Slice-GRAPPA separation of collapsed CAIPI data.

    ``per_slice_calibration[s]`` holds separately acquired single-slice
    k-space (full grid, fully sampled inside ``acs``). The CAIPI phases of
    ``caipi_kspace`` are applied to each calibration slice and the results
    summed to synthesise collapsed training data. One kernel per slice maps
    the collapsed neighbourhood (acquired lines at the in-plane spacing,
    ``cfg.kernel`` taps) to all coils of that slice's phase-modulated
    k-space. After demodulation the slice k-spaces are optionally completed
    by :func:`grappa_uniform` (in-plane acceleration), inverse transformed
    and coil-combined with ``maps`` or with maps estimated from the ACS.
    """
    cfg = cfg or ReconConfig(method="slice_grappa")
    t0 = time.perf_counter()
    data = caipi_kspace.data
    nc, ny, nx = data.shape
    calibs = [as_array(c) for c in per_slice_calibration]
    mb = len(calibs)
    if any(c.shape != data.shape for c in calibs):
        raise ValueError("calibration grids must match the collapsed grid")
    keep = _keep_of(caipi_kspace, None)
    R_in, offset = uniform_lattice(keep)
    phases = caipi_kspace.phases if caipi_kspace.phases is not None else np.zeros((ny, mb))
    if phases.shape != (ny, mb):
        raise ValueError("phase table does not match the number of calibration slices")
    acs = acs or ACSRegion((0, ny), (0, nx))
    mod = np.exp(1j * phases).T                                   # (s, ky)
    targets = [acs.take(calibs[s] * mod[s][None, :, None]) for s in range(mb)]
    collapsed = np.sum(targets, axis=0)
    _, by, bx = collapsed.shape
    ex, ey = cfg.kernel
    wrap_x = bx == nx
    if by < R_in * (ey - 1) + 1 or bx < ex:
        raise ValueError(
            f"calibration {by}x{bx} is too small for kernel E=({ex},{ey}) at R={R_in}")
    x_valid = None if wrap_x else np.arange(ex // 2, bx - (ex - 1 - ex // 2))
    dys, dxs = _tap_offsets(ey, ex, R_in, 0)
    rows = _training_rows(by, dys)
    src = _gather(collapsed, rows, dys, dxs, wrap_y=False, x_valid=x_valid)
    tgt = np.concatenate([_gather(t, rows, np.array([0]), np.array([0]), wrap_y=False,
                                  x_valid=x_valid) for t in targets], axis=1)
    W = _fit(src, tgt, cfg.lam)
    acq = np.flatnonzero(keep)
    app = _gather(data, acq, dys, dxs, wrap_y=True)
    pred = (app @ W).reshape(len(acq), nx, mb, nc).transpose(2, 3, 0, 1)   # (s, c, rows, x)
    slice_k = np.zeros((mb, nc, ny, nx), dtype=complex)
    slice_k[:, :, acq] = pred * np.conj(mod)[:, None, acq, None]
    if R_in > 1 and inplane:
        gcfg = ReconConfig("grappa_uniform", cfg.lam, kernel=inplane_kernel or cfg.kernel)
        for s in range(mb):
            ks = KSpaceData(slice_k[s], mask=keep)
            slice_k[s] = grappa_uniform(ks, acs, R_in, gcfg, calib=calibs[s]).data
    coil_imgs = ifft2c(slice_k)                                   # (s, c, y, x)
    if maps is None:
        est = [estimate_coil_maps_from_acs(KSpaceData(c), acs).maps[:, 0] for c in calibs]
        smaps = np.stack(est, axis=1)
    else:
        smaps = maps.maps
    img = matched_filter_combine(coil_imgs.transpose(1, 0, 2, 3), smaps)
    return ReconResult(SliceStack(img), 0, 0.0, time.perf_counter() - t0, True,
                       {"R_in": R_in, "offset": offset, "kernel": (ex, ey)})
