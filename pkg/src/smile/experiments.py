"""Experiment recipes shared by the command line and the acceptance tests.

Every recipe is a pure function of an :class:`ExperimentConfig`; all
randomness is derived from the configured seeds.
"""

from __future__ import annotations

import configparser
import io as _io
import itertools
import math
import os
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import calib, metrics, model, phantom, recon, sampling
from .model import CoilMapSet, KSpaceData, SliceStack

__all__ = [
    "DEFAULTS",
    "ExperimentConfig",
    "Scene",
    "make_scene",
    "noise_sigma",
    "simulate_smile",
    "simulate_caipi",
    "run_smile",
    "run_caipi",
    "theory_sweep",
    "kernel_scaling",
    "ColumnGFactor",
    "GAFitness",
    "column_subset",
    "mask_family",
    "smile_leakage",
    "caipi_leakage",
    "worker_count",
    "MethodOutcome",
    "compare_methods",
    "run_ga",
    "scene_gfactor",
    "extended_scene",
    "full_gfactor_map",
    "scene_from_arrays",
    "smile_mask",
]

# section -> key -> default; the default's type drives parsing
DEFAULTS = {
    "experiment": {"seed": 0},
    "phantom": {"nx": 128, "ny": 128, "mb": 3, "style": "ellipses"},
    "coils": {"ncoils": 8, "support_x": 7, "support_y": 7, "similarity": 0.5},
    "acquisition": {"n": 3, "R": 6.0, "mask": "cava", "center_slope": 1.0,
                    "noise": 0.01, "acs_lines": 32},
    "recon": {"lams": (3e-4, 1e-3, 3e-3), "max_iters": 200, "cg_tolerance": 1e-6,
              "sg_kernels_x": (5, 7, 9), "sg_kernels_y": (4, 6, 8),
              "sg_lams": (1e-4, 1e-3)},
    "sampling": {"R_list": (3.0, 4.0, 5.0, 6.0, 7.0, 8.0), "trials": 64,
                 "ga_population": 50, "ga_generations": 50, "ga_trials": 16,
                 "ga_columns": 16, "center_slope": 0.5},
    "sweep": {"ncoils": (2, 4, 8), "support": (3, 5, 7), "kernel_max": 8,
              "grid": 32, "threshold": 1e-8},
}


def _parse(value: str, default):
    if isinstance(default, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        kind = type(default[0]) if default else float
        return tuple(kind(v) for v in value.replace(",", " ").split())
    return value.strip()


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class ExperimentConfig:
    """Sectioned ``key = value`` configuration with typed defaults.

    Values are reached as ``cfg["section"]["key"]`` or through
    :meth:`get`. Unknown sections or keys are rejected so typos surface.
    """

    def __init__(self, values: Optional[dict] = None):
        self.values = {sec: dict(keys) for sec, keys in DEFAULTS.items()}
        for sec, keys in (values or {}).items():
            for key, val in keys.items():
                self.set(sec, key, val)
        self.validate()

    def __getitem__(self, section):
        return self.values[section]

    def get(self, section, key):
        return self.values[section][key]

    def set(self, section, key, value):
        if section not in DEFAULTS:
            raise KeyError(f"unknown config section [{section}]")
        if key not in DEFAULTS[section]:
            raise KeyError(f"unknown config key {key!r} in [{section}]")
        default = DEFAULTS[section][key]
        if isinstance(value, str) and not isinstance(default, str):
            value = _parse(value, default)
        elif isinstance(default, tuple):
            value = tuple(type(default[0])(v) for v in np.atleast_1d(value))
        elif isinstance(default, float):
            value = float(value)
        elif isinstance(default, int):
            value = int(value)
        self.values[section][key] = value

    def validate(self):
        mb = self.get("phantom", "mb")
        n = self.get("acquisition", "n")
        R = self.get("acquisition", "R")
        ny = self.get("phantom", "ny")
        if n < 1:
            raise ValueError("extension factor n must be >= 1")
        if n < mb:
            raise ValueError(f"non-overlapping placement needs n >= MB ({n} < {mb})")
        if not 1 <= R <= n * ny:
            raise ValueError(f"R must lie in [1, n*Ny] = [1, {n * ny}]")
        phantom.PhantomSpec(self.get("phantom", "nx"), ny, mb, self.get("phantom", "style"))

    @classmethod
    def from_ini(cls, text: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser()
        parser.optionxform = str
        parser.read_string(text)
        return cls({sec: dict(parser[sec]) for sec in parser.sections()})

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_ini(fh.read())

    def to_ini(self) -> str:
        out = _io.StringIO()
        for sec in DEFAULTS:
            out.write(f"[{sec}]\n")
            for key in DEFAULTS[sec]:
                out.write(f"{key} = {_format(self.values[sec][key])}\n")
            out.write("\n")
        return out.getvalue()

    @property
    def seed(self) -> int:
        return self.get("experiment", "seed")


def worker_count() -> int:
    """Worker processes from ``SMILE_WORKERS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("SMILE_WORKERS", "1")))
    except ValueError:
        return 1


# --------------------------------------------------------------------------
# Scene and simulation
# --------------------------------------------------------------------------

def _c64(a):
    # quantise to the on-disk precision so file-based and in-memory runs agree
    return np.asarray(a).astype(np.complex64).astype(np.complex128)


@dataclass
class Scene:
    slices: SliceStack
    maps: CoilMapSet
    support: np.ndarray


def make_scene(cfg: ExperimentConfig, mb: Optional[int] = None) -> Scene:
    """Phantom stack and coil maps of the configured geometry."""
    p = cfg["phantom"]
    c = cfg["coils"]
    mb = p["mb"] if mb is None else mb
    spec = phantom.PhantomSpec(p["nx"], p["ny"], mb, p["style"], seed=cfg.seed)
    slices = phantom.make_phantom(spec)
    cspec = phantom.CoilSpec(c["ncoils"], (c["support_x"], c["support_y"]), c["similarity"],
                             seed=cfg.seed)
    maps = phantom.make_coil_maps(cspec, mb, (p["ny"], p["nx"]))
    slices = SliceStack(_c64(slices.data))
    maps = CoilMapSet(_c64(maps.maps), maps.declared_support)
    return scene_from_arrays(slices, maps)


def scene_from_arrays(slices: SliceStack, maps: CoilMapSet) -> Scene:
    return Scene(slices, maps, phantom.support_mask(slices))


def noise_sigma(cfg: ExperimentConfig, scene: Scene) -> float:
    """Collapsed-grid k-space noise: a fraction of the peak coil-image magnitude."""
    peak = np.abs(scene.maps.maps * scene.slices.data[None]).max()
    return float(cfg.get("acquisition", "noise") * peak)


def smile_mask(cfg: ExperimentConfig, n_pe: int) -> sampling.SamplingMask:
    a = cfg["acquisition"]
    kind, R, seed = a["mask"], a["R"], cfg.seed
    if kind == "cava":
        return sampling.cava_mask(n_pe, R, seed=seed, center_slope=a["center_slope"])
    if kind == "poisson":
        return sampling.poisson_mask(n_pe, R, seed=seed)
    if kind == "random":
        return sampling.random_mask(n_pe, R, seed=seed)
    if kind == "uniform":
        return sampling.uniform_mask(n_pe, int(R))
    raise ValueError(f"unknown mask generator {kind!r}")


def simulate_smile(cfg: ExperimentConfig, scene: Scene, noisy: bool = True,
                   mask: Optional[sampling.SamplingMask] = None) -> KSpaceData:
    """Extended-FOV acquisition.

    The extended grid's unitary transform carries an extra ``1/sqrt(n)``
    relative to the collapsed grid, so the same physical per-sample noise
    is ``sigma / sqrt(n)`` here.
    """
    n = cfg.get("acquisition", "n")
    ny = scene.slices.shape[0]
    mask = mask if mask is not None else smile_mask(cfg, n * ny)
    ext = model.assemble_extended(scene.slices, scene.maps, n)
    sigma = noise_sigma(cfg, scene) / math.sqrt(n) if noisy else 0.0
    k = model.smile_forward(ext, mask, noise_sigma=sigma, seed=cfg.seed + 1)
    k.data = _c64(k.data)
    k.meta.update(mask=mask.generator, R=float(mask.R), sigma=sigma)
    return k


def caipi_in_plane_R(cfg: ExperimentConfig, mb: int) -> int:
    R = cfg.get("acquisition", "R")
    r_in = R / mb
    if abs(r_in - round(r_in)) > 1e-9 or round(r_in) < 1:
        raise ValueError(f"net R={R:g} is not an integer multiple of MB={mb}")
    return int(round(r_in))


def simulate_caipi(cfg: ExperimentConfig, scene: Scene, noisy: bool = True):
    """Collapsed CAIPI acquisition plus separately acquired calibration slices.

    Returns ``(kspace, calibrations)``; each calibration is the fully
    sampled single-slice coil k-space with independent noise.
    """
    mb = scene.slices.mb
    ny, nx = scene.slices.shape
    r_in = caipi_in_plane_R(cfg, mb)
    mask = sampling.uniform_mask(ny, r_in)
    sigma = noise_sigma(cfg, scene) if noisy else 0.0
    k = model.caipi_forward(scene.slices, scene.maps, model.caipi_phases(ny, mb), mask,
                            noise_sigma=sigma, seed=cfg.seed + 1)
    k.data = _c64(k.data)
    k.meta.update(R_in=r_in, sigma=sigma)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    calibs = []
    for s in range(mb):
        ks = model.fft2c(scene.maps.maps[:, s] * scene.slices.data[s])
        if sigma > 0:
            ks = ks + model.complex_noise(rng, ks.shape, sigma)
        calibs.append(KSpaceData(_c64(ks)))
    return k, calibs


def run_smile(cfg: ExperimentConfig, k: KSpaceData, scene: Scene, lams=None):
    """CG-SENSE over the extended FOV; the Tikhonov weight is picked from
    ``[recon] lams`` by SER against the reference. Returns
    ``(ReconResult, lam, ser)``."""
    r = cfg["recon"]
    lams = r["lams"] if lams is None else lams
    best = None
    for lam in lams:
        rc = recon.ReconConfig("cg_sense", lam=lam, max_iters=r["max_iters"],
                               cg_tolerance=r["cg_tolerance"])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = recon.cg_sense(k, scene.maps, cfg=rc)
        score = metrics.ser(scene.slices, res.slices, scene.support)
        if best is None or score > best[2]:
            best = (res, lam, score)
    return best


def run_caipi(cfg: ExperimentConfig, k: KSpaceData, calibs, scene: Scene):
    """Slice-GRAPPA (+ in-plane GRAPPA) with kernel size and ridge picked
    from the ``[recon] sg_*`` grids by SER. Returns
    ``(ReconResult, (E_x, E_y), lam, ser)``."""
    r = cfg["recon"]
    ny, nx = scene.slices.shape
    acs = calib.centered_acs((ny, nx), cfg.get("acquisition", "acs_lines"))
    best = None
    for ex, ey, lam in itertools.product(r["sg_kernels_x"], r["sg_kernels_y"], r["sg_lams"]):
        rc = recon.ReconConfig("slice_grappa", lam=lam, kernel=(ex, ey))
        try:
            res = recon.slice_grappa(k, calibs, rc, acs=acs, maps=scene.maps)
        except ValueError:
            continue
        score = metrics.ser(scene.slices, res.slices, scene.support)
        if best is None or score > best[3]:
            best = (res, (ex, ey), lam, score)
    if best is None:
        raise ValueError("no slice-GRAPPA kernel fits the calibration region")
    return best


def smile_leakage(cfg: ExperimentConfig, scene: Scene, full: bool = True, lam: float = 0.0):
    """Noiseless SMILE CG-SENSE leakage matrix (full or configured sampling)."""
    n = cfg.get("acquisition", "n")
    ny = scene.slices.shape[0]
    mask = sampling.uniform_mask(n * ny, 1) if full else smile_mask(cfg, n * ny)
    rc = recon.ReconConfig("cg_sense", lam=lam, max_iters=cfg.get("recon", "max_iters"),
                           cg_tolerance=1e-10)

    def run(stack):
        sc = Scene(SliceStack(stack), scene.maps, scene.support)
        k = simulate_smile(cfg, sc, noisy=False, mask=mask)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return recon.cg_sense(k, scene.maps, cfg=rc).slices

    return metrics.leakage(run, scene.slices)


def caipi_leakage(cfg: ExperimentConfig, scene: Scene, kernel, lam: float):
    """Noiseless slice-GRAPPA leakage with calibration from the full stack."""
    ny, nx = scene.slices.shape
    acs = calib.centered_acs((ny, nx), cfg.get("acquisition", "acs_lines"))
    _, calibs = simulate_caipi(cfg, scene, noisy=False)
    rc = recon.ReconConfig("slice_grappa", lam=lam, kernel=kernel)

    def run(stack):
        sc = Scene(SliceStack(stack), scene.maps, scene.support)
        k, _ = simulate_caipi(cfg, sc, noisy=False)
        return recon.slice_grappa(k, calibs, rc, acs=acs, maps=scene.maps).slices

    return metrics.leakage(run, scene.slices)


# --------------------------------------------------------------------------
# Kernel theory
# --------------------------------------------------------------------------

def theory_sweep(ncoils=(2, 4, 8), supports=(3, 5, 7), kernel_max: int = 8, grid: int = 32,
                 threshold: float = 1e-8, seed: int = 0):
    """Counting condition versus calibration-matrix nullspace.

    For each coil count, support ``(C_x, C_y)`` and kernel ``(E_x, E_y)``
    in ``1..kernel_max``, noiseless k-space of one dense random slice
    weighted by exactly band-limited maps is built on a ``grid x grid``
    grid, and the smallest singular-value ratio of its calibration matrix
    is compared against ``threshold``. Returns a list of row dicts.
    """
    rows = []
    content = phantom.random_content(1, (grid, grid), seed=seed)
    for nc in ncoils:
        for cx, cy in itertools.product(supports, supports):
            spec = phantom.CoilSpec(nc, (cx, cy), similarity=0.0, seed=seed)
            maps = phantom.make_coil_maps(spec, 1, (grid, grid))
            ksp = model.fft2c(maps.maps[:, 0] * content.data[0])
            for ex, ey in itertools.product(range(1, kernel_max + 1), repeat=2):
                ks = calib.KernelSizeSpec(cx, cy, nc, ex, ey)
                holds = calib.counting_bound_holds(ks)
                mat = calib.build_calibration_matrix(ksp, None, (ex, ey))
                ratio = calib.singular_ratio(mat)
                found = ratio <= threshold
                rows.append({"ncoils": nc, "cx": cx, "cy": cy, "ex": ex, "ey": ey,
                             "inequality": holds, "min_ratio": ratio, "kernel_found": found,
                             "violation": holds and not found})
    return rows


def kernel_scaling(n: int = 3, ncoils: int = 4, support=(5, 7), ex: int = 5, grid: int = 32,
                   threshold: float = 1e-6, seed: int = 0):
    """Minimal annihilating ``E_y`` on a single-slice and an ``n``-times extended grid.

    The same (slice-independent) maps weight dense random slices; on the
    extended grid the slices sit side by side, so the map repeats with
    period ``grid`` along PE. Returns ``(ey_single, ey_extended)``.
    """
    spec = phantom.CoilSpec(ncoils, support, similarity=1.0, seed=seed)
    maps = phantom.make_coil_maps(spec, n, (grid, grid))
    content = phantom.random_content(n, (grid, grid), seed=seed)
    single = model.fft2c(maps.maps[:, 0] * content.data[0])
    ext = model.assemble_extended(content, maps, n)
    extended = model.fft2c(ext.data)
    e1 = calib.minimal_kernel_extent(single, None, ex, threshold)
    en = calib.minimal_kernel_extent(extended, None, ex, threshold, max_ey=n * grid // 2)
    return e1, en


# --------------------------------------------------------------------------
# g-factor and GA fitness
# --------------------------------------------------------------------------

def column_subset(support_ext: np.ndarray, count: int) -> np.ndarray:
    """``count`` evenly spread readout columns that intersect the object."""
    cols = np.flatnonzero(np.any(support_ext, axis=0))
    if cols.size == 0:
        raise ValueError("empty object support")
    if count >= cols.size:
        return cols
    pick = np.round(np.linspace(0, cols.size - 1, count)).astype(int)
    return cols[pick]


class ColumnGFactor:
    """Pseudo-replica g-factor on selected readout columns via :class:`recon.ColumnSense`.

    Noise is drawn in the hybrid ``(coil, ky, x)`` space of the chosen
    columns (white noise stays white under the unitary readout
    transform). The solver is factorised once per mask.
    """

    def __init__(self, maps_ext: np.ndarray, support_ext: np.ndarray, columns=None,
                 lam: float = 0.0):
        self.maps = maps_ext
        nc, Y, nx = maps_ext.shape
        self.columns = np.arange(nx) if columns is None else np.asarray(columns)
        self.support = support_ext[:, self.columns]
        self.gram = recon.ColumnSense.column_gram(maps_ext, self.columns)
        self.lam = lam
        self._solvers = {}
        self._replicas = {}

    def _solver(self, keep):
        key = np.packbits(keep).tobytes()
        if key not in self._solvers:
            if len(self._solvers) > 4:
                # the full-sampling solver is needed for every mask; keep it
                full = np.packbits(np.ones_like(keep)).tobytes()
                self._solvers = {k: v for k, v in self._solvers.items() if k == full}
            self._solvers[key] = recon.ColumnSense(self.maps, keep, self.columns, self.lam,
                                                   gram=self.gram)
        return self._solvers[key]

    def __call__(self, mask, trials: int, seed: int = 0) -> metrics.GFactorMap:
        keep = np.asarray(getattr(mask, "keep", mask), dtype=bool)
        shape = (self.maps.shape[0], self.maps.shape[1], len(self.columns))

        def rec(noise, k):
            return self._solver(k).solve(noise)

        return metrics.g_factor_pseudo_replica(rec, shape, keep, trials, seed, self.support,
                                               mask_id=getattr(mask, "generator", ""),
                                               batched=True, cache=self._replicas)


class GAFitness:
    """Mean pseudo-replica g-factor over the sampled object columns (lower is better)."""

    def __init__(self, gfac: ColumnGFactor, trials: int, seed: int = 0):
        self.gfac = gfac
        self.trials = trials
        self.seed = seed

    def __call__(self, mask) -> float:
        g = self.gfac(mask, self.trials, self.seed)
        return g.mean


def extended_scene(cfg: ExperimentConfig, scene: Scene):
    """Extended-grid coil maps ``(Nc, n*Ny, Nx)`` and object support ``(n*Ny, Nx)``."""
    n = cfg.get("acquisition", "n")
    maps_ext = model.extended_maps(scene.maps, n)
    ny = scene.slices.shape[0]
    support_ext = np.zeros((n * ny, scene.slices.shape[1]), dtype=bool)
    for s, off in enumerate(model.uniform_offsets(scene.slices.mb, ny)):
        support_ext[off:off + ny] = scene.support[s]
    return maps_ext, support_ext


def scene_gfactor(cfg: ExperimentConfig, scene: Scene, columns: Optional[int] = None):
    """:class:`ColumnGFactor` on ``columns`` object columns of the extended grid."""
    maps_ext, support_ext = extended_scene(cfg, scene)
    cols = None if columns is None else column_subset(support_ext, columns)
    return ColumnGFactor(maps_ext, support_ext, cols)


def full_gfactor_map(cfg: ExperimentConfig, scene: Scene, mask, trials: int,
                     chunk: int = 16) -> np.ndarray:
    """Pseudo-replica g-factor over the whole extended FOV, computed in
    blocks of ``chunk`` readout columns to bound memory. ``nan`` outside
    the object."""
    maps_ext, support_ext = extended_scene(cfg, scene)
    nx = maps_ext.shape[-1]
    out = np.full(maps_ext.shape[1:], np.nan)
    for c0 in range(0, nx, chunk):
        cols = np.arange(c0, min(c0 + chunk, nx))
        if not support_ext[:, cols].any():
            continue
        part = ColumnGFactor(maps_ext, support_ext, cols)
        out[:, cols] = part(mask, trials, cfg.seed).values
    return out


def mask_family(n_pe: int, R: float, seed: int = 0, center_slope: float = 0.5) -> dict:
    """Reference masks of one acceleration: uniform (integer R), Poisson, CAVA, random."""
    out = {}
    if float(R).is_integer() and sampling.uniform_mask(n_pe, int(R)).count == sampling.sample_budget(n_pe, R):
        out["uniform"] = sampling.uniform_mask(n_pe, int(R))
    out["poisson"] = sampling.poisson_mask(n_pe, R, seed=seed)
    out["cava"] = sampling.cava_mask(n_pe, R, seed=seed, center_slope=center_slope)
    out["random"] = sampling.random_mask(n_pe, R, seed=seed)
    return out


def run_ga(cfg: ExperimentConfig, gfac: ColumnGFactor, n_pe: int, R: float, progress=None,
           population: Optional[int] = None, generations: Optional[int] = None):
    """Fixed-budget GA over masks, seeded with the reference families."""
    s = cfg["sampling"]
    gcfg = sampling.GAConfig(population=population or s["ga_population"],
                             generations=generations or s["ga_generations"],
                             fitness_trials=s["ga_trials"], seed=cfg.seed)
    seeds = sampling.seed_population(n_pe, R, gcfg.population, seed=cfg.seed)
    fitness = GAFitness(gfac, gcfg.fitness_trials, cfg.seed)
    workers = worker_count()
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as pool:
            return sampling.ga_optimize(gcfg, fitness, seeds, map_fn=pool.map, progress=progress), seeds
    return sampling.ga_optimize(gcfg, fitness, seeds, progress=progress), seeds


# --------------------------------------------------------------------------
# SMILE versus CAIPI
# --------------------------------------------------------------------------

@dataclass
class MethodOutcome:
    name: str
    result: Optional[recon.ReconResult]
    report: Optional[metrics.MetricsReport]
    error: Optional[str] = None


def _report(name, scene, res, settings, leak=None):
    ref = scene.slices.data
    sup = scene.support
    per_ser = [metrics.ser(ref[s], res.slices.data[s], sup[s]) for s in range(scene.slices.mb)]
    per_ssim = [metrics.ssim(ref[s], res.slices.data[s], sup[s]) for s in range(scene.slices.mb)]
    return metrics.MetricsReport(name, per_ser, metrics.ser(ref, res.slices.data, sup), per_ssim,
                                 leakage=leak, runtime=res.wall_time, settings=settings)


def compare_methods(cfg: ExperimentConfig, scene: Scene, smile_k: KSpaceData,
                    caipi_k: KSpaceData, calibs, with_leakage: bool = True) -> dict:
    """Reconstruct both acquisitions and score them against the phantom.

    Returns ``{"smile": MethodOutcome, "caipi": MethodOutcome,
    "leakage": {...}}``. A failing method is recorded, not raised.
    """
    budget_smile = int(np.count_nonzero(smile_k.mask))
    budget_caipi = int(np.count_nonzero(caipi_k.mask))
    if budget_smile != budget_caipi:
        raise ValueError(f"PE-line budgets differ: SMILE {budget_smile}, CAIPI {budget_caipi}")
    out = {"budget": budget_smile, "leakage": {}}
    try:
        res, lam, _ = run_smile(cfg, smile_k, scene)
        leak = smile_leakage(cfg, scene, full=False) if with_leakage else None
        out["smile"] = MethodOutcome("smile_cg_sense", res, _report(
            "smile_cg_sense", scene, res, {"lam": lam, "iterations": res.iterations}, leak))
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        out["smile"] = MethodOutcome("smile_cg_sense", None, None, str(exc))
    try:
        res, kernel, lam, _ = run_caipi(cfg, caipi_k, calibs, scene)
        leak = caipi_leakage(cfg, scene, kernel, lam) if with_leakage else None
        out["caipi"] = MethodOutcome("caipi_slice_grappa", res, _report(
            "caipi_slice_grappa", scene, res,
            {"kernel": f"{kernel[0]}x{kernel[1]}", "lam": lam,
             "R_in": res.flags.get("R_in")}, leak))
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        out["caipi"] = MethodOutcome("caipi_slice_grappa", None, None, str(exc))
    if with_leakage:
        out["leakage"]["smile_full"] = smile_leakage(cfg, scene, full=True)
    return out
