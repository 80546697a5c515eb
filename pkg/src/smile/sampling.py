"""Phase-encoding sampling masks, point spread functions and a fixed-budget
genetic algorithm for mask design."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .model import ifftc

__all__ = [
    "SamplingMask",
    "GAConfig",
    "GAResult",
    "sample_budget",
    "uniform_mask",
    "cava_indices",
    "cava_mask",
    "cava_frames",
    "poisson_mask",
    "random_mask",
    "mask_psf",
    "psf_peaks",
    "ga_optimize",
    "seed_population",
    "write_mask",
    "read_mask",
]

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def sample_budget(n_pe: int, R: float) -> int:
    """Number of lines for acceleration ``R``: ``N/R`` rounded, exact halves down."""
    return max(1, int(math.ceil(n_pe / R - 0.5)))


@dataclass
class SamplingMask:
    """Boolean PE-line selection (``(N_PE,)`` or ``(frames, N_PE)``)."""

    keep: np.ndarray
    R: float
    generator: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.keep = np.asarray(self.keep, dtype=bool)
        if self.keep.ndim not in (1, 2):
            raise ValueError("mask must be 1D (PE) or 2D (frame, PE)")
        counts = self.keep.reshape(-1, self.keep.shape[-1]).sum(axis=1)
        if np.any(counts < 1):
            raise ValueError("every frame needs at least one sampled line")

    @property
    def n_pe(self) -> int:
        return self.keep.shape[-1]

    @property
    def count(self) -> int:
        return int(self.keep.sum())

    @property
    def indices(self) -> np.ndarray:
        if self.keep.ndim != 1:
            raise ValueError("indices are defined for single-frame masks")
        return np.flatnonzero(self.keep)

    @property
    def actual_R(self) -> float:
        return self.keep.size / self.keep.sum()

    def frame(self, f: int) -> "SamplingMask":
        if self.keep.ndim == 1:
            return self
        return SamplingMask(self.keep[f], self.R, self.generator, dict(self.params, frame=f))

    def key(self) -> bytes:
        return np.packbits(self.keep).tobytes()


# --------------------------------------------------------------------------
# Generators
# --------------------------------------------------------------------------

def uniform_mask(n_pe: int, R: int, offset: int = 0) -> SamplingMask:
    """Keep lines ``offset, offset + R, offset + 2R, ...``."""
    R = int(R)
    if not 1 <= R <= n_pe:
        raise ValueError(f"R must lie in [1, {n_pe}]")
    if not 0 <= offset < R:
        raise ValueError("offset must satisfy 0 <= offset < R")
    keep = np.zeros(n_pe, dtype=bool)
    keep[offset::R] = True
    return SamplingMask(keep, R, "uniform", {"offset": int(offset)})


def _warp(u, center_slope):
    # monotone map of [0, 1) onto itself, slope ``center_slope`` at 1/2 and
    # ``2 - center_slope`` at the edges: density ~ 1/slope
    v = 2.0 * u - 1.0
    return 0.5 + 0.5 * v * (center_slope + (1.0 - center_slope) * np.abs(v))


def _cava_start(seed: int) -> float:
    return 0.0 if seed == 0 else float(np.random.default_rng(seed).random())


def cava_indices(n_pe: int, R: float, frame: int = 0, seed: int = 0,
                 center_slope: float = 0.5) -> list:
    """Golden-ratio variable-density PE indices for one frame, in order.

    Sample ``t = frame * B + j`` (``B`` the per-frame budget) has golden
    position ``u_t = frac(u_0 + t * (sqrt(5) - 1) / 2)``, where ``u_0`` is
    0 for seed 0 and otherwise drawn from the seed. ``u_t`` goes through
    the centre-dense warp
    ``w(u) = 1/2 + v * (a + (1 - a) * |v|) / 2`` with ``v = 2u - 1`` and
    ``a = center_slope``, and the line is ``floor(w * N_PE)``. A line
    already used in the frame moves to the nearest free line, probing
    ``+1, -1, +2, -2, ...``.
    """
    if not 1 <= R <= n_pe:
        raise ValueError(f"R must lie in [1, {n_pe}]")
    if not 0 < center_slope <= 1:
        raise ValueError("center_slope must lie in (0, 1]")
    budget = sample_budget(n_pe, R)
    u0 = _cava_start(seed)
    taken = np.zeros(n_pe, dtype=bool)
    order = []
    for j in range(budget):
        t = frame * budget + j
        u = (u0 + t * GOLDEN) % 1.0
        idx = min(int(math.floor(_warp(u, center_slope) * n_pe)), n_pe - 1)
        step = 0
        while taken[idx]:
            step += 1
            cand = idx + (step + 1) // 2 * (1 if step % 2 else -1)
            if 0 <= cand < n_pe and not taken[cand]:
                idx = cand
                break
        taken[idx] = True
        order.append(idx)
    return order


def cava_mask(n_pe: int, R: float, frame: int = 0, seed: int = 0,
              center_slope: float = 0.5) -> SamplingMask:
    """Single-frame CAVA-style mask; see :func:`cava_indices`."""
    keep = np.zeros(n_pe, dtype=bool)
    keep[cava_indices(n_pe, R, frame, seed, center_slope)] = True
    return SamplingMask(keep, R, "cava",
                        {"frame": frame, "seed": seed, "center_slope": center_slope})


def cava_frames(n_pe: int, R: float, frames: int, seed: int = 0,
                center_slope: float = 0.5) -> SamplingMask:
    keep = np.stack([cava_mask(n_pe, R, f, seed, center_slope).keep for f in range(frames)])
    return SamplingMask(keep, R, "cava", {"frames": frames, "seed": seed,
                                          "center_slope": center_slope})


def poisson_mask(n_pe: int, R: float, seed: int = 0) -> SamplingMask:
    """Uniform-density 1D Poisson-disc mask with minimum gap ``floor(R/2)``.

    The circular gaps are ``gap + extra_i`` where the surplus
    ``N - B * gap`` is split uniformly at random over the ``B`` gaps
    (stars and bars), then the pattern is rotated by a random start. Every
    admissible gap sequence is equally likely. If the budget cannot honour
    the gap, the largest feasible gap is used and flagged in ``params``.
    """
    if not 1 <= R <= n_pe:
        raise ValueError(f"R must lie in [1, {n_pe}]")
    rng = np.random.default_rng(seed)
    budget = sample_budget(n_pe, R)
    gap = max(int(R // 2), 1)
    params = {"seed": seed, "min_gap": gap}
    if budget * gap > n_pe:
        gap = n_pe // budget
        params.update(min_gap=gap, gap_fallback=True)
    surplus = n_pe - budget * gap
    if budget == 1:
        extras = np.array([surplus])
    else:
        cuts = np.sort(rng.choice(surplus + budget - 1, budget - 1, replace=False))
        bounds = np.concatenate(([-1], cuts, [surplus + budget - 1]))
        extras = np.diff(bounds) - 1
    gaps = gap + extras
    start = int(rng.integers(n_pe))
    pos = (start + np.concatenate(([0], np.cumsum(gaps)[:-1]))) % n_pe
    keep = np.zeros(n_pe, dtype=bool)
    keep[pos] = True
    return SamplingMask(keep, R, "poisson", params)


def random_mask(n_pe: int, R: float, seed: int = 0) -> SamplingMask:
    if not 1 <= R <= n_pe:
        raise ValueError(f"R must lie in [1, {n_pe}]")
    rng = np.random.default_rng(seed)
    keep = np.zeros(n_pe, dtype=bool)
    keep[rng.choice(n_pe, sample_budget(n_pe, R), replace=False)] = True
    return SamplingMask(keep, R, "random", {"seed": seed})


# --------------------------------------------------------------------------
# Point spread function
# --------------------------------------------------------------------------

def mask_psf(mask) -> np.ndarray:
    """Centered inverse DFT of the 0/1 mask, scaled so the main lobe is 1.

    The main lobe sits at index ``N // 2``. Multi-frame masks give one PSF
    per frame.
    """
    keep = np.asarray(getattr(mask, "keep", mask), dtype=float)
    psf = ifftc(keep, axis=-1)
    centre = psf[..., keep.shape[-1] // 2]
    return psf / centre[..., None] if psf.ndim > 1 else psf / centre


def psf_peaks(psf, threshold: float = 0.1, min_separation: int = 3) -> list:
    """Side lobes of a PSF: circular local maxima of ``|psf|`` above
    ``threshold`` (relative to the main lobe), thinned so no two kept peaks
    are closer than ``min_separation`` bins. The main lobe is excluded.

    Returns ``(index, amplitude)`` pairs, strongest first.
    """
    mag = np.abs(np.asarray(psf))
    n = mag.size
    centre = n // 2
    main = mag[centre]
    rel = mag / main
    local_max = (rel >= np.roll(rel, 1)) & (rel >= np.roll(rel, -1)) & (rel > threshold)
    candidates = sorted(np.flatnonzero(local_max), key=lambda i: -rel[i])
    kept = [centre]
    for i in candidates:
        d = [min(abs(i - k), n - abs(i - k)) for k in kept]
        if min(d) >= min_separation:
            kept.append(int(i))
    return [(i, float(rel[i])) for i in kept[1:]]


# --------------------------------------------------------------------------
# Genetic algorithm
# --------------------------------------------------------------------------

@dataclass
class GAConfig:
    population: int = 50
    generations: int = 50
    mutation_rate: float = 0.02
    crossover_rate: float = 0.9
    elitism_count: int = 2
    tournament: int = 3
    fitness_trials: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.population < 4:
            raise ValueError("population must be >= 4")
        if self.generations < 1:
            raise ValueError("generations must be >= 1")
        if not 1 <= self.elitism_count < self.population:
            raise ValueError("elitism_count must lie in [1, population)")
        if not 0 <= self.mutation_rate <= 1 or not 0 <= self.crossover_rate <= 1:
            raise ValueError("rates must lie in [0, 1]")


@dataclass
class GAResult:
    best: SamplingMask
    best_fitness: float
    trace: list
    evaluations: int
    seed_fitness: list


def seed_population(n_pe: int, R: float, size: int, seed: int = 0) -> list:
    """Initial GA individuals: uniform (every offset), Poisson, CAVA frames and
    random masks, in that order, ``size`` in total.

    Uniform masks are only included when ``R`` is an integer whose lattice
    meets the exact budget.
    """
    budget = sample_budget(n_pe, R)
    out, seen = [], set()

    def add(m):
        if len(out) < size and m.count == budget and m.key() not in seen:
            seen.add(m.key())
            out.append(m)

    if float(R).is_integer():
        for off in range(int(R)):
            add(uniform_mask(n_pe, int(R), off))
    n_each = max(1, (size - len(out)) // 3)
    for k in range(n_each):
        add(poisson_mask(n_pe, R, seed=seed * 1000 + k))
    for k in range(n_each):
        add(cava_mask(n_pe, R, frame=k, seed=seed))
    k = 0
    while len(out) < size:
        add(random_mask(n_pe, R, seed=seed * 1000 + k))
        k += 1
    return out


def _repair(keep, budget, rng):
    idx = np.flatnonzero(keep)
    if idx.size > budget:
        keep[rng.choice(idx, idx.size - budget, replace=False)] = False
    elif idx.size < budget:
        free = np.flatnonzero(~keep)
        keep[rng.choice(free, budget - idx.size, replace=False)] = True
    return keep


def _crossover(a, b, rng):
    # one-point crossover in PE-index space: a's lines below the cut, b's above
    cut = int(rng.integers(1, a.size))
    child = np.concatenate((a[:cut], b[cut:]))
    return child


def _mutate(keep, rate, rng):
    idx = np.flatnonzero(keep)
    for i in idx[rng.random(idx.size) < rate]:
        free = np.flatnonzero(~keep)
        if free.size == 0:
            break
        j = free[rng.integers(free.size)]
        keep[i], keep[j] = False, True
    return keep


def ga_optimize(cfg: GAConfig, fitness: Callable[[SamplingMask], float],
                seeds: Sequence[SamplingMask], map_fn: Optional[Callable] = None,
                progress: Optional[Callable[[int, float], None]] = None) -> GAResult:
    """Minimise ``fitness`` over masks with the seeds' exact line budget.

    Ranking is by fitness, ties by lexicographic mask order; non-finite
    fitness ranks last. The ``elitism_count`` best survive unchanged, so the
    best fitness per generation never increases. Children come from
    tournament selection, one-point crossover in index space, per-line swap
    mutation and random add/remove repair back to the budget. ``map_fn``
    (e.g. ``executor.map``) may evaluate a generation in parallel; results
    are matched by position, not completion order.
    """
    seeds = list(seeds)
    if not seeds:
        raise ValueError("at least one seed mask is required")
    n_pe = seeds[0].n_pe
    budget = seeds[0].count
    R = seeds[0].R
    if any(s.n_pe != n_pe or s.count != budget for s in seeds):
        raise ValueError("all seed masks must share N_PE and line budget")
    rng = np.random.default_rng(cfg.seed)
    map_fn = map_fn or map
    cache = {}
    n_eval = 0

    def evaluate(keeps):
        nonlocal n_eval
        todo = []
        for k in keeps:
            key = np.packbits(k).tobytes()
            if key not in cache and key not in todo:
                todo.append(key)
        masks = [SamplingMask(np.unpackbits(np.frombuffer(key, np.uint8))[:n_pe].astype(bool),
                              R, "ga", {"seed": cfg.seed}) for key in todo]
        for key, val in zip(todo, map_fn(fitness, masks)):
            val = float(val)
            cache[key] = val if math.isfinite(val) else math.inf
        n_eval += len(todo)
        return [cache[np.packbits(k).tobytes()] for k in keeps]

    def rank(keeps, fits):
        order = sorted(range(len(keeps)),
                       key=lambda i: (fits[i], tuple(np.packbits(keeps[i]))))
        return [keeps[i] for i in order], [fits[i] for i in order]

    pop = [s.keep.copy() for s in seeds[: cfg.population]]
    seed_fit = evaluate([s.keep for s in seeds])
    if not any(math.isfinite(f) for f in seed_fit):
        raise RuntimeError("fitness is non-finite on every seed mask")
    while len(pop) < cfg.population:
        pop.append(_repair(np.zeros(n_pe, dtype=bool), budget, rng))
    fits = evaluate(pop)
    pop, fits = rank(pop, fits)
    trace = [fits[0]]

    def pick():
        contenders = rng.choice(len(pop), size=min(cfg.tournament, len(pop)), replace=False)
        return pop[int(min(contenders))]      # pop is sorted: lower index is fitter

    for gen in range(cfg.generations):
        children = []
        while len(children) < cfg.population - cfg.elitism_count:
            a, b = pick(), pick()
            child = _crossover(a, b, rng) if rng.random() < cfg.crossover_rate else a.copy()
            child = _repair(child, budget, rng)
            child = _mutate(child, cfg.mutation_rate, rng)
            assert child.sum() == budget
            children.append(child)
        child_fits = evaluate(children)
        if not any(math.isfinite(f) for f in child_fits) and not math.isfinite(fits[0]):
            raise RuntimeError(f"generation {gen + 1}: fitness non-finite for every individual")
        pop, fits = rank(pop[: cfg.elitism_count] + children,
                         fits[: cfg.elitism_count] + child_fits)
        trace.append(fits[0])
        if progress is not None:
            progress(gen + 1, fits[0])

    best = SamplingMask(pop[0].copy(), R, "ga", {"seed": cfg.seed})
    return GAResult(best, fits[0], trace, n_eval, seed_fit)


# --------------------------------------------------------------------------
# Text format
# --------------------------------------------------------------------------

def write_mask(path, mask: SamplingMask) -> None:
    """One line per frame of 0/1 characters after a ``#`` header line."""
    from .io import atomic_write_text
    seed = mask.params.get("seed", "")
    header = f"# N_PE={mask.n_pe} R={mask.R:g} generator={mask.generator} seed={seed}"
    rows = np.atleast_2d(mask.keep)
    body = "\n".join("".join("1" if v else "0" for v in row) for row in rows)
    atomic_write_text(path, header + "\n" + body + "\n")


def read_mask(path) -> SamplingMask:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("#"):
        raise ValueError(f"{path}: missing mask header")
    fields = dict(tok.split("=", 1) for tok in lines[0][1:].split())
    rows = np.array([[c == "1" for c in ln] for ln in lines[1:]], dtype=bool)
    if rows.shape[1] != int(fields["N_PE"]):
        raise ValueError(f"{path}: row length does not match N_PE")
    keep = rows[0] if rows.shape[0] == 1 else rows
    params = {"seed": int(fields["seed"])} if fields.get("seed") else {}
    return SamplingMask(keep, float(fields["R"]), fields["generator"], params)
