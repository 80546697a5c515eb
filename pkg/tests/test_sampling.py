import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from smile import experiments as X
from smile import sampling as S


def test_uniform_examples():
    assert list(S.uniform_mask(12, 3).indices) == [0, 3, 6, 9]
    assert list(S.uniform_mask(12, 4, offset=1).indices) == [1, 5, 9]
    assert S.uniform_mask(12, 1).keep.all()
    with pytest.raises(ValueError):
        S.uniform_mask(12, 4, offset=4)
    with pytest.raises(ValueError):
        S.uniform_mask(12, 13)


def test_budget_rounding():
    assert S.sample_budget(384, 6) == 64
    assert S.sample_budget(10, 4) == 2           # 2.5 rounds down
    assert S.sample_budget(11, 4) == 3           # 2.75 rounds up
    assert S.sample_budget(5, 100) == 1


def test_cava_frames_budget_and_uniqueness():
    for f in range(8):
        idx = S.cava_indices(16, 4, frame=f)
        assert len(idx) == 4
        assert len(set(idx)) == 4
        assert S.cava_mask(16, 4, frame=f).count == 4


def golden_oracle(n_pe, R, frame, center_slope):
    """Hand evaluation of the documented golden-ratio index rule (seed 0)."""
    g = (math.sqrt(5) - 1) / 2
    budget = S.sample_budget(n_pe, R)
    out = []
    t = frame * budget
    while len(out) < budget:
        u = (t * g) % 1.0
        v = 2 * u - 1
        w = 0.5 + 0.5 * v * (center_slope + (1 - center_slope) * abs(v))
        i = min(int(math.floor(w * n_pe)), n_pe - 1)
        t += 1
        if i in out:
            continue
        out.append(i)
    return out


@pytest.mark.parametrize("frame", range(4))
def test_cava_matches_hand_evaluated_rule(frame):
    idx = S.cava_indices(16, 4, frame=frame, center_slope=1.0)
    assert list(idx) == golden_oracle(16, 4, frame, 1.0)


def test_cava_union_covers_grid_and_is_deterministic():
    frames = S.cava_frames(48, 6, 60)
    assert frames.keep.shape == (60, 48)
    assert frames.keep.any(axis=0).all()
    assert np.array_equal(S.cava_mask(48, 6, frame=3, seed=2).keep,
                          S.cava_mask(48, 6, frame=3, seed=2).keep)


def test_cava_centre_dense():
    m = S.cava_mask(384, 6, center_slope=0.5)
    centre = m.keep[144:240].sum()
    edge = m.keep[:96].sum()
    assert centre > edge


def test_poisson_and_random():
    assert S.poisson_mask(16, 1).keep.all()
    assert S.random_mask(16, 1).keep.all()
    for seed in range(20):
        idx = S.poisson_mask(16, 4, seed=seed).indices
        assert len(idx) == 4
        assert np.all(np.diff(idx) >= 2)
    assert np.array_equal(S.random_mask(64, 4, seed=3).keep, S.random_mask(64, 4, seed=3).keep)


def test_psf_full_mask_is_delta():
    psf = S.mask_psf(np.ones(32, bool))
    assert_allclose(abs(psf[16]), 1.0)
    assert np.abs(np.delete(psf, 16)).max() < 1e-12
    assert S.psf_peaks(psf) == []


@pytest.mark.parametrize("n_pe,R", [(64, 4), (384, 4), (384, 6), (96, 3)])
def test_uniform_psf_is_dirac_comb(n_pe, R):
    psf = S.mask_psf(S.uniform_mask(n_pe, R, offset=1))
    mag = np.abs(psf)
    peaks = np.flatnonzero(mag > 1e-9)
    assert len(peaks) == R
    assert np.all(np.diff(peaks) == n_pe // R)
    assert_allclose(mag[peaks], 1.0)
    assert len(S.psf_peaks(psf)) == R - 1


@settings(max_examples=40, deadline=None)
@given(n_pe=st.integers(8, 200), R=st.floats(1.0, 8.0), seed=st.integers(0, 10_000))
def test_generators_hit_budget(n_pe, R, seed):
    budget = S.sample_budget(n_pe, R)
    for m in (S.cava_mask(n_pe, R, seed=seed), S.random_mask(n_pe, R, seed=seed)):
        assert m.count == budget
    # Poisson enforces a minimum gap, so it can only fall short on tiny grids
    assert S.poisson_mask(n_pe, R, seed=seed).count == budget or budget * 2 > n_pe


def test_mask_file_roundtrip(tmp_path):
    m = S.cava_mask(96, 4, seed=7)
    S.write_mask(tmp_path / "m.txt", m)
    back = S.read_mask(tmp_path / "m.txt")
    assert np.array_equal(back.keep, m.keep)
    assert back.R == 4 and back.generator == "cava" and back.params["seed"] == 7


def spread_fitness(mask):
    # prefers evenly spread lines: largest circular gap
    idx = mask.indices
    gaps = np.diff(np.concatenate((idx, [idx[0] + mask.n_pe])))
    return float(gaps.max()) + 1e-3 * float(idx.sum() % 7)


def test_ga_zero_generations_is_best_seed():
    seeds = S.seed_population(60, 5, 10)
    res = S.ga_optimize(S.GAConfig(population=10, generations=1, seed=1), spread_fitness, seeds)
    assert res.trace[0] == min(res.seed_fitness)
    assert res.best_fitness <= min(res.seed_fitness)


def test_ga_elitism_and_budget():
    seeds = [S.random_mask(60, 5, seed=k) for k in range(12)]
    res = S.ga_optimize(S.GAConfig(population=12, generations=50, seed=3), spread_fitness, seeds)
    assert all(b <= a for a, b in zip(res.trace, res.trace[1:]))
    assert res.best.count == 12
    assert res.best_fitness <= min(res.seed_fitness)
    again = S.ga_optimize(S.GAConfig(population=12, generations=50, seed=3), spread_fitness, seeds)
    assert np.array_equal(again.best.keep, res.best.keep)


def test_ga_rejects_mixed_budgets_and_dead_fitness():
    with pytest.raises(ValueError):
        S.ga_optimize(S.GAConfig(population=4, generations=1),
                      spread_fitness, [S.random_mask(60, 5), S.random_mask(60, 4)])
    with pytest.raises(RuntimeError):
        S.ga_optimize(S.GAConfig(population=4, generations=1), lambda m: math.nan,
                      [S.random_mask(60, 5, seed=k) for k in range(4)])


def test_seed_population_order():
    seeds = S.seed_population(384, 6, 20)
    assert [s.generator for s in seeds[:6]] == ["uniform"] * 6
    assert {s.count for s in seeds} == {64}
    assert len({s.key() for s in seeds}) == 20


def test_ga_beats_uniform_with_near_identical_maps():
    cfg = X.ExperimentConfig({"phantom": {"nx": 32, "ny": 32},
                              "coils": {"similarity": 0.9},
                              "acquisition": {"R": 3.0}})
    scene = X.make_scene(cfg)
    gfac = X.scene_gfactor(cfg, scene, 8)
    res, seeds = X.run_ga(cfg, gfac, 96, 3, population=12, generations=8)
    uniform = X.GAFitness(gfac, 16, cfg.seed)(S.uniform_mask(96, 3))
    assert res.best_fitness < uniform
    assert not any(np.array_equal(res.best.keep, S.uniform_mask(96, 3, o).keep) for o in range(3))
