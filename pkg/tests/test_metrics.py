import numpy as np
import pytest
from numpy.testing import assert_allclose

from smile import experiments as X
from smile import metrics, phantom, sampling


@pytest.fixture(scope="module")
def ref():
    return np.abs(phantom.make_phantom(phantom.PhantomSpec(128, 128, 1)).data[0])


def test_ser_examples(ref, rng):
    assert metrics.ser(ref, ref) == metrics.SER_CAP_DB
    assert_allclose(metrics.ser(ref, np.zeros_like(ref)), 0.0, atol=1e-12)
    # positive reference so the magnitude of ref + e is ref + e itself
    base = ref + 1.0
    e = rng.standard_normal(ref.shape)
    e *= np.linalg.norm(base) / 10 / np.linalg.norm(e)
    assert np.all(base + e > 0)
    assert_allclose(metrics.ser(base, base + e), 20.0, atol=1e-9)
    with pytest.raises(ValueError):
        metrics.ser(np.zeros(4), np.ones(4))
    with pytest.raises(ValueError):
        metrics.ser(np.ones(4), np.ones(5))


def test_ser_support():
    ref = np.array([1.0, 1.0, 0.0])
    rec = np.array([1.0, 1.0, 5.0])
    assert metrics.ser(ref, rec, np.array([True, True, False])) == metrics.SER_CAP_DB


def test_ssim_identical_and_inverted(ref):
    assert_allclose(metrics.ssim(ref, ref), 1.0)
    assert metrics.ssim(ref, 1 - ref) < 0.5


def test_ssim_constant_shift_components(ref):
    lum, cs, _ = metrics.ssim_components(ref, ref + 0.2)
    assert lum.min() < 1.0
    assert np.all(lum <= 1.0 + 1e-12)
    assert_allclose(cs, 1.0, atol=1e-12)


def test_ssim_matches_skimage(ref, rng):
    from skimage.metrics import structural_similarity
    noisy = np.clip(ref + 0.05 * rng.standard_normal(ref.shape), 0, None)
    _, _, smap = metrics.ssim_components(ref, noisy)
    _, full = structural_similarity(ref, noisy, win_size=7, data_range=1.0,
                                    use_sample_covariance=False, full=True)
    # skimage averages only the interior, 3 pixels in from each edge
    assert_allclose(smap[3:-3, 3:-3], full[3:-3, 3:-3], atol=1e-10)


def test_ssim_stack_and_window_errors(ref):
    stack = np.stack([ref, ref])
    assert_allclose(metrics.ssim(stack, stack), 1.0)
    with pytest.raises(ValueError):
        metrics.ssim(np.ones((4, 4)), np.ones((4, 4)))


def test_error_map(rng):
    a = rng.standard_normal((4, 4))
    err, meta = metrics.error_map(a, a, scale=3.5)
    assert np.all(err == 0) and meta["scale"] == 3.5
    ref = np.array([3.0, 4.0])
    rec = np.array([3.0, 3.0])
    err, _ = metrics.error_map(ref, rec)
    assert_allclose(20 * np.log10(np.linalg.norm(ref) / np.linalg.norm(err)),
                    metrics.ser(ref, rec))


def test_leakage_identity_and_mb1(rng):
    x = rng.standard_normal((3, 8, 8))
    L = metrics.leakage(lambda s: s, x)
    assert_allclose(L, np.eye(3))
    assert_allclose(metrics.leakage(lambda s: s, x[:1]), [[1.0]])
    mix = lambda s: s + 0.1 * np.roll(s, 1, axis=0)
    L = metrics.leakage(mix, np.ones((3, 4, 4)))
    assert_allclose(L[0, 1], 0.1)


def identity_recon(noise, keep):
    return noise * keep[:, None]


def test_gfactor_r1_is_one():
    g = metrics.g_factor_pseudo_replica(lambda n, k: n, (4, 16, 8), np.ones(16, bool), trials=64)
    assert_allclose(g.values, 1.0)
    assert g.trials == 64 and g.R == 1


def test_gfactor_drops_failures_and_marks_singular():
    calls = {"n": 0}

    def flaky(noise, keep):
        calls["n"] += 1
        if calls["n"] % 7 == 0:
            raise ValueError("boom")
        return noise[0]

    g = metrics.g_factor_pseudo_replica(flaky, (2, 8, 4), np.ones(8, bool), trials=16)
    assert g.dropped > 0 and g.trials == 16 - g.dropped

    def broken(noise, keep):
        if not keep.all():
            return np.full(noise.shape[-2:], np.inf)
        return noise[0]

    half = np.zeros(8, bool)
    half[::2] = True
    g = metrics.g_factor_pseudo_replica(broken, (2, 8, 4), half, trials=8)
    assert np.isinf(g.mean)
    with pytest.raises(ValueError):
        metrics.g_factor_pseudo_replica(broken, (2, 8, 4), half, trials=1)


@pytest.fixture(scope="module")
def small_gfac():
    cfg = X.ExperimentConfig({"phantom": {"nx": 32, "ny": 32}})
    sc = X.make_scene(cfg)
    return X.scene_gfactor(cfg, sc, 8)


def test_gfactor_column_r1_and_batched_consistency(small_gfac):
    full = sampling.uniform_mask(96, 1)
    g = small_gfac(full, 64)
    assert 0.9 <= g.mean <= 1.1
    assert_allclose(g.values[~np.isnan(g.values)], 1.0, rtol=1e-10)
    mask = sampling.cava_mask(96, 3)
    a = small_gfac(mask, 16, seed=3)
    b = small_gfac(mask, 16, seed=3)
    assert np.array_equal(a.values, b.values, equal_nan=True)


def test_gfactor_trial_doubling_stable(small_gfac):
    mask = sampling.uniform_mask(96, 3)
    g32 = small_gfac(mask, 32).mean
    g64 = small_gfac(mask, 64).mean
    assert abs(g64 - g32) / g64 < 0.10


def test_gfactor_worst_case_ordering_with_near_identical_maps():
    cfg = X.ExperimentConfig({"phantom": {"nx": 32, "ny": 32}, "coils": {"similarity": 0.9}})
    gfac = X.scene_gfactor(cfg, X.make_scene(cfg), 8)
    uni = gfac(sampling.uniform_mask(96, 3), 32).mean
    cava = gfac(sampling.cava_mask(96, 3, center_slope=1.0), 32).mean
    assert uni > cava


def test_report_serialisation():
    rep = metrics.MetricsReport("m", [10.0, 20.0], 15.0, [0.5, 0.7], leakage=np.eye(2),
                                runtime=3.0, settings={"lam": 0.1})
    text = rep.to_csv()
    assert text.splitlines()[0] == "method,slice,ser_db,ssim"
    assert "m,all,15.000000,0.600000" in text
    s = rep.summary()
    assert "lam = 0.1" in s and "3.0" not in s
