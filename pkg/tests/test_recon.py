import warnings

import numpy as np
import pytest
from numpy.testing import assert_allclose

from smile import calib, model, phantom, recon, sampling
from smile.model import CoilMapSet, KSpaceData, SliceStack
from smile.recon import ReconConfig


def scene(mb=3, ny=32, nx=32, ncoils=8, support=(5, 5), seed=0, similarity=0.5):
    x = phantom.make_phantom(phantom.PhantomSpec(nx, ny, mb, seed=seed))
    maps = phantom.make_coil_maps(phantom.CoilSpec(ncoils, support, similarity, seed), mb, (ny, nx))
    return x, maps


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_config_validation():
    with pytest.raises(ValueError):
        ReconConfig(method="magic")
    with pytest.raises(ValueError):
        ReconConfig(lam=-1)
    with pytest.raises(ValueError):
        ReconConfig(kernel=(0, 3))


def test_cg_full_sampling_exact():
    x, maps = scene()
    ext = model.assemble_extended(x, maps, 3)
    k = model.smile_forward(ext)
    res = recon.cg_sense(k, maps, cfg=ReconConfig(cg_tolerance=1e-12))
    for s in range(3):
        assert rel(res.slices.data[s], x.data[s]) <= 1e-6
    assert res.converged


def brute_sense_r2(coil_k, maps, keep):
    """Pixel-wise 2-alias SENSE unfolding of uniform R=2 single-slice data."""
    nc, ny, nx = coil_k.shape
    alias = model.ifft2c(coil_k * keep[None, :, None])
    out = np.zeros((ny, nx), complex)
    h = ny // 2
    for y in range(h):
        for xx in range(nx):
            # zero-filled R=2 image: (x[y] + sign * x[y+h]) / 2 with sign from the lattice offset
            S = np.stack([maps[:, y, xx], maps[:, y + h, xx]], axis=1) / 2
            sign = 1 if keep[0] else -1
            S[:, 1] *= sign
            sol = np.linalg.lstsq(S, alias[:, y, xx], rcond=None)[0]
            out[y, xx] = sol[0]
            out[y + h, xx] = sol[1]
    return out


def test_cg_matches_pixelwise_sense():
    x, maps = scene(mb=1)
    keep = sampling.uniform_mask(32, 2).keep
    coil_k = model.fft2c(maps.maps[:, 0] * x.data[0])
    brute = brute_sense_r2(coil_k, maps.maps[:, 0], keep)
    assert rel(brute, x.data[0]) < 1e-10
    k = KSpaceData(coil_k * keep[None, :, None], mask=keep)
    res = recon.cg_sense(k, maps, cfg=ReconConfig(cg_tolerance=1e-13, max_iters=500))
    assert np.abs(res.slices.data[0] - brute).max() <= 1e-8 * np.abs(brute).max()


def test_column_sense_matches_cg():
    x, maps = scene()
    keep = sampling.uniform_mask(96, 2, 1).keep
    ext = model.assemble_extended(x, maps, 3)
    k = model.smile_forward(ext, keep)
    res = recon.cg_sense(k, maps, cfg=ReconConfig(cg_tolerance=1e-13, max_iters=500))
    hybrid = model.ifftc(k.data, axis=-1)
    cs = recon.ColumnSense(model.extended_maps(maps, 3), keep)
    direct = cs.solve(hybrid)
    assert np.abs(direct - res.extended).max() <= 1e-8 * np.abs(direct).max()


def test_large_lambda_shrinks_to_zero():
    x, maps = scene(mb=2)
    k = model.smile_forward(model.assemble_extended(x, maps, 2), sampling.uniform_mask(64, 2).keep)
    res = recon.cg_sense(k, maps, cfg=ReconConfig(lam=1e12))
    assert np.abs(res.slices.data).max() < 1e-9 * np.abs(x.data).max()


def test_cg_objective_monotone_and_warns():
    x, maps = scene()
    keep = sampling.cava_mask(96, 4).keep
    k = model.smile_forward(model.assemble_extended(x, maps, 3), keep, noise_sigma=1e-3, seed=1)
    with pytest.warns(RuntimeWarning):
        res = recon.cg_sense(k, maps, cfg=ReconConfig(max_iters=5, cg_tolerance=1e-14))
    assert not res.converged and res.iterations == 5
    h = res.history
    assert all(b <= a * (1 + 1e-12) for a, b in zip(h, h[1:]))


def test_cg_collapsed_caipi_grid():
    x, maps = scene(mb=2, seed=3)
    k = model.caipi_forward(x, maps, model.caipi_phases(32, 2))
    res = recon.cg_sense(k, maps, cfg=ReconConfig(cg_tolerance=1e-12, max_iters=500))
    assert rel(res.slices.data, x.data) < 1e-6


def test_column_sense_flags_singular_columns():
    x, maps = scene(mb=3, similarity=1.0)
    keep = sampling.uniform_mask(96, 3).keep
    cs = recon.ColumnSense(model.extended_maps(maps, 3), keep, columns=[16])
    assert cs.singular.all()
    out = cs.solve(np.ones((8, 96, 1), complex))
    assert np.isinf(out[cs.rows]).all()


def single_slice_k(ncoils=8, support=(5, 5), n=32, seed=0):
    content = phantom.random_content(1, (n, n), seed=seed)
    maps = phantom.make_coil_maps(phantom.CoilSpec(ncoils, support, 0.0, seed), 1, (n, n))
    return model.fft2c(maps.maps[:, 0] * content.data[0])


def test_grappa_identity_and_passthrough():
    full = single_slice_k()
    k = KSpaceData(full, mask=np.ones(32, bool))
    out = recon.grappa_uniform(k, calib.centered_acs((32, 32), 8))
    assert np.array_equal(out.data, full)
    keep = sampling.uniform_mask(32, 2).keep
    und = KSpaceData(full * keep[None, :, None], mask=keep)
    out = recon.grappa_uniform(und, calib.centered_acs((32, 32), 16),
                               cfg=ReconConfig("grappa_uniform", kernel=(5, 4)), calib=full)
    assert np.array_equal(out.data[:, keep], und.data[:, keep])
    assert out.mask.all()


def test_grappa_exact_on_band_limited_data():
    full = single_slice_k()
    keep = sampling.uniform_mask(32, 2, 1).keep
    und = KSpaceData(full * keep[None, :, None], mask=keep)
    out = recon.grappa_uniform(und, calib.centered_acs((32, 32), 20),
                               cfg=ReconConfig("grappa_uniform", kernel=(5, 4)), calib=full)
    assert rel(out.data, full) <= 1e-6


def test_grappa_rejects_irregular_masks():
    full = single_slice_k()
    keep = sampling.cava_mask(32, 2).keep
    with pytest.raises(ValueError):
        recon.grappa_uniform(KSpaceData(full * keep[None, :, None], mask=keep),
                             calib.centered_acs((32, 32), 16))


def test_grappa_content_independence():
    x, maps = scene(mb=2, ny=64, nx=64, support=(7, 7), similarity=1.0, seed=4)
    ka = model.fft2c(maps.maps[:, 0] * x.data[0])
    kb = model.fft2c(maps.maps[:, 0] * x.data[1])
    keep = sampling.uniform_mask(64, 2).keep
    und = KSpaceData(kb * keep[None, :, None], mask=keep)
    acs = calib.centered_acs((64, 64), 24)
    cfg = ReconConfig("grappa_uniform", kernel=(5, 4))
    own = recon.grappa_uniform(und, acs, cfg=cfg, calib=kb)
    other = recon.grappa_uniform(und, acs, cfg=cfg, calib=ka)
    e_own, e_other = rel(own.data, kb), rel(other.data, kb)
    assert abs(e_other - e_own) <= 0.05 * max(e_own, e_other) or e_other < 1e-6


def test_slice_grappa_mb1_identity():
    x, maps = scene(mb=1)
    k = model.caipi_forward(x, maps, np.zeros((32, 1)))
    res = recon.slice_grappa(k, [KSpaceData(k.data)], ReconConfig("slice_grappa", kernel=(3, 3)),
                             maps=maps)
    assert rel(res.slices.data, x.data) <= 1e-6


def test_slice_grappa_separates_and_leaks():
    from smile import experiments as X, metrics
    cfg = X.ExperimentConfig({"phantom": {"nx": 48, "ny": 48}, "acquisition": {"acs_lines": 24}})
    sc = X.make_scene(cfg)
    k, calibs = X.simulate_caipi(cfg, sc, noisy=False)
    acs = calib.centered_acs((48, 48), 24)
    res = recon.slice_grappa(k, calibs, ReconConfig("slice_grappa", kernel=(5, 4)), acs=acs,
                             maps=sc.maps)
    assert metrics.ser(sc.slices, res.slices, sc.support) > 10
    L = X.caipi_leakage(cfg, sc, (5, 4), 0.0)
    off = L[~np.eye(3, dtype=bool)]
    assert off.max() > 1e-4
    assert np.all(np.diag(L) == 1)
