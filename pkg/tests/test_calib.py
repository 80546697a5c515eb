import numpy as np
import pytest
from numpy.testing import assert_allclose

from smile import calib, model, phantom
from smile.calib import KernelSizeSpec
from smile.model import CoilMapSet, KSpaceData, SliceStack


def test_counting_examples():
    assert calib.counting_bound_holds(KernelSizeSpec(11, 11, 8, 6, 6))      # 288 > 256
    assert not calib.counting_bound_holds(KernelSizeSpec(5, 5, 2, 2, 2))    # 8 > 36 fails
    assert calib.counting_bound_holds(KernelSizeSpec(4, 4, 4, 4, 4))        # 64 > 49
    assert KernelSizeSpec(7, 7, 4, 6, 6, n=3).dy == 21
    with pytest.raises(ValueError):
        KernelSizeSpec(0, 7, 4, 6, 6)


def test_optimal_kernel_size():
    assert_allclose(calib.optimal_kernel_size(7, 7, 4), (6, 6))
    assert_allclose(calib.optimal_kernel_size(9, 9, 9), (4, 4))
    ex, ey = calib.optimal_kernel_size(7, 7, 4, n=3)
    assert_allclose(ey / ex, (3 * 7 - 1) / (7 - 1))
    with pytest.raises(ValueError):
        calib.optimal_kernel_size(7, 7, 1)


def test_calibration_matrix_shape_and_layout():
    k = np.arange(9.0).reshape(1, 3, 3)
    A = calib.build_calibration_matrix(k, calib.ACSRegion((0, 3), (0, 3)), (2, 2))
    assert A.shape == (4, 4)
    assert_allclose(A[0], [0, 1, 3, 4])
    assert_allclose(A[3], [4, 5, 7, 8])
    rng = np.random.default_rng(0)
    k = rng.standard_normal((3, 10, 12))
    assert calib.build_calibration_matrix(k, None, (4, 3)).shape[1] == 3 * 4 * 3
    with pytest.raises(ValueError, match="at least 5x2"):
        calib.build_calibration_matrix(k, calib.ACSRegion((0, 4), (0, 12)), (2, 5))


def band_limited_kspace(ncoils, support, grid=24, seed=0):
    maps = phantom.make_coil_maps(phantom.CoilSpec(ncoils, support, 0.0, seed), 1, (grid, grid))
    content = phantom.random_content(1, (grid, grid), seed=seed)
    return model.fft2c(maps.maps[:, 0] * content.data[0])


def test_nullspace_kernels_annihilate():
    k = band_limited_kspace(4, (3, 3))
    E = (4, 4)
    assert calib.counting_bound_holds(KernelSizeSpec(3, 3, 4, *E))
    A = calib.build_calibration_matrix(k, None, E)
    assert np.linalg.matrix_rank(A, tol=1e-8 * np.linalg.norm(A, 2)) < A.shape[1]
    ks = calib.estimate_kernels(A, 1e-8, ncoils=4, E=E)
    assert len(ks) >= 1
    smax = np.linalg.norm(A, 2)
    for j in range(len(ks)):
        v = ks.coefficients[j]
        assert np.linalg.norm(A @ v.ravel()) <= 1e-8 * smax * np.linalg.norm(v)
        res = calib.apply_kernel(k, v)
        assert np.abs(res).max() <= 1e-8 * np.abs(k).max() * np.abs(v).sum()
        c = ks.designated_coil[j]
        assert c is None or v[c, E[1] // 2, E[0] // 2] == -1


def test_no_kernel_when_inequality_fails_badly():
    k = band_limited_kspace(2, (5, 5))
    A = calib.build_calibration_matrix(k, None, (1, 1))
    assert len(calib.estimate_kernels(A, 1e-8, ncoils=2, E=(1, 1))) == 0


def test_noise_raises_smallest_singular_value():
    k = band_limited_kspace(4, (3, 3))
    rng = np.random.default_rng(1)
    noisy = k + 1e-3 * (rng.standard_normal(k.shape) + 1j * rng.standard_normal(k.shape))
    E = (4, 4)
    clean = calib.singular_ratio(calib.build_calibration_matrix(k, None, E))
    dirty = calib.singular_ratio(calib.build_calibration_matrix(noisy, None, E))
    assert clean < 1e-8 < dirty


def test_minimal_extent_grows_on_extended_grid():
    from smile import experiments as X
    e1, en = X.kernel_scaling(n=3, ncoils=4, support=(5, 7), ex=5, grid=32)
    assert en >= 2 * e1


def test_acs_region_validation():
    acs = calib.centered_acs((64, 32), 16)
    assert acs.ky == (24, 40) and acs.kx == (0, 32)
    with pytest.raises(ValueError):
        calib.centered_acs((64, 32), 80)


def truth_normalised(maps):
    sos = np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    return maps / sos


def test_map_estimate_full_acs_matches_truth():
    maps = phantom.make_coil_maps(phantom.CoilSpec(4, (5, 5), seed=2), 1, (32, 32))
    x = phantom.make_phantom(phantom.PhantomSpec(32, 32, 1)).data[0]
    k = KSpaceData(model.fft2c(maps.maps[:, 0] * x))
    est = calib.estimate_coil_maps_from_acs(k, calib.ACSRegion((0, 32), (0, 32)))
    sup = np.abs(x) > 0.05
    truth = truth_normalised(maps.maps[:, 0])
    # the estimate carries the object phase, which is real and positive here
    phase = np.exp(1j * np.angle(x))
    assert_allclose((est.maps[:, 0] * np.conj(phase))[:, sup], truth[:, sup], atol=1e-6)


def test_map_estimate_from_acs_block():
    maps = phantom.make_coil_maps(phantom.CoilSpec(4, (5, 5), seed=2), 1, (64, 64))
    x = phantom.make_phantom(phantom.PhantomSpec(64, 64, 1)).data[0]
    k = KSpaceData(model.fft2c(maps.maps[:, 0] * x))
    est = calib.estimate_coil_maps_from_acs(k, calib.centered_acs((64, 64), 32, 32))
    truth = truth_normalised(maps.maps[:, 0])
    sup = np.abs(x) > 0.05
    err = np.linalg.norm(est.maps[:, 0][:, sup] - truth[:, sup]) / np.linalg.norm(truth[:, sup])
    assert err < 0.05


def test_single_constant_coil_estimate_is_one():
    x = phantom.make_phantom(phantom.PhantomSpec(32, 32, 1)).data[0]
    k = KSpaceData(model.fft2c(x[None]))
    est = calib.estimate_coil_maps_from_acs(k, calib.centered_acs((32, 32), 16))
    sup = np.abs(x) > 0.05
    assert_allclose(np.abs(est.maps[0, 0][sup]), 1.0, atol=1e-12)


def test_map_estimate_rejects_holes():
    k = KSpaceData(np.ones((2, 16, 16), complex), mask=np.r_[np.ones(8, bool), np.zeros(8, bool)])
    with pytest.raises(ValueError):
        calib.estimate_coil_maps_from_acs(k, calib.ACSRegion((4, 12), (0, 16)))
