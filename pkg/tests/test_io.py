import numpy as np
import pytest

from smile import calib, io

from conftest import crandn


def test_array_roundtrip_bit_identical(tmp_path, rng):
    a = crandn(rng, 3, 5, 7).astype(np.complex64)
    io.write_array(tmp_path / "a.smle", a)
    b = io.read_array(tmp_path / "a.smle")
    assert b.dtype == np.complex64 and np.array_equal(a, b)


def test_truncated_and_corrupt_files(tmp_path, rng):
    p = tmp_path / "a.smle"
    io.write_array(p, crandn(rng, 4, 4))
    raw = p.read_bytes()
    p.write_bytes(raw[:-9])
    with pytest.raises(io.CorruptFileError):
        io.read_array(p)
    flipped = bytearray(raw)
    flipped[40] ^= 1
    p.write_bytes(bytes(flipped))
    with pytest.raises(io.CorruptFileError):
        io.read_array(p)
    p.write_bytes(b"nope")
    with pytest.raises(io.CorruptFileError):
        io.read_array(p)
    bumped = bytearray(raw)
    bumped[4] = 9
    p.write_bytes(bytes(bumped))
    with pytest.raises(io.UnsupportedFormatError):
        io.read_array(p)


def test_empty_dims_rejected(tmp_path):
    with pytest.raises(ValueError):
        io.write_array(tmp_path / "e.smle", np.zeros((0, 3)))
    with pytest.raises(ValueError):
        io.write_array(tmp_path / "e.smle", np.array(1.0))


def test_kernel_roundtrip(tmp_path, rng):
    ks = calib.KernelSet(crandn(rng, 2, 3, 4, 5).astype(np.complex64), "annihilating",
                         np.array([1e-9, 2e-9]), [0, None])
    spec = calib.KernelSizeSpec(5, 5, 3, 5, 4)
    io.write_kernels(tmp_path / "k.smle", ks, spec)
    back, meta = io.read_kernels(tmp_path / "k.smle")
    assert np.array_equal(back.coefficients, ks.coefficients)
    assert back.designated_coil == [0, None]
    assert meta["ex"] == 5 and meta["ey"] == 4


def read_pgm(path):
    raw = path.read_bytes()
    parts = raw.split(b"\n", 3)
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], np.uint8).reshape(h, w)


def test_export_zero_image_black(tmp_path):
    io.export_magnitude(np.zeros((4, 6)), tmp_path / "z.pgm")
    assert np.all(read_pgm(tmp_path / "z.pgm") == 0)


def test_export_full_window_and_mosaic(tmp_path):
    img = np.linspace(0, 2, 3 * 8 * 5).reshape(3, 8, 5)
    lo, hi = io.export_magnitude(img, tmp_path / "m.pgm", window=(0.0, 2.0))
    out = read_pgm(tmp_path / "m.pgm")
    assert out.shape == (8, 15)
    assert out.min() == 0 and out.max() == 255
    assert (lo, hi) == (0.0, 2.0)
    assert "window = fixed" in (tmp_path / "m.pgm.txt").read_text()


def test_export_png_and_nonfinite(tmp_path):
    from PIL import Image
    io.export_magnitude(np.eye(4), tmp_path / "e.png")
    assert np.array_equal(np.array(Image.open(tmp_path / "e.png")), np.eye(4) * 255)
    bad = np.ones((3, 3))
    bad[1, 2] = np.nan
    with pytest.raises(ValueError, match=r"\[1, 2\]"):
        io.export_magnitude(bad, tmp_path / "b.pgm")


def test_percentile_window(tmp_path):
    img = np.arange(100.0).reshape(10, 10)
    lo, hi = io.export_magnitude(img, tmp_path / "p.pgm", window=("percentile", 0, 100))
    assert (lo, hi) == (0.0, 99.0)
