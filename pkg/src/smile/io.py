"""Binary array container, atomic writes and magnitude image export.

Container layout (all little-endian)::

    magic      4 bytes   b"SMLE"
    version    u16       1
    dtype tag  u16       1 = complex64
    ndim       u32
    dims       ndim x u64
    payload    interleaved (real, imag) float32
    crc32      u32       over everything before it
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

__all__ = [
    "CorruptFileError",
    "UnsupportedFormatError",
    "write_array",
    "read_array",
    "atomic_write_bytes",
    "atomic_write_text",
    "export_magnitude",
    "write_kernels",
    "read_kernels",
]

MAGIC = b"SMLE"
VERSION = 1
DTYPE_COMPLEX64 = 1


class CorruptFileError(ValueError):
    pass


class UnsupportedFormatError(ValueError):
    pass


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_array(path, array) -> None:
    """Store ``array`` as complex64 in the SMLE container."""
    arr = np.asarray(array)
    if arr.ndim == 0 or arr.size == 0:
        raise ValueError("cannot store an array with empty dimensions")
    arr = np.ascontiguousarray(arr, dtype="<c8")
    header = MAGIC + struct.pack("<HHI", VERSION, DTYPE_COMPLEX64, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    body = header + arr.view("<f4").tobytes()
    atomic_write_bytes(path, body + struct.pack("<I", zlib.crc32(body)))


def read_array(path) -> np.ndarray:
    """Read an SMLE container; verifies magic, version, size and CRC."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CorruptFileError(f"{path}: not an SMLE container")
    version, dtag, ndim = struct.unpack_from("<HHI", raw, 4)
    if version != VERSION:
        raise UnsupportedFormatError(f"{path}: unsupported container version {version}")
    if dtag != DTYPE_COMPLEX64:
        raise UnsupportedFormatError(f"{path}: unsupported dtype tag {dtag}")
    if ndim == 0:
        raise CorruptFileError(f"{path}: empty dimension list")
    off = 12 + 8 * ndim
    if len(raw) < off + 4:
        raise CorruptFileError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{ndim}Q", raw, 12)
    if any(d == 0 for d in dims):
        raise CorruptFileError(f"{path}: zero-length dimension")
    nbytes = 8 * int(np.prod(dims))
    if len(raw) != off + nbytes + 4:
        raise CorruptFileError(f"{path}: payload length does not match dimensions")
    (crc,) = struct.unpack_from("<I", raw, off + nbytes)
    if zlib.crc32(raw[: off + nbytes]) != crc:
        raise CorruptFileError(f"{path}: CRC mismatch")
    return np.frombuffer(raw, dtype="<c8", count=int(np.prod(dims)), offset=off).reshape(dims).copy()


def write_kernels(path, kernels, spec=None) -> None:
    """Kernel coefficients go to the container, metadata to ``<path>.json``."""
    write_array(path, kernels.coefficients)
    meta = {
        "kind": kernels.kind,
        "residual": [float(r) for r in kernels.residual],
        "designated_coil": [None if c is None else int(c) for c in kernels.designated_coil],
        "spec": None if spec is None else dict(vars(spec)),
    }
    atomic_write_text(str(path) + ".json", json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_kernels(path):
    from .calib import KernelSet
    coef = read_array(path).astype(complex)
    meta = json.loads(Path(str(path) + ".json").read_text())
    ks = KernelSet(coef, meta["kind"], np.array(meta["residual"]), list(meta["designated_coil"]))
    return ks, meta["spec"]


def _to_uint8(mag, window):
    lo, hi = window
    if hi <= lo:
        return np.zeros(mag.shape, dtype=np.uint8)
    scaled = np.clip((mag - lo) / (hi - lo), 0.0, 1.0)
    return np.round(scaled * 255).astype(np.uint8)


def export_magnitude(array, path, window="minmax", scale: float = 1.0):
    """Write ``|array| * scale`` as an 8-bit grayscale PGM or PNG.

    A 3D input ``(slice, y, x)`` is tiled horizontally into a mosaic.
    ``window`` is ``"minmax"``, ``("percentile", lo, hi)`` or an explicit
    ``(lo, hi)`` pair; the resolved window is written to ``<path>.txt``.
    Returns the resolved ``(lo, hi)``.
    """
    arr = np.asarray(array)
    bad = np.argwhere(~np.isfinite(arr))
    if bad.size:
        raise ValueError(f"non-finite values at indices {bad[:10].tolist()}")
    mag = np.abs(arr) * scale
    if mag.ndim == 3:
        mag = np.concatenate(list(mag), axis=1)
    if mag.ndim != 2:
        raise ValueError("expected a 2D image or a 3D slice stack")
    if isinstance(window, str) and window == "minmax":
        lo, hi = float(mag.min()), float(mag.max())
        how = "minmax"
    elif isinstance(window, (tuple, list)) and len(window) == 3 and window[0] == "percentile":
        lo, hi = (float(v) for v in np.percentile(mag, window[1:]))
        how = f"percentile {window[1]:g} {window[2]:g}"
    else:
        lo, hi = (float(v) for v in window)
        how = "fixed"
    img = _to_uint8(mag, (lo, hi))
    path = Path(path)
    if path.suffix.lower() == ".png":
        import io as _io
        from PIL import Image
        buf = _io.BytesIO()
        Image.fromarray(img, mode="L").save(buf, format="PNG")
        atomic_write_bytes(path, buf.getvalue())
    else:
        head = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
        atomic_write_bytes(path, head + img.tobytes())
    atomic_write_text(str(path) + ".txt",
                      f"window = {how}\nlow = {lo!r}\nhigh = {hi!r}\nscale = {scale!r}\n")
    return lo, hi
