"""Dense (c, h, w) tensors, 3-D FFTs, circular stencil convolution and GTZ1 I/O.

Tensors are plain ``numpy.ndarray`` objects of shape ``(c, h, w)`` holding
float64 values.  Most functions here also accept arrays with extra leading
batch axes and act on the trailing three axes.
"""

import struct
from pathlib import Path

import numpy as np

from .errors import ShapeMismatchError

AXES = (-3, -2, -1)

GTZ_MAGIC = b"GTZ1"
_GTZ_HEADER = struct.Struct("<4sIIIB")
_GTZ_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


def as_grid(data, shape=None):
    """Validate ``data`` as a finite real (c, h, w) tensor and return a float64 copy.

    A flat sequence is accepted when ``shape`` is given and is reshaped in
    row-major order.
    """
    arr = np.array(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if arr.size != int(np.prod(shape)):
            raise ShapeMismatchError(f"{arr.size} values cannot fill shape {shape}")
        arr = arr.reshape(shape)
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise ShapeMismatchError(f"expected a (c, h, w) tensor, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite entries")
    return arr


def fft3(t):
    """Unnormalized 3-D DFT over the trailing (c, h, w) axes."""
    return np.fft.fftn(t, axes=AXES)


def ifft3(spectrum):
    """Inverse of :func:`fft3` (complex output)."""
    return np.fft.ifftn(spectrum, axes=AXES)


def ifft3_real(spectrum):
    """Inverse 3-D DFT keeping only the real part."""
    return np.fft.ifftn(spectrum, axes=AXES).real


def check_offsets(offsets, shape):
    """Raise if any stencil offset reaches at least a full period of ``shape``."""
    shape = tuple(shape[-3:])
    for off in offsets:
        if any(abs(o) >= n for o, n in zip(off, shape)):
            raise ShapeMismatchError(f"stencil offset {off} does not fit grid shape {shape}")


def shift(t, offset):
    """Circular shift with ``shift(t, o)[i] == t[(i + o) mod shape]``."""
    return np.roll(t, tuple(-int(o) for o in offset), axis=AXES)


def circular_convolve(t, spec, theta):
    """Apply the circulant operator defined by ``spec`` and ``theta`` to ``t``.

    Computes ``sum_o theta[p(o)] * shift(t, o)`` over the stencil offsets, i.e.
    the product ``Lambda(theta) @ vec(t)`` with circular boundary handling.
    """
    t = np.asarray(t, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    check_offsets(spec.offsets, t.shape)
    out = np.zeros_like(t)
    for off, p in spec.offsets.items():
        if theta[p] != 0.0:
            out += theta[p] * shift(t, off)
    return out


def write_gtz(path, t, dtype="f8"):
    """Write a (c, h, w) tensor in GTZ1 format.

    ``dtype`` is ``"f8"`` (tag 0) or ``"f4"`` (tag 1).
    """
    t = np.asarray(t)
    if t.ndim != 3:
        raise ShapeMismatchError(f"GTZ1 stores 3-D tensors, got shape {t.shape}")
    tag = {"f8": 0, "f4": 1}[dtype]
    payload = np.ascontiguousarray(t, dtype=_GTZ_DTYPES[tag]).tobytes()
    with open(path, "wb") as fh:
        fh.write(_GTZ_HEADER.pack(GTZ_MAGIC, *t.shape, tag))
        fh.write(payload)


def read_gtz(path):
    """Read a GTZ1 file into a float64 (c, h, w) array."""
    raw = Path(path).read_bytes()
    if len(raw) < _GTZ_HEADER.size:
        raise ValueError(f"{path}: truncated GTZ1 header")
    magic, c, h, w, tag = _GTZ_HEADER.unpack_from(raw)
    if magic != GTZ_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if tag not in _GTZ_DTYPES:
        raise ValueError(f"{path}: unknown dtype tag {tag}")
    dt = _GTZ_DTYPES[tag]
    expected = c * h * w * dt.itemsize
    body = raw[_GTZ_HEADER.size:]
    if len(body) != expected:
        raise ValueError(f"{path}: payload has {len(body)} bytes, expected {expected}")
    return np.frombuffer(body, dtype=dt).astype(np.float64).reshape(c, h, w)
