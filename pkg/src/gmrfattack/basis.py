"""Low-frequency Fourier basis vectors used as query directions.

A basis vector lives on a single channel and is the real (cosine) or
imaginary (sine) part of the inverse 2-D FFT of a one-hot spectrum,
rescaled to unit l2 norm.  Frequencies are visited along anti-diagonals
r + k = 0, 1, 2, ... of the (row, col) index grid, rows ascending within a
diagonal; a bin whose conjugate (-r, -k) was already visited is skipped
since it spans the same real subspace.  Within a bin the cosine comes
before the sine and channels cycle fastest.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import CapacityError, UndefinedPhaseError

PHASES = {"cos": ("cos",), "cos+sin": ("cos", "sin")}


def is_self_conjugate(shape, freq):
    _, h, w = shape
    r, k = freq
    return (-r) % h == r % h and (-k) % w == k % w


def basis_vector(shape, channel, freq, phase="cos"):
    c, h, w = shape
    r, k = freq
    if not (0 <= channel < c and 0 <= r < h and 0 <= k < w):
        raise IndexError(f"basis index ({channel}, {r}, {k}) outside shape {shape}")
    if phase not in ("cos", "sin"):
        raise ValueError(f"phase must be 'cos' or 'sin', got {phase!r}")
    if phase == "sin" and is_self_conjugate(shape, freq):
        raise UndefinedPhaseError(f"no sine vector at self-conjugate frequency {freq} for shape {shape}")
    spectrum = np.zeros((h, w), dtype=complex)
    spectrum[r, k] = 1.0
    wave = np.fft.ifft2(spectrum)
    plane = wave.real if phase == "cos" else wave.imag
    out = np.zeros(shape)
    out[channel] = plane / np.linalg.norm(plane)
    return out


def enumerate_frequencies(shape, kinds="cos"):
    """Yield ``(channel, row, col, phase)`` in traversal order."""
    c, h, w = shape
    phases = PHASES[kinds]
    seen = set()
    for s in range(h + w - 1):
        for r in range(max(0, s - w + 1), min(s, h - 1) + 1):
            k = s - r
            if (r, k) in seen:
                continue
            seen.add((r, k))
            seen.add(((-r) % h, (-k) % w))
            for phase in phases:
                if phase == "sin" and is_self_conjugate(shape, (r, k)):
                    continue
                for ch in range(c):
                    yield ch, r, k, phase


def capacity(shape, kinds="cos"):
    """Number of distinct vectors available for ``shape``."""
    c, h, w = shape
    self_conj = (2 - h % 2) * (2 - w % 2)
    pairs = (h * w - self_conj) // 2
    per_channel = self_conj + pairs if kinds == "cos" else h * w
    return c * per_channel


@dataclass(frozen=True)
class BasisPlan:
    shape: tuple
    count: int
    kinds: str
    order: tuple

    def vectors(self):
        """(count, c, h, w) stack of unit-norm basis vectors."""
        return np.stack([basis_vector(self.shape, ch, (r, k), ph) for ch, r, k, ph in self.order])


def plan_basis(shape, count, kinds="cos"):
    shape = tuple(int(s) for s in shape)
    if kinds not in PHASES:
        raise ValueError(f"kinds must be one of {sorted(PHASES)}")
    cap = capacity(shape, kinds)
    if count > cap:
        raise CapacityError(f"requested {count} vectors but shape {shape} offers {cap} ({kinds})")
    order = []
    for item in enumerate_frequencies(shape, kinds):
        if len(order) == count:
            break
        order.append(item)
    return BasisPlan(shape, count, kinds, tuple(order))


def low_frequency_sequence(shape, count, kinds="cos"):
    """The first ``count`` basis vectors as a (count, c, h, w) array."""
    return _cached_sequence(tuple(int(s) for s in shape), int(count), kinds).copy()


@lru_cache(maxsize=32)
def _cached_sequence(shape, count, kinds):
    if count == 0:
        return np.zeros((0,) + shape)
    return plan_basis(shape, count, kinds).vectors()
