"""Stationary GMRF precision operators defined by small symmetric stencils.

A :class:`StencilSpec` maps 3-D grid offsets ``(dc, dh, dw)`` to parameter
indices, so that ``Lambda(theta)[i, i + o] = theta[p(o)]`` with circular
wrap-around.  Such an operator is circulant; its eigenvalues are the DFT of
the stencil embedded in a zero grid, which makes log-determinants, solves and
prior sampling O(N log N).
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NotPositiveDefiniteError, StencilAmbiguityError
from .tensor import check_offsets, circular_convolve, fft3, ifft3_real

FEASIBILITY_RTOL = 1e-12


@dataclass(frozen=True, eq=False)
class StencilSpec:
    """Offset-to-parameter map of a symmetric precision stencil."""

    offsets: dict
    names: tuple = field(default=())

    def __post_init__(self):
        offsets = {tuple(int(v) for v in o): int(p) for o, p in self.offsets.items()}
        object.__setattr__(self, "offsets", offsets)
        if (0, 0, 0) not in offsets:
            raise ValueError("stencil must contain the diagonal offset (0, 0, 0)")
        for o, p in offsets.items():
            mirror = tuple(-v for v in o)
            if offsets.get(mirror) != p:
                raise ValueError(f"offset {o} -> {p} lacks the symmetric partner {mirror} -> {p}")
        used = sorted(set(offsets.values()))
        if used != list(range(len(used))):
            raise ValueError(f"parameter indices must be 0..P-1, got {used}")
        if not self.names:
            object.__setattr__(self, "names", tuple(f"theta{p}" for p in used))
        elif len(self.names) != len(used):
            raise ValueError("one name per parameter is required")

    @property
    def param_count(self):
        return len(self.names)

    def offsets_of(self, p):
        return [o for o, q in self.offsets.items() if q == p]

    def unit(self, p):
        """Parameter vector selecting the single parameter ``p``."""
        e = np.zeros(self.param_count)
        e[p] = 1.0
        return e


def _symmetric(pairs):
    """Expand {offset: p} to include every mirrored offset."""
    out = {}
    for o, p in pairs.items():
        out[o] = p
        out[tuple(-v for v in o)] = p
    return out


def identity_stencil():
    return StencilSpec({(0, 0, 0): 0}, ("alpha",))


def grid4_stencil():
    """Diagonal plus the four in-channel nearest neighbours."""
    return StencilSpec(_symmetric({(0, 0, 0): 0, (0, 1, 0): 1, (0, 0, 1): 1}), ("alpha", "beta"))


def grid8_stencil():
    """Diagonal, four axial neighbours (beta) and four diagonal neighbours (gamma)."""
    pairs = {(0, 0, 0): 0, (0, 1, 0): 1, (0, 0, 1): 1, (0, 1, 1): 2, (0, 1, -1): 2}
    return StencilSpec(_symmetric(pairs), ("alpha", "beta", "gamma"))


def cross_channel_stencil(ring2=False):
    """Colour-image stencil: 8-neighbour spatial terms plus same-pixel channel coupling.

    Parameters are ordered ``(alpha, beta, gamma, kappa[, nu])`` with gamma the
    channel coupling, kappa the diagonal neighbours and nu (when ``ring2``) the
    twelve offsets at Chebyshev distance two, excluding the grid corners.
    """
    pairs = {
        (0, 0, 0): 0,
        (0, 1, 0): 1, (0, 0, 1): 1,
        (1, 0, 0): 2,
        (0, 1, 1): 3, (0, 1, -1): 3,
    }
    names = ["alpha", "beta", "gamma", "kappa"]
    if ring2:
        for o in [(0, 2, 0), (0, 0, 2), (0, 1, 2), (0, -1, 2), (0, 2, 1), (0, 2, -1)]:
            pairs[o] = 4
        names.append("nu")
    return StencilSpec(_symmetric(pairs), tuple(names))


# Fitted values from the experiment-settings tables; "grid4" is a synthetic fixture.
_PRESETS = {
    "identity": (identity_stencil, (1.0,)),
    "grid4": (grid4_stencil, (5.0, -1.0)),
    "mnist": (grid8_stencil, (21094408.0, -5116365.0, 284558.1562)),
    "vgg16": (cross_channel_stencil, (633.44, -24.05, -232.04, -2.00)),
    "resnet50": (lambda: cross_channel_stencil(ring2=True), (2631.93, -263.33, -837.16, 6.78, 28.09)),
    "inception_v3": (lambda: cross_channel_stencil(ring2=True), (8964.89, -2960.87, -841.13, 1155.66, 286.03)),
}

# sigma^2 and delta_1 used with each preset in attack runs.
PRESET_ATTACK_SETTINGS = {
    "mnist": {"sigma2": 1e-3, "delta1": 0.15, "fit_delta": 0.1},
    "vgg16": {"sigma2": 1.0, "delta1": 0.04, "fit_delta": 1.0},
    "resnet50": {"sigma2": 0.5, "delta1": 0.0375, "fit_delta": 1.0},
    "inception_v3": {"sigma2": 0.1, "delta1": 0.045, "fit_delta": 1.0},
}


def preset_names():
    return sorted(_PRESETS)


def preset(name):
    """Return ``(spec, theta)`` for a named stencil preset."""
    key = name.lower().replace("-", "_")
    key = {"inception": "inception_v3", "inceptionv3": "inception_v3", "resnet": "resnet50"}.get(key, key)
    if key not in _PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {preset_names()}")
    build, theta = _PRESETS[key]
    return build(), np.array(theta, dtype=np.float64)


def embed_stencil(spec, theta, shape):
    """Place ``theta[p(o)]`` at grid index ``o mod shape`` for every offset ``o``."""
    shape = tuple(int(s) for s in shape)
    check_offsets(spec.offsets, shape)
    theta = np.asarray(theta, dtype=np.float64)
    kernel = np.zeros(shape)
    seen = {}
    for o, p in spec.offsets.items():
        idx = tuple(v % n for v, n in zip(o, shape))
        if idx in seen:
            raise StencilAmbiguityError(
                f"offsets {seen[idx]} and {o} both wrap to index {idx} on shape {shape}"
            )
        seen[idx] = o
        kernel[idx] = theta[p]
    return kernel


def parameter_symbols(spec, shape):
    """Eigenvalue grid of each basis operator B_p, stacked as (P, c, h, w).

    The precision eigenvalues are linear in theta: ``d = sum_p theta_p * b_p``.
    """
    return np.stack([eigenvalues(spec, spec.unit(p), shape) for p in range(spec.param_count)])


def eigenvalues(spec, theta, shape):
    """Real eigenvalue grid d(omega) of the circulant Lambda(theta)."""
    spectrum = fft3(embed_stencil(spec, theta, shape))
    imag = np.max(np.abs(spectrum.imag))
    scale = max(1.0, np.max(np.abs(spectrum.real)))
    # Symmetric stencils give a real spectrum up to rounding.
    if imag > 1e-9 * scale:
        raise ValueError(f"stencil spectrum is not real (max |imag| = {imag:.3g})")
    return spectrum.real.copy()


def is_feasible(eigs, rtol=FEASIBILITY_RTOL):
    top = np.max(eigs)
    return bool(top > 0 and np.min(eigs) > rtol * top)


def check_feasible(spec, theta, shape):
    """True when Lambda(theta) is positive definite on ``shape``."""
    return is_feasible(eigenvalues(spec, theta, shape))


class GmrfModel:
    """Circulant GMRF precision Lambda(theta) on a fixed (c, h, w) grid.

    Construction fails with :class:`NotPositiveDefiniteError` unless every
    eigenvalue clears the feasibility threshold.
    """

    def __init__(self, spec, theta, shape):
        self.spec = spec
        self.theta = np.array(theta, dtype=np.float64)
        self.theta.setflags(write=False)
        self.shape = tuple(int(s) for s in shape)
        eigs = eigenvalues(spec, self.theta, self.shape)
        if not is_feasible(eigs):
            raise NotPositiveDefiniteError(
                f"precision not positive definite on {self.shape}: min eigenvalue {eigs.min():.6g}",
                min_eig=float(eigs.min()),
            )
        eigs.setflags(write=False)
        self.eigs = eigs

    @classmethod
    def from_preset(cls, name, shape):
        spec, theta = preset(name)
        return cls(spec, theta, shape)

    @property
    def size(self):
        return int(np.prod(self.shape))

    def apply(self, v):
        return circular_convolve(v, self.spec, self.theta)

    def solve(self, v):
        return solve_precision(self, v)

    def logdet(self):
        return logdet(self)

    def sample(self, rng_seed=None, n=None):
        return sample_prior(self, rng_seed, n)

    def __repr__(self):
        params = ", ".join(f"{k}={v:g}" for k, v in zip(self.spec.names, self.theta))
        return f"GmrfModel({params}, shape={self.shape})"


def logdet(model):
    """log det Lambda as the sum of log eigenvalues."""
    if np.min(model.eigs) <= 0:
        raise NotPositiveDefiniteError("log-determinant of a non-PD precision", float(model.eigs.min()))
    return float(np.sum(np.log(model.eigs)))


def solve_precision(model, v):
    """Lambda^{-1} v by division in the Fourier domain (batch axes allowed)."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-3:] != model.shape:
        raise ValueError(f"tensor shape {v.shape} does not match model shape {model.shape}")
    return ifft3_real(fft3(v) / model.eigs)


def sample_prior(model, rng_seed=None, n=None):
    """Draw from N(0, Lambda^{-1}).

    Real white noise is filtered by Lambda^{-1/2} = Q^H D^{-1/2} Q, which is a
    real symmetric operator because d(omega) = d(-omega).  Returns one (c, h, w)
    sample, or an (n, c, h, w) stack when ``n`` is given.
    """
    rng = np.random.default_rng(rng_seed)
    size = model.shape if n is None else (int(n),) + model.shape
    white = rng.standard_normal(size)
    return ifft3_real(fft3(white) / np.sqrt(model.eigs))


def model_to_dict(spec, theta, **extra):
    offsets = sorted([list(o) + [p] for o, p in spec.offsets.items()])
    out = {
        "params": list(spec.names),
        "theta": [float(t) for t in theta],
        "offsets": offsets,
    }
    out.update(extra)
    return out


def model_from_dict(data):
    offsets = {tuple(row[:3]): int(row[3]) for row in data["offsets"]}
    spec = StencilSpec(offsets, tuple(data["params"]))
    return spec, np.array(data["theta"], dtype=np.float64)


def save_model(path, spec, theta, **extra):
    """Write stencil and parameters as JSON (offsets as ``[dc, dh, dw, p]`` rows)."""
    Path(path).write_text(json.dumps(model_to_dict(spec, theta, **extra), indent=2, sort_keys=True) + "\n")


def load_model(path):
    """Inverse of :func:`save_model`; returns ``(spec, theta, data)``."""
    data = json.loads(Path(path).read_text())
    spec, theta = model_from_dict(data)
    return spec, theta, data
