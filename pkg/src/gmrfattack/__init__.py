"""Black-box gradient estimation with circulant Gaussian Markov random field priors."""

from .attack import AttackConfig, bb_fgsm, estimate_gradient, rdsa_fgsm, white_box_fgsm
from .gmrf import GmrfModel, StencilSpec, preset
from .mle import collect_samples, fit
from .posterior import ObservationSet

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "GmrfModel",
    "ObservationSet",
    "StencilSpec",
    "bb_fgsm",
    "collect_samples",
    "estimate_gradient",
    "fit",
    "preset",
    "rdsa_fgsm",
    "white_box_fgsm",
]
