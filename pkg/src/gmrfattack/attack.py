"""One-step l-infinity attacks driven by estimated or exact gradients."""

from dataclasses import dataclass, field

import numpy as np

from .basis import low_frequency_sequence
from .diagnostics import cosine_similarity, normalized_mse
from .gmrf import GmrfModel, identity_stencil
from .oracle import checked_loss
from .posterior import ObservationSet


@dataclass
class AttackConfig:
    epsilon: float
    m: int
    delta1: float
    sigma2: float = 1.0
    direction_source: str = "fft-basis"
    basis_kinds: str = "cos"
    model: GmrfModel | None = None
    clip_range: tuple = (0.0, 1.0)
    rng_seed: int | None = None

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.m < 1:
            raise ValueError("need at least one query direction")
        if self.delta1 <= 0:
            raise ValueError("delta1 must be positive")
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        if self.direction_source not in ("fft-basis", "gaussian"):
            raise ValueError(f"unknown direction source {self.direction_source!r}")


@dataclass
class AttackOutcome:
    adversarial: np.ndarray
    gradient_estimate: np.ndarray | None
    queries_used: int
    success: bool | None = None
    degenerate: bool = False
    cosine: float | None = None
    mse: float | None = None
    info: dict = field(default_factory=dict)

    def record(self):
        """JSON-friendly summary without the tensors."""
        return {
            "success": self.success,
            "queries_used": self.queries_used,
            "degenerate": self.degenerate,
            "cosine": self.cosine,
            "mse": self.mse,
            **self.info,
        }


def fgsm_step(x, direction, epsilon, clip_range=(0.0, 1.0)):
    """x + epsilon * sign(direction), clipped to the box; sign(0) = 0."""
    adv = x + epsilon * np.sign(direction)
    if clip_range is not None:
        adv = np.clip(adv, clip_range[0], clip_range[1])
    return adv


def finish_attack(oracle, x, y, g_hat, epsilon, clip_range, queries, true_gradient):
    degenerate = g_hat is not None and not np.any(g_hat)
    adv = fgsm_step(x, g_hat, epsilon, clip_range)
    pred = oracle.predict(adv) if oracle is not None else None
    out = AttackOutcome(adv, g_hat, queries, None if pred is None else bool(pred != y), degenerate)
    if true_gradient is not None and g_hat is not None:
        out.cosine = cosine_similarity(g_hat, true_gradient)
        out.mse = normalized_mse(g_hat, true_gradient)
    return out


def query_directions(shape, cfg):
    """Unit-norm perturbation directions, shape (m, c, h, w)."""
    if cfg.direction_source == "fft-basis":
        return low_frequency_sequence(shape, cfg.m, cfg.basis_kinds)
    z = np.random.default_rng(cfg.rng_seed).standard_normal((cfg.m,) + tuple(shape))
    return z / np.linalg.norm(z.reshape(cfg.m, -1), axis=1)[:, None, None, None]


def estimate_gradient(oracle, x, y, cfg):
    """Posterior-mean gradient from ``m + 1`` loss queries; returns (g_hat, observations)."""
    x = np.asarray(x, dtype=np.float64)
    model = cfg.model or GmrfModel(identity_stencil(), [1.0], x.shape)
    base = checked_loss(oracle, x, y)
    obs = ObservationSet(model, cfg.sigma2, base)
    for z in query_directions(x.shape, cfg):
        step = cfg.delta1 * z
        obs.add(step, checked_loss(oracle, x + step, y) - base)
    return obs.mean(), obs


def bb_fgsm(oracle, x, y, cfg, true_gradient=None):
    """Black-box FGSM using the GMRF posterior mean as the gradient."""
    x = np.asarray(x, dtype=np.float64)
    g_hat, obs = estimate_gradient(oracle, x, y, cfg)
    return finish_attack(oracle, x, y, g_hat, cfg.epsilon, cfg.clip_range, len(obs) + 1, true_gradient)


def rdsa_gradient(oracle, x, y, m, delta, rng_seed=None):
    """(1/m) sum_k z_k (L(x + delta z_k) - L(x)) / delta with Gaussian z_k."""
    if m < 1 or delta <= 0:
        raise ValueError("need m >= 1 and delta > 0")
    x = np.asarray(x, dtype=np.float64)
    z = np.random.default_rng(rng_seed).standard_normal((m,) + x.shape)
    base = checked_loss(oracle, x, y)
    diffs = np.array([checked_loss(oracle, x + delta * zk, y) - base for zk in z])
    return np.tensordot(diffs / delta, z, axes=1) / m


def rdsa_fgsm(oracle, x, y, epsilon, m, delta, rng_seed=None, clip_range=(0.0, 1.0), true_gradient=None):
    x = np.asarray(x, dtype=np.float64)
    g_hat = rdsa_gradient(oracle, x, y, m, delta, rng_seed)
    return finish_attack(oracle, x, y, g_hat, epsilon, clip_range, m + 1, true_gradient)


def white_box_fgsm(clf, x, y, epsilon, clip_range=(0.0, 1.0)):
    """FGSM with the exact input gradient; spends no oracle queries."""
    x = np.asarray(x, dtype=np.float64)
    g = clf.input_gradient(x, y)
    adv = fgsm_step(x, g, epsilon, clip_range)
    out = AttackOutcome(adv, g, 0, evaluate_success(clf, adv, y), not np.any(g))
    out.cosine, out.mse = 1.0, 0.0
    return out


def evaluate_success(clf, adversarial, y):
    return bool(clf.predict(adversarial) != y)
