"""Maximum-likelihood fitting of stencil parameters from gradient samples.

The objective is the Gaussian negative log-likelihood (up to constants)

    f(theta) = tr(S Lambda(theta)) - logdet Lambda(theta),   S = (1/M) sum_i g_i g_i^T.

Because Lambda(theta) = sum_p theta_p B_p is linear in theta, the data term
reduces to ``theta . c`` with ``c_p = tr(S B_p)`` computed once, and the
log-determinant, gradient and Hessian only need the eigenvalue grids b_p of
the basis operators.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import NotPositiveDefiniteError, OracleError
from .gmrf import FEASIBILITY_RTOL, parameter_symbols
from .tensor import circular_convolve

log = logging.getLogger(__name__)


@dataclass
class GradientSampleSet:
    """Stacked gradient estimates, shape (M, c, h, w)."""

    samples: np.ndarray
    source_count: int = 1
    directions_per_source: int = 0
    delta: float = float("nan")
    queries_used: int = 0
    rejected: list = field(default_factory=list)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim == 3:
            self.samples = self.samples[None]
        if self.samples.ndim != 4:
            raise ValueError("samples must be an (M, c, h, w) stack")
        if not self.directions_per_source:
            self.directions_per_source = len(self.samples)

    @property
    def shape(self):
        return tuple(self.samples.shape[1:])

    def __len__(self):
        return len(self.samples)


@dataclass
class FitReport:
    theta: np.ndarray
    objective_trace: list
    newton_decrements: list
    iterations: int
    converged: bool
    regularized: bool = False
    step_sizes: list = field(default_factory=list)

    def to_dict(self):
        return {
            "theta": [float(t) for t in self.theta],
            "objective_trace": [float(v) for v in self.objective_trace],
            "newton_decrements": [float(v) for v in self.newton_decrements],
            "step_sizes": [float(v) for v in self.step_sizes],
            "iterations": self.iterations,
            "converged": self.converged,
            "regularized": self.regularized,
        }


def collect_samples(oracle, images, labels, n, delta, rng_seed=None):
    """RDSA-style gradient samples ``u_j (L(x_i + delta u_j) - L(x_i)) / delta``.

    The same ``n`` Gaussian directions are used for every image, and the base
    loss of each image is queried once, so ``m * (n + 1)`` queries are spent.
    Directions whose loss is non-finite are dropped and listed in ``rejected``.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    if n < 1:
        raise ValueError("need at least one direction per image")
    images = [np.asarray(x, dtype=np.float64) for x in images]
    rng = np.random.default_rng(rng_seed)
    directions = rng.standard_normal((n,) + images[0].shape)
    samples, rejected = [], []
    start = oracle.queries_used
    for i, (x, y) in enumerate(zip(images, labels)):
        base = oracle.query(x, y)
        if not np.isfinite(base):
            raise OracleError(f"non-finite base loss for image {i}")
        for j, u in enumerate(directions):
            value = oracle.query(x + delta * u, y)
            if not np.isfinite(value):
                log.warning("rejecting sample (image %d, direction %d): loss %r", i, j, value)
                rejected.append((i, j))
                continue
            samples.append(u * ((value - base) / delta))
    if not samples:
        raise OracleError("every gradient sample was rejected")
    return GradientSampleSet(
        np.stack(samples), len(images), n, float(delta), oracle.queries_used - start, rejected
    )


def data_coefficients(samples, spec):
    """c_p = tr(S B_p) = (1/M) sum_i <g_i, B_p g_i>."""
    G = samples.samples
    M = len(G)
    return np.array(
        [np.sum(G * circular_convolve(G, spec, spec.unit(p))) / M for p in range(spec.param_count)]
    )


class NllProblem:
    """Objective, gradient and Hessian of the GMRF negative log-likelihood."""

    def __init__(self, samples, spec):
        self.spec = spec
        self.shape = samples.shape
        self.coef = data_coefficients(samples, spec)
        self.symbols = parameter_symbols(spec, self.shape).reshape(spec.param_count, -1)
        self.mean_square = float(np.mean(samples.samples**2))

    def eigs(self, theta):
        return np.asarray(theta, dtype=np.float64) @ self.symbols

    def feasible(self, theta):
        d = self.eigs(theta)
        top = d.max()
        return bool(top > 0 and d.min() > FEASIBILITY_RTOL * top)

    def _checked_eigs(self, theta):
        d = self.eigs(theta)
        if not (d.max() > 0 and d.min() > FEASIBILITY_RTOL * d.max()):
            raise NotPositiveDefiniteError(f"theta={theta} is infeasible", float(d.min()))
        return d

    def value(self, theta):
        d = self._checked_eigs(theta)
        return float(np.dot(theta, self.coef) - np.sum(np.log(d)))

    def gradient(self, theta):
        d = self._checked_eigs(theta)
        return self.coef - self.symbols @ (1.0 / d)

    def hessian(self, theta):
        d = self._checked_eigs(theta)
        scaled = self.symbols / d
        return scaled @ scaled.T

    def initial_theta(self):
        """Identity-model MLE: alpha = 1 / mean-square, other parameters zero."""
        if not self.mean_square > 0:
            raise NotPositiveDefiniteError("all gradient samples are zero; no feasible start")
        theta = np.zeros(self.spec.param_count)
        theta[self.spec.offsets[(0, 0, 0)]] = 1.0 / self.mean_square
        return theta


def nll_objective(samples, spec, theta):
    """tr(S Lambda(theta)) - logdet Lambda(theta)."""
    return NllProblem(samples, spec).value(np.asarray(theta, dtype=np.float64))


def nll_gradient(samples, spec, theta):
    return NllProblem(samples, spec).gradient(np.asarray(theta, dtype=np.float64))


def nll_hessian(samples, spec, theta):
    return NllProblem(samples, spec).hessian(np.asarray(theta, dtype=np.float64))


def fit(samples, spec, theta0=None, tol=1e-10, max_iter=100, shrink=0.5, armijo=1e-4,
        max_backtracks=60):
    """Damped Newton minimisation of :func:`nll_objective`.

    Every trial step is first shrunk until it stays inside the positive-definite
    cone and then until it satisfies the Armijo condition.  Iteration stops
    when half the squared Newton decrement drops below ``tol``.
    """
    if len(samples) == 0:
        raise ValueError("empty sample set")
    prob = NllProblem(samples, spec)
    theta = prob.initial_theta() if theta0 is None else np.array(theta0, dtype=np.float64)
    if not prob.feasible(theta):
        raise NotPositiveDefiniteError("starting point is infeasible")

    f = prob.value(theta)
    trace, decrements, steps = [f], [], []
    converged = regularized = False
    for it in range(1, max_iter + 1):
        grad = prob.gradient(theta)
        hess = prob.hessian(theta)
        try:
            chol = np.linalg.cholesky(hess)
            if np.linalg.cond(hess) > 1e14:
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            ridge = 1e-10 * np.trace(hess) / len(hess) + 1e-300
            log.warning("Hessian numerically singular; adding ridge %.3g", ridge)
            chol = np.linalg.cholesky(hess + ridge * np.eye(len(hess)))
            regularized = True
        step = -np.linalg.solve(chol.T, np.linalg.solve(chol, grad))
        lam2 = float(-grad @ step)
        decrements.append(lam2)
        if lam2 / 2 < tol:
            converged = True
            break
        t = 1.0
        for _ in range(max_backtracks):
            trial = theta + t * step
            if prob.feasible(trial):
                f_trial = prob.value(trial)
                if f_trial <= f + armijo * t * (grad @ step):
                    break
            t *= shrink
        else:
            log.warning("line search failed at iteration %d", it)
            break
        theta, f = trial, f_trial
        trace.append(f)
        steps.append(t)
    return FitReport(theta, trace, decrements, len(steps), converged, regularized, steps)
