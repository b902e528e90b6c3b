"""Gaussian posterior over a gradient given loss-difference observations.

With prior g ~ N(0, Lambda^{-1}) and observations L = X g + noise,
noise ~ N(0, sigma^2 I), the posterior is

    g | L ~ N(A^{-1} X^T L / sigma^2, A^{-1}),     A = Lambda + X^T X / sigma^2.

A is a circulant plus a rank-m term, so it is inverted with the Woodbury
identity.  The set keeps U = Lambda^{-1} X^T and a Cholesky factor of the
m x m inner matrix  sigma^2 I + X Lambda^{-1} X^T, both grown by one column
per observation.
"""

import logging

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import ConditioningError
from .gmrf import solve_precision

log = logging.getLogger(__name__)


class ObservationSet:
    """Observations of one gradient under a fixed GMRF prior.

    Single writer: :meth:`add` mutates, the query methods only read.
    """

    def __init__(self, model, sigma2=1.0, base_loss=0.0):
        if not sigma2 > 0:
            raise ValueError("sigma2 must be positive")
        self.model = model
        self.sigma2 = float(sigma2)
        self.base_loss = float(base_loss)
        self._dirs = []
        self._U = []
        self._diffs = []
        self.inner = np.zeros((0, 0))
        self.chol = np.zeros((0, 0))
        self.ridge = 0.0

    def __len__(self):
        return len(self._diffs)

    @property
    def directions(self):
        """X as an (m, c, h, w) stack."""
        return np.array(self._dirs).reshape((len(self),) + self.model.shape)

    @property
    def U(self):
        return np.array(self._U).reshape((len(self),) + self.model.shape)

    @property
    def loss_diffs(self):
        return np.array(self._diffs, dtype=np.float64)

    def add(self, direction, loss_diff):
        """Append one observation ``loss_diff ~ <direction, g>`` and extend the factor."""
        direction = np.asarray(direction, dtype=np.float64)
        if direction.shape != self.model.shape:
            raise ValueError(f"direction shape {direction.shape} != model shape {self.model.shape}")
        loss_diff = float(loss_diff)
        if not np.isfinite(loss_diff):
            raise ValueError(f"non-finite loss difference {loss_diff}")
        x = direction.ravel()
        u = solve_precision(self.model, direction).ravel()
        cross = np.array([np.dot(d, u) for d in self._dirs])
        corner = float(np.dot(x, u)) + self.sigma2

        m = len(self)
        inner = np.empty((m + 1, m + 1))
        inner[:m, :m] = self.inner
        inner[m, :m] = inner[:m, m] = cross
        inner[m, m] = corner

        chol = np.zeros((m + 1, m + 1))
        chol[:m, :m] = self.chol
        row = solve_triangular(self.chol, cross, lower=True) if m else np.zeros(0)
        pivot = corner + self.ridge - np.dot(row, row)
        if pivot > 0 and np.isfinite(pivot):
            chol[m, :m] = row
            chol[m, m] = np.sqrt(pivot)
        else:
            chol = self._refactor(inner)

        self._dirs.append(x)
        self._U.append(u)
        self._diffs.append(loss_diff)
        self.inner, self.chol = inner, chol
        return self

    def _refactor(self, inner):
        self.ridge = 1e-12 * np.trace(inner)
        log.warning("inner matrix lost positive definiteness; refactoring with ridge %.3g", self.ridge)
        try:
            return np.linalg.cholesky(inner + self.ridge * np.eye(len(inner)))
        except np.linalg.LinAlgError as exc:
            raise ConditioningError(
                "cannot factor the observation inner matrix", condition=np.linalg.cond(inner)
            ) from exc

    def condition_estimate(self):
        if not len(self):
            return 1.0
        diag = np.diag(self.chol)
        return float((diag.max() / diag.min()) ** 2)

    def _inner_solve(self, rhs):
        out = cho_solve((self.chol, True), rhs)
        if not np.all(np.isfinite(out)):
            raise ConditioningError("inner solve produced non-finite values", self.condition_estimate())
        return out

    def _flat_U(self):
        return np.array(self._U)

    def _flat_X(self):
        return np.array(self._dirs)

    def mean(self):
        """Posterior mean U (inner^{-1} L)."""
        if not len(self):
            raise ValueError("posterior mean needs at least one observation")
        coef = self._inner_solve(self.loss_diffs)
        return (coef @ self._flat_U()).reshape(self.model.shape)

    def mean_expanded(self):
        """Posterior mean as the Woodbury expansion applied to X^T L / sigma^2."""
        if not len(self):
            raise ValueError("posterior mean needs at least one observation")
        b = (self.loss_diffs @ self._flat_X()).reshape(self.model.shape) / self.sigma2
        return self.covariance_apply(b)

    def covariance_apply(self, v):
        """(Lambda + X^T X / sigma^2)^{-1} v."""
        w = solve_precision(self.model, v)
        if not len(self):
            return w
        coef = self._inner_solve(self._flat_X() @ w.ravel())
        return w - (coef @ self._flat_U()).reshape(self.model.shape)


def add_observation(obs, direction, loss_diff):
    return obs.add(direction, loss_diff)


def posterior_mean(obs):
    return obs.mean()


def posterior_covariance_apply(obs, v):
    return obs.covariance_apply(v)
