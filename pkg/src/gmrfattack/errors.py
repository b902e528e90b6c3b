"""Exception types raised across the package."""

import numpy as np


class ShapeMismatchError(ValueError):
    """A tensor or stencil offset does not fit the requested grid shape."""


class StencilAmbiguityError(ValueError):
    """Two distinct stencil offsets wrap onto the same grid index."""


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """A precision operator has a non-positive eigenvalue."""

    def __init__(self, message, min_eig=None):
        super().__init__(message)
        self.min_eig = min_eig


class ConditioningError(np.linalg.LinAlgError):
    """Factorization of the observation inner matrix failed."""

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class UndefinedPhaseError(ValueError):
    """A sine basis vector was requested at a self-conjugate frequency."""


class CapacityError(ValueError):
    """More basis vectors were requested than the grid supports."""


class OracleError(RuntimeError):
    """A loss oracle returned an unusable value."""
