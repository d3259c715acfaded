"""Mean, centering, variance and standardization of a single vector.

Every vector ``v`` in R^n (n >= 2, non-constant) splits orthogonally as

    v = gamma * N(v) + beta * e_n

where ``e_n`` is the all-ones vector, ``beta`` the mean, ``gamma`` the
population standard deviation and ``N(v)`` the standardized vector, which
sits on the radius-sqrt(n) sphere inside the hyperplane orthogonal to
``e_n``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, DimensionError
from .tensor import as_tensor


@dataclass(frozen=True)
class Decomposition:
    gamma: float
    beta: float
    direction: np.ndarray
    n: int

    def reconstruct(self):
        return self.gamma * self.direction + self.beta * np.ones(self.n)


def _vector(v, min_len=1):
    v = as_tensor(v, ndim=1)
    if v.shape[0] < min_len:
        raise DimensionError(f"need at least {min_len} components, got {v.shape[0]}")
    return v


def mean_vector(v):
    """Return ``(mean, mean * e_n)``."""
    v = _vector(v)
    mean = float(np.mean(v))
    return mean, np.full(v.shape[0], mean)


def center(v):
    """Project ``v`` onto the hyperplane orthogonal to ``e_n``."""
    v = _vector(v)
    return v - np.mean(v)


def variance(v):
    v = _vector(v)
    c = center(v)
    return float(c @ c) / v.shape[0]


def standardize(v, eps=0.0):
    """Standardize ``v`` to zero mean and norm sqrt(n).

    ``eps`` enters under the square root as ``||v - mean||^2 + n * eps^2``,
    so ``eps = 0`` is the exact sphere map. With ``eps = 0`` a constant
    vector has no direction and raises :class:`DegenerateInputError`.
    """
    v = _vector(v)
    n = v.shape[0]
    if n < 2:
        raise DimensionError("standardization needs n >= 2")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    c = center(v)
    sq = float(c @ c)
    if sq == 0.0 and eps == 0.0:
        raise DegenerateInputError("zero-variance vector has no standardized direction")
    return np.sqrt(n) * c / np.sqrt(sq + n * eps * eps)


def decompose(v):
    v = _vector(v)
    n = v.shape[0]
    direction = standardize(v, 0.0)
    c = center(v)
    gamma = float(np.sqrt(c @ c / n))
    beta = float(np.mean(v))
    return Decomposition(gamma=gamma, beta=beta, direction=direction, n=n)


def centering_projector(n):
    """Explicit ``I_n - e_n e_n^T / n``; used by checks, not by the fast path."""
    return np.eye(n) - np.ones((n, n)) / n
