"""Normalization methods as configurations of one standardization kernel.

Data-based methods (BN, LN, IN, GN) differ only in which axes the
standardization reduces over. Weight-based methods (WN, CWN, WS, SN) map
weight rows or matrices directly onto a sphere. The covariance helpers
expose how BN acts on the weights through the batch covariance.
"""

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (BatchTooSmallError, ConfigurationError,
                     DegenerateInputError, DimensionError, KernelCollapse,
                     ValidationError)
from .tensor import as_tensor, is_symmetric, power_iteration, sym_eigen


class Method(str, enum.Enum):
    BATCH = "bn"
    LAYER = "ln"
    INSTANCE = "in"
    GROUP = "gn"
    WEIGHT = "wn"
    CENTERED_WEIGHT = "cwn"
    WEIGHT_STANDARDIZATION = "ws"
    SPECTRAL = "sn"
    NONE = "none"

    @property
    def data_based(self):
        return self in (Method.BATCH, Method.LAYER, Method.INSTANCE, Method.GROUP)

    @property
    def weight_based(self):
        return self in (Method.WEIGHT, Method.CENTERED_WEIGHT,
                        Method.WEIGHT_STANDARDIZATION, Method.SPECTRAL)


@dataclass
class NormalizerSpec:
    """Which normalizer, its epsilon, affine parameters and running statistics.

    ``channels`` views an ``m``-wide activation as ``channels x (m / channels)``
    for IN and GN; ``None`` means one unit per channel. ``groups`` is the GN
    group count. Running statistics are only used by BN in eval mode.
    """

    method: Method = Method.NONE
    eps: float = 1e-5
    groups: Optional[int] = None
    channels: Optional[int] = None
    gamma: Optional[np.ndarray] = None
    beta: Optional[np.ndarray] = None
    mode: str = "train"
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None
    momentum: float = 0.1
    sn_iters: int = 5000

    def __post_init__(self):
        self.method = Method(self.method)
        if self.eps < 0:
            raise ConfigurationError("eps must be non-negative")
        if self.mode not in ("train", "eval"):
            raise ConfigurationError(f"mode must be 'train' or 'eval', got {self.mode!r}")
        if self.method is Method.GROUP and (self.groups is None or self.groups < 1):
            raise ConfigurationError("GroupNorm needs a positive group count")

    def channel_view(self, m):
        """Return ``(C, L, g)`` for viewing ``m`` units as channels x positions."""
        C = m if self.channels is None else self.channels
        if C < 1 or m % C:
            raise ConfigurationError(f"{C} channels do not divide width {m}")
        L = m // C
        g = C if self.method is Method.INSTANCE else (self.groups or 1)
        if C % g:
            raise ConfigurationError(f"group count {g} does not divide {C} channels")
        return C, L, g

    def init_affine(self, m):
        if self.gamma is None:
            self.gamma = np.ones(m)
        if self.beta is None:
            self.beta = np.zeros(m)
        if self.gamma.shape != (m,) or self.beta.shape != (m,):
            raise DimensionError(f"affine parameters must have {m} entries")
        if self.method is Method.BATCH:
            if self.running_mean is None:
                self.running_mean = np.zeros(m)
            if self.running_var is None:
                self.running_var = np.ones(m)
        return self

    def copy(self):
        def c(a):
            return None if a is None else a.copy()
        return NormalizerSpec(self.method, self.eps, self.groups, self.channels,
                              c(self.gamma), c(self.beta), self.mode,
                              c(self.running_mean), c(self.running_var),
                              self.momentum, self.sn_iters)


# ---------------------------------------------------------------------------
# the unified standardization kernel


class AxisLayout:
    """Moves the reduced axes of a tensor to the back and flattens them."""

    def __init__(self, shape, reduce_axes):
        ndim = len(shape)
        axes = sorted({a % ndim for a in reduce_axes})
        if not axes:
            raise DimensionError("reduce_axes must be non-empty")
        self.shape = tuple(shape)
        self.reduce_axes = axes
        self.kept_axes = [a for a in range(ndim) if a not in axes]
        self.perm = self.kept_axes + axes
        self.inv_perm = np.argsort(self.perm)
        self.kept_shape = tuple(shape[a] for a in self.kept_axes)
        self.k = int(np.prod([shape[a] for a in axes]))

    def to_slices(self, t):
        return np.transpose(t, self.perm).reshape(-1, self.k)

    def from_slices(self, s):
        moved = s.reshape(self.kept_shape + tuple(self.shape[a] for a in self.reduce_axes))
        return np.transpose(moved, self.inv_perm)

    def slice_index(self, i):
        return np.unravel_index(i, self.kept_shape) if self.kept_shape else ()


def standardize_slices(s, eps):
    """Standardize each row of a 2-D array; returns ``(xhat, inv_std)``."""
    if s.shape[1] == 2:
        # exact antisymmetric centering: the two deviations are +-(x0 - x1) / 2
        half = 0.5 * (s[:, :1] - s[:, 1:])
        c = np.concatenate([half, -half], axis=1)
    else:
        c = s - s.mean(axis=1, keepdims=True)
    var = np.mean(c * c, axis=1)
    if eps == 0.0:
        bad = np.flatnonzero(var == 0.0)
        if bad.size:
            raise DegenerateInputError(
                f"slice {int(bad[0])} has zero variance", index=int(bad[0]))
    std = np.sqrt(var + eps * eps)
    return c / std[:, None], 1.0 / std


def standardize_slices_backward(grad, xhat, inv_std):
    """Gradient through ``standardize_slices`` for each row."""
    g_mean = grad.mean(axis=1, keepdims=True)
    gx_mean = np.mean(grad * xhat, axis=1, keepdims=True)
    return inv_std[:, None] * (grad - g_mean - xhat * gx_mean)


def _standardize_along(t, reduce_axes, eps):
    t = as_tensor(t)
    layout = AxisLayout(t.shape, reduce_axes)
    if layout.k < 2:
        raise DimensionError(
            f"reduced extent {layout.k} < 2: standardization undefined")
    try:
        xhat, inv = standardize_slices(layout.to_slices(t), eps)
    except DegenerateInputError as exc:
        idx = tuple(int(i) for i in layout.slice_index(exc.index))
        raise DegenerateInputError(f"slice {idx} has zero variance", index=idx) from None
    return layout, xhat, inv


def standardize_along(t, reduce_axes, eps=0.0):
    """Standardize every slice spanned by ``reduce_axes`` independently."""
    layout, xhat, _ = _standardize_along(t, reduce_axes, eps)
    return layout.from_slices(xhat)


def _affine(x, spec, unit_axis, shape):
    gamma = np.ones(shape) if spec.gamma is None else np.asarray(spec.gamma, float)
    beta = np.zeros(shape) if spec.beta is None else np.asarray(spec.beta, float)
    if gamma.shape != shape or beta.shape != shape:
        raise DimensionError(f"affine parameters must have shape {shape}")
    expand = (slice(None),) * len(shape) + (None,) * (x.ndim - unit_axis - len(shape))
    return gamma[expand] * x + beta[expand]


# ---------------------------------------------------------------------------
# data-based methods


def batch_norm(Y, spec):
    """BN of an ``m x B`` pre-activation: each unit standardized over the batch."""
    Y = as_tensor(Y, ndim=2)
    m, B = Y.shape
    if spec.mode == "eval":
        rm = np.zeros(m) if spec.running_mean is None else spec.running_mean
        rv = np.ones(m) if spec.running_var is None else spec.running_var
        xhat = (Y - rm[:, None]) / np.sqrt(rv[:, None] + spec.eps ** 2)
    else:
        if B < 2:
            raise BatchTooSmallError(f"batch norm needs B >= 2 in train mode, got {B}")
        xhat = standardize_along(Y, (1,), spec.eps)
    return _affine(xhat, spec, 0, (m,))


def update_running_stats(spec, Y):
    """Exponential moving average of the batch mean/variance of ``Y`` (m x B)."""
    mu = Y.mean(axis=1)
    var = Y.var(axis=1)
    mom = spec.momentum
    spec.running_mean = (1 - mom) * spec.running_mean + mom * mu
    spec.running_var = (1 - mom) * spec.running_var + mom * var


def layer_norm(Y, spec):
    """LN of an ``m x B`` pre-activation: each sample standardized over units."""
    Y = as_tensor(Y, ndim=2)
    m = Y.shape[0]
    if m < 2:
        raise DimensionError("layer norm needs at least 2 units")
    return _affine(standardize_along(Y, (0,), spec.eps), spec, 0, (m,))


def group_norm(t, g, spec):
    """GN of a ``C x L x B`` tensor with ``g`` groups of channels.

    Affine parameters may be per channel ``(C,)`` or per unit ``(C, L)``.
    """
    t = as_tensor(t, ndim=3)
    C, L, B = t.shape
    if g < 1 or C % g:
        raise ConfigurationError(f"group count {g} does not divide {C} channels")
    grouped = t.reshape(g, C // g, L, B)
    xhat = standardize_along(grouped, (1, 2), spec.eps).reshape(C, L, B)
    affine_shape = (C,) if spec.gamma is None or np.ndim(spec.gamma) == 1 else (C, L)
    return _affine(xhat, spec, 0, affine_shape)


def instance_norm(t, spec):
    t = as_tensor(t, ndim=3)
    if t.shape[1] < 2:
        raise DegenerateInputError("instance norm needs at least 2 positions per channel")
    return group_norm(t, t.shape[0], spec)


# ---------------------------------------------------------------------------
# weight-based methods


def weight_norm(V, g):
    V = as_tensor(V, ndim=1)
    nv = np.linalg.norm(V)
    if nv == 0.0:
        raise DegenerateInputError("weight norm of a zero vector")
    return g * V / nv


def weight_standardize(W_i, variant="ws"):
    """WS (radius sqrt(n)) or CWN (unit radius) of one weight row."""
    W_i = as_tensor(W_i, ndim=1)
    n = W_i.shape[0]
    if n < 2:
        raise DimensionError("weight standardization needs n >= 2")
    c = W_i - W_i.mean()
    nc = np.linalg.norm(c)
    if nc == 0.0:
        raise DegenerateInputError("constant weight row has no centered direction")
    cwn = c / nc
    if variant == "cwn":
        return cwn
    if variant == "ws":
        return np.sqrt(n) * cwn
    raise ConfigurationError(f"unknown variant {variant!r}")


def spectral_normalize(W, iters=5000, seed=0):
    W = as_tensor(W, ndim=2)
    est = power_iteration(W, iters=iters, seed=seed, tol=1e-14)
    if est.degenerate:
        raise DegenerateInputError("spectral normalization of a zero matrix")
    return W / est.sigma


# ---------------------------------------------------------------------------
# covariance geometry


@dataclass(frozen=True)
class KernelReport:
    rank: int
    kernel_dim: int
    kernel_basis: np.ndarray
    eigen_threshold: float
    eigenvalues: np.ndarray = field(repr=False, default=None)


@dataclass(frozen=True)
class EffectiveWeight:
    w_prime: np.ndarray
    b_prime: np.ndarray


def covariance(X):
    """Population covariance of the rows of an ``n x B`` data matrix."""
    X = as_tensor(X, ndim=2)
    Xc = X - X.mean(axis=1, keepdims=True)
    S = Xc @ Xc.T / X.shape[1]
    return 0.5 * (S + S.T)


def kernel_analysis(sigma, threshold=1e-10):
    """Rank and kernel basis of a PSD matrix.

    Eigenvalues above ``threshold * lambda_max`` count toward the rank; the
    eigenvectors of the remaining ones span the kernel.
    """
    sigma = as_tensor(sigma, ndim=2)
    if not is_symmetric(sigma):
        raise ValidationError("covariance must be symmetric")
    n = sigma.shape[0]
    eig = sym_eigen(sigma)
    lam_max = max(float(eig.eigenvalues[0]), 0.0)
    if lam_max == 0.0:
        rank = 0
    else:
        rank = int(np.sum(eig.eigenvalues > threshold * lam_max))
    return KernelReport(rank=rank, kernel_dim=n - rank,
                        kernel_basis=eig.eigenvectors[:, rank:],
                        eigen_threshold=threshold, eigenvalues=eig.eigenvalues)


def effective_weight(W_i, X, gamma, beta, collapse_tol=1e-10):
    """Fold BN batch statistics into an effective weight and bias.

    ``BN(W_i X) = w_prime @ X + b_prime``. Raises :class:`KernelCollapse`
    when ``W_i`` is (numerically) annihilated by the batch covariance.
    """
    W_i = as_tensor(W_i, ndim=1)
    X = as_tensor(X, ndim=2)
    if X.shape[0] != W_i.shape[0]:
        raise DimensionError(f"weight of length {W_i.shape[0]} vs data {X.shape}")
    B = X.shape[1]
    S = covariance(X)
    q = float(W_i @ S @ W_i)
    scale = float(np.trace(S)) * float(W_i @ W_i)
    if q <= collapse_tol * scale or q <= 0.0:
        raise KernelCollapse(beta, B, q)
    w_prime = gamma * W_i / np.sqrt(q)
    xbar = X.mean(axis=1)
    b_prime = np.full(B, beta - float(w_prime @ xbar))
    return EffectiveWeight(w_prime=w_prime, b_prime=b_prime)
