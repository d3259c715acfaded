"""Dense float64 tensors and the small linear-algebra kernels built on them.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Data matrices
are feature-major: an ``n x B`` array holds ``B`` samples as columns, so a
layer is ``W @ X``.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DimensionError, ValidationError

_EPS = np.finfo(np.float64).eps


def as_tensor(data, checked=True, ndim=None):
    """Convert ``data`` to a float64 array, rejecting NaN/Inf when ``checked``."""
    arr = np.asarray(data, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise DimensionError(f"expected a {ndim}-D tensor, got shape {arr.shape}")
    if arr.size == 0 or any(d <= 0 for d in arr.shape):
        raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
    if checked and not np.all(np.isfinite(arr)):
        raise ValidationError("tensor contains non-finite values")
    return arr


def matmul(a, b):
    a = as_tensor(a, ndim=2)
    b = as_tensor(b, ndim=2)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"inner extents differ: {a.shape} @ {b.shape}")
    return a @ b


@dataclass(frozen=True)
class EigenResult:
    """Eigenvalues sorted descending with matching orthonormal eigenvector columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    sweeps: int = 0

    def residuals(self, a):
        """``||A q_i - lambda_i q_i||_2`` for every pair."""
        q = self.eigenvectors
        return np.linalg.norm(a @ q - q * self.eigenvalues, axis=0)


def _round_robin(n):
    # Tournament schedule: n - 1 rounds of n/2 disjoint pairs covering
    # every (p, q) exactly once. Odd n gets a dummy player that sits out.
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p >= 0 and q >= 0]
        rounds.append((np.array([p for p, _ in pairs], dtype=np.intp),
                       np.array([q for _, q in pairs], dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def is_symmetric(a, tol=1e-10):
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        return False
    scale = max(1.0, float(np.max(np.abs(a))))
    return bool(np.max(np.abs(a - a.T)) <= tol * scale)


def sym_eigen(a, max_sweeps=100):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits every off-diagonal pair once. Pairs are grouped into
    rounds of disjoint index pairs; rotations inside a round touch disjoint
    rows and columns, so they are applied together.
    """
    a = as_tensor(a, ndim=2)
    n = a.shape[0]
    if a.shape[1] != n:
        raise DimensionError(f"matrix must be square, got {a.shape}")
    if not is_symmetric(a):
        raise ValidationError("matrix is not symmetric to 1e-10")
    A = 0.5 * (a + a.T)
    V = np.eye(n)
    norm = np.linalg.norm(A)
    if n == 1 or norm == 0.0:
        return EigenResult(np.diag(A).copy(), V, 0)

    rounds = _round_robin(n)
    target = (_EPS * norm) ** 2
    sweeps = 0
    while sweeps < max_sweeps:
        off = np.sum((A - np.diag(np.diag(A))) ** 2)
        if off <= target:
            break
        sweeps += 1
        for P, Q in rounds:
            apq = A[P, Q]
            active = np.abs(apq) > 1e-300
            if not np.any(active):
                continue
            P, Q, apq = P[active], Q[active], apq[active]
            with np.errstate(over="ignore"):
                tau = (A[Q, Q] - A[P, P]) / (2.0 * apq)
                t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.hypot(1.0, tau))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            colP, colQ = A[:, P].copy(), A[:, Q]
            A[:, P] = c * colP - s * colQ
            A[:, Q] = s * colP + c * colQ
            rowP, rowQ = A[P, :].copy(), A[Q, :]
            A[P, :] = c[:, None] * rowP - s[:, None] * rowQ
            A[Q, :] = s[:, None] * rowP + c[:, None] * rowQ
            A[P, Q] = 0.0
            A[Q, P] = 0.0
            vP, vQ = V[:, P].copy(), V[:, Q]
            V[:, P] = c * vP - s * vQ
            V[:, Q] = s * vP + c * vQ

    w = np.diag(A).copy()
    order = np.argsort(-w, kind="stable")
    return EigenResult(w[order], V[:, order], sweeps)


class SpectralEstimate(NamedTuple):
    sigma: float
    u: np.ndarray
    v: np.ndarray
    degenerate: bool
    iterations: int


def power_iteration(w, iters=100, seed=0, tol=0.0):
    """Estimate the largest singular value of ``w``.

    Runs at most ``iters`` rounds of ``v <- W^T W v``; with ``tol > 0`` it
    stops early once the unit vector ``v`` moves by at most ``tol``. Returns the estimate with
    the left/right singular vector approximations ``u``, ``v``. A zero matrix
    gives ``sigma = 0`` and ``degenerate = True``.
    """
    w = as_tensor(w, ndim=2)
    if iters < 1:
        raise ValueError("iters must be positive")
    m, n = w.shape
    if not np.any(w):
        return SpectralEstimate(0.0, np.zeros(m), np.zeros(n), True, 0)

    v = seeded_rng(seed).standard_normal(n)
    v /= np.linalg.norm(v)
    done = 0
    for done in range(1, iters + 1):
        u = w @ v
        v_next = w.T @ u
        nv = np.linalg.norm(v_next)
        if nv == 0.0:
            # start vector orthogonal to the row space; restart deterministically
            v = np.ones(n) / np.sqrt(n)
            continue
        v_next /= nv
        moved = float(np.linalg.norm(v_next - v))
        v = v_next
        if tol > 0 and moved <= tol:
            break
    sigma = float(np.linalg.norm(w @ v))
    u = w @ v
    if sigma > 0:
        u = u / sigma
    return SpectralEstimate(sigma, u, v, sigma == 0.0, done)


def seeded_rng(seed):
    """Deterministic generator (PCG64) for uniform and normal draws."""
    return np.random.default_rng(int(seed))
