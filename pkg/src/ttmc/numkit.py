"""Dense factorizations, Krylov kernels and the brute-force stationary oracle."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.sparse import csr_array
from scipy.sparse.csgraph import connected_components

log = logging.getLogger(__name__)

PIVOT_TOL = 1e-12


class NotIrreducibleError(ValueError):
    """Raised when the oracle system is numerically singular."""


class LinearMap:
    """A square linear map given by a callable.

    Parameters
    ----------
    dim : int
        Dimension of the domain (and range).
    apply : callable
        Maps a vector of length ``dim`` to a vector of length ``dim``.
    dense : ndarray, optional
        Explicit matrix, when available.
    """

    def __init__(self, dim, apply, dense=None):
        self.dim = int(dim)
        self._apply = apply
        self.dense = dense

    @classmethod
    def from_dense(cls, a):
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("LinearMap needs a square matrix")
        return cls(a.shape[0], lambda v: a @ v, dense=a)

    def __call__(self, v):
        return self._apply(v)

    def to_dense(self):
        if self.dense is not None:
            return self.dense
        eye = np.eye(self.dim)
        return np.column_stack([self(eye[:, j]) for j in range(self.dim)])

    def probe_symmetric(self, rng=None, pairs=3, tol=1e-8):
        """Spot check ``<u, Mv> = <Mu, v>`` on random pairs (relative)."""
        rng = np.random.default_rng(rng)
        for _ in range(pairs):
            u = rng.standard_normal(self.dim)
            v = rng.standard_normal(self.dim)
            mu, mv = self(u), self(v)
            scale = np.linalg.norm(mu) * np.linalg.norm(v) + np.linalg.norm(mv) * np.linalg.norm(u)
            if abs(u @ mv - mu @ v) > tol * max(scale, 1e-300):
                return False
        return True

    def probe_linear(self, rng=None, tol=1e-12):
        rng = np.random.default_rng(rng)
        u = rng.standard_normal(self.dim)
        v = rng.standard_normal(self.dim)
        a = rng.standard_normal()
        lhs = self(u + a * v)
        rhs = self(u) + a * self(v)
        return np.linalg.norm(lhs - rhs) <= tol * max(np.linalg.norm(lhs) + np.linalg.norm(rhs), 1e-300)


def dense_solve(a, b):
    """Solve ``a x = b`` by pivoted LU; least squares when LU finds singularity."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"dense_solve needs a square matrix, got {a.shape}")
    if b.shape[0] != a.shape[0]:
        raise ValueError(f"right-hand side of length {b.shape[0]} for a {a.shape} matrix")
    if a.shape[0] == 0:
        return b.copy()
    with warnings.catch_warnings():
        # exact singularity is detected below and handled by least squares
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu, piv = sla.lu_factor(a, check_finite=False)
    diag = np.abs(np.diag(lu))
    if diag.min() <= PIVOT_TOL * max(diag.max(), 1e-300):
        log.debug("LU pivot below tolerance, falling back to least squares")
        x, *_ = sla.lstsq(a, b, lapack_driver="gelsy", check_finite=False)
        return x
    return sla.lu_solve((lu, piv), b, check_finite=False)


@dataclass
class MinresResult:
    x: np.ndarray
    converged: bool
    iterations: int
    residual: float
    status: str = "ok"
    history: list = field(default_factory=list)


def minres(op, b, tol=1e-10, maxit=None, x0=None):
    """Unpreconditioned MINRES for symmetric (possibly indefinite or singular) maps.

    Returns the last iterate together with the estimated residual norm.  The
    iteration stops when ``||op(x) - b|| <= tol * ||b||``.  NaNs end the
    iteration with ``status="breakdown"`` rather than raising.
    """
    b = np.asarray(b, dtype=np.float64)
    n = b.shape[0]
    maxit = 5 * n if maxit is None else maxit
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64)
    bnorm = np.linalg.norm(b)
    r1 = b - op(x) if x0 is not None else b.copy()
    beta1 = np.linalg.norm(r1)
    if bnorm == 0.0 and x0 is None:
        return MinresResult(np.zeros(n), True, 0, 0.0)
    target = tol * bnorm
    history = [beta1]
    if beta1 <= target:
        return MinresResult(x, True, 0, beta1, history=history)

    # Lanczos with Givens rotations (Paige & Saunders)
    r_prev = r1.copy()
    r_cur = r1.copy()
    y = r1.copy()
    beta = beta1
    beta_old = 0.0
    dbar = 0.0
    eps_k = 0.0
    phibar = beta1
    cs, sn = -1.0, 0.0
    w = np.zeros(n)
    w2 = np.zeros(n)
    status = "maxit"
    it = 0
    for it in range(1, maxit + 1):
        v = y / beta
        y = op(v)
        if it >= 2:
            y = y - (beta / beta_old) * r_prev
        alpha = v @ y
        y = y - (alpha / beta) * r_cur
        r_prev, r_cur = r_cur, y
        beta_old = beta
        beta = np.linalg.norm(y)
        eps_old = eps_k
        delta = cs * dbar + sn * alpha
        gbar = sn * dbar - cs * alpha
        eps_k = sn * beta
        dbar = -cs * beta
        gamma = np.hypot(gbar, beta)
        if not np.isfinite(gamma) or not np.isfinite(alpha):
            status = "breakdown"
            break
        gamma = max(gamma, np.finfo(float).eps)
        cs, sn = gbar / gamma, beta / gamma
        phi = cs * phibar
        phibar = sn * phibar
        w1, w2 = w2, w
        w = (v - eps_old * w1 - delta * w2) / gamma
        x = x + phi * w
        history.append(abs(phibar))
        if not np.all(np.isfinite(x)):
            status = "breakdown"
            break
        if abs(phibar) <= target or beta == 0.0:
            status = "ok"
            break
    if status == "breakdown":
        return MinresResult(x, False, it, float("nan"), status, history)
    res = float(np.linalg.norm(op(x) - b))
    converged = res <= target
    status = "ok" if converged else "maxit"
    return MinresResult(x, bool(converged), it, res, status, history)


def gmres_dense(op, b, x0=None, steps=10):
    """Non-restarted GMRES with ``steps`` Arnoldi steps (modified Gram-Schmidt)."""
    if steps < 1:
        raise ValueError("steps must be at least 1")
    b = np.asarray(b, dtype=np.float64)
    n = b.shape[0]
    x0 = np.zeros(n) if x0 is None else np.asarray(x0, dtype=np.float64)
    r0 = b - op(x0)
    beta = np.linalg.norm(r0)
    if beta == 0.0:
        return x0.copy()
    m = min(steps, n)
    V = np.zeros((n, m + 1))
    H = np.zeros((m + 1, m))
    V[:, 0] = r0 / beta
    k = 0
    for j in range(m):
        w = op(V[:, j])
        for i in range(j + 1):
            H[i, j] = V[:, i] @ w
            w = w - H[i, j] * V[:, i]
        H[j + 1, j] = np.linalg.norm(w)
        k = j + 1
        if H[j + 1, j] <= 1e-14 * beta:
            break
        V[:, j + 1] = w / H[j + 1, j]
    e1 = np.zeros(k + 1)
    e1[0] = beta
    y, *_ = np.linalg.lstsq(H[: k + 1, :k], e1, rcond=None)
    return x0 + V[:, :k] @ y


def dense_stationary(a):
    """Stationary vector of an irreducible chain from its transposed generator.

    Replaces the last row of ``a`` by ones and solves with the last unit
    vector as right-hand side.
    """
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError("square matrix expected")
    if n == 1:
        return np.ones(1)
    m = a.copy()
    m[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu, piv = sla.lu_factor(m, check_finite=False)
    diag = np.abs(np.diag(lu))
    if diag.min() <= PIVOT_TOL * max(diag.max(), 1e-300):
        raise NotIrreducibleError("replaced system is numerically singular; chain is not irreducible")
    return sla.lu_solve((lu, piv), rhs, check_finite=False)


def strongly_connected(pattern):
    """True iff the directed graph of off-diagonal nonzeros is strongly connected."""
    pattern = csr_array(pattern)
    n = pattern.shape[0]
    if pattern.shape != (n, n):
        raise ValueError("square pattern expected")
    if n <= 1:
        return True
    ncomp, _ = connected_components(pattern, directed=True, connection="strong")
    return ncomp == 1
