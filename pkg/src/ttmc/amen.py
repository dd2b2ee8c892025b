"""Alternating least squares with residual enrichment (AMEn) in the TT format.

Two problems are handled.

``constrained``
    minimize ``||A x||`` subject to ``<x, 1> = 1`` (stationary vectors).  Each
    core update solves the saddle-point system
    ``[[M, e], [e^T, 0]] [g; lam] = [0; 1]`` with ``M = G^T A^T A G`` and
    ``e = G^T 1`` where ``G`` is the frame formed by all other cores.
``normal``
    minimize ``||A x - b||`` (coarse-grid corrections); each core update solves
    ``M g = G^T A^T b``.

The frames are kept orthonormal, so core updates are exact minimizers of the
global objective over the active core.  After each core update the sweep moves
on by an SVD of the core, optionally truncates, and enlarges the new frame with
a few directions taken from a low-rank approximation of the residual.

Contractions with operator cores follow the convention of :mod:`ttmc.tt`: a
core ``(r0, n, m, r1)`` has row index ``n`` and column index ``m``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .numkit import LinearMap, dense_solve, minres
from .report import SolveReport
from .tt import (
    TTOperator,
    TTTensor,
    TruncationPolicy,
    _chop,
    op_compose,
    op_round,
    op_transpose,
    tt_apply,
    tt_hadamard_ones,
    tt_norm,
    tt_ones,
    tt_orthogonalize,
    tt_random,
    tt_scale,
    tt_sum,
    tt_truncate,
    tt_zeros,
)

log = logging.getLogger(__name__)


@dataclass
class AmenConfig:
    """Settings of :func:`amen_solve`.

    ``trunc_tol`` is the relative accuracy used when the active core is split
    by an SVD on its way to the next position; ``max_rank`` caps the ranks of
    the iterate.  ``enrichment_rank = 0`` switches the enrichment off (plain
    ALS).
    """

    enrichment_rank: int = 3
    max_sweeps: int = 20
    residual_target: float = 0.0
    local_direct_threshold: int = 1000
    local_iter_tol: float = 1e-9
    local_iter_maxit: int = 1000
    trunc_tol: float = 1e-8
    max_rank: int = 10**6
    residual_sweeps: int = 2
    seed: int = 0
    time_budget: float | None = None
    condition_limit: int = 200

    def __post_init__(self):
        if self.enrichment_rank < 0:
            raise ValueError("enrichment_rank must be nonnegative")
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be at least 1")
        if self.local_direct_threshold <= 0 or self.local_iter_tol <= 0 or self.local_iter_maxit <= 0:
            raise ValueError("local solver thresholds must be positive")
        if self.trunc_tol < 0 or self.max_rank < 1 or self.residual_target < 0:
            raise ValueError("invalid truncation settings")


# ---------------------------------------------------------------------------
# environment contractions


def _left_step(env, y, a, x):
    """Extend a left environment ``(ry, ra, rx)`` by one position."""
    t = np.tensordot(env, x, axes=(2, 0))  # y0 a0 j x1
    if a is None:
        t = np.tensordot(y, t[:, 0], axes=([0, 1], [0, 1]))  # y1 x1
        return t[:, None, :]
    t = np.tensordot(t, a, axes=([1, 2], [0, 2]))  # y0 x1 i a1
    t = np.tensordot(y, t, axes=([0, 1], [0, 2]))  # y1 x1 a1
    return t.transpose(0, 2, 1)


def _right_step(env, y, a, x):
    """Extend a right environment ``(ry, ra, rx)`` by one position."""
    t = np.tensordot(x, env, axes=(2, 2))  # x0 j y1 a1
    if a is None:
        t = np.tensordot(y, t[..., 0], axes=([1, 2], [1, 2]))  # y0 x0
        return t[:, None, :]
    t = np.tensordot(a, t, axes=([2, 3], [1, 3]))  # a0 i x0 y1
    return np.tensordot(y, t, axes=([1, 2], [1, 3]))  # y0 a0 x0


def _project(left, a, g, right):
    """Local action ``(ry0, n, ry1)`` of ``<bra| a |ket>`` with ket core ``g``."""
    t = np.tensordot(left, g, axes=(2, 0))  # y0 a0 j x1
    if a is None:
        return np.tensordot(t[:, 0], right[:, 0, :], axes=(2, 1))
    t = np.tensordot(t, a, axes=([1, 2], [0, 2]))  # y0 x1 i a1
    return np.tensordot(t, right, axes=([1, 3], [2, 1]))  # y0 i y1


def _ones_env():
    return np.ones((1, 1, 1))


class _Env:
    """Cached environments of ``<bra| op |ket>`` for a moving active core.

    ``left[k]`` contracts positions ``0..k-1`` and ``right[k]`` contracts
    positions ``k..d-1``; the active core ``k`` uses ``left[k]`` and
    ``right[k + 1]``.  ``bra`` and ``ket`` are the live TTTensor objects, so
    cached entries stay valid as long as the cores they cover do not change.
    """

    def __init__(self, bra, op, ket, coef=1.0):
        self.bra, self.op, self.ket, self.coef = bra, op, ket, coef
        d = bra.d
        self.left = [None] * (d + 1)
        self.right = [None] * (d + 1)
        self.left[0] = _ones_env()
        self.right[d] = _ones_env()

    def op_core(self, k):
        return None if self.op is None else self.op.cores[k]

    def push_left(self, k):
        self.left[k + 1] = _left_step(self.left[k], self.bra.cores[k], self.op_core(k), self.ket.cores[k])

    def push_right(self, k):
        self.right[k] = _right_step(self.right[k + 1], self.bra.cores[k], self.op_core(k), self.ket.cores[k])

    def fill_right(self, stop=0):
        for k in range(self.bra.d - 1, stop - 1, -1):
            self.push_right(k)

    def fill_left(self, stop=None):
        stop = self.bra.d - 1 if stop is None else stop
        for k in range(stop):
            self.push_left(k)

    def local(self, k, left=None, right=None):
        """``coef * <bra frame| op |ket>`` at core ``k`` with the current ket core."""
        left = self.left[k] if left is None else left
        right = self.right[k + 1] if right is None else right
        return self.coef * _project(left, self.op_core(k), self.ket.cores[k], right)


# ---------------------------------------------------------------------------
# reduced problems


@dataclass
class ReducedProblem:
    """Local problem at core ``k`` of a frame-orthonormal tensor.

    Attributes
    ----------
    k : int
        Active core.
    shape : tuple
        ``(r_{k-1}, n_k, r_k)``; vectors are the C-order flattening of a core.
    op : LinearMap
        ``G^T A^T A G`` applied through core contractions.
    e_tilde : ndarray or None
        Projected ones vector ``G^T 1``.
    rhs : ndarray or None
        Projected right-hand side ``G^T A^T b``.
    dense : ndarray or None
        Explicit reduced matrix (present when ``dim`` is at most the
        assembly threshold).
    """

    k: int
    shape: tuple
    op: LinearMap
    e_tilde: np.ndarray | None = None
    rhs: np.ndarray | None = None
    dense: np.ndarray | None = None
    start: np.ndarray | None = None

    @property
    def dim(self):
        return int(np.prod(self.shape))


def _reduced_from_envs(k, x, op_core, left, right, e_tilde=None, rhs=None, assemble_limit=1000):
    shape = x.cores[k].shape

    def apply(v):
        return _project(left, op_core, v.reshape(shape), right).ravel()

    dim = int(np.prod(shape))
    dense = None
    if dim <= assemble_limit:
        dense = _assemble_reduced(left, op_core, right)
    return ReducedProblem(k, shape, LinearMap(dim, apply, dense), e_tilde, rhs, dense, x.cores[k].ravel().copy())


def _assemble_reduced(left, a, right):
    """Dense ``(dim, dim)`` reduced matrix from environments and an operator core."""
    m = np.einsum("xay,aijb,ubw->xiuyjw", left, a, right, optimize=True)
    r0, n, r1 = m.shape[:3]
    return m.reshape(r0 * n * r1, r0 * n * r1)


def _orth_ok(x, k, tol=1e-10):
    for j in range(k):
        c = x.cores[j]
        m = c.reshape(-1, c.shape[2])
        if np.linalg.norm(m.T @ m - np.eye(m.shape[1])) > tol * max(1, m.shape[1]):
            return False
    for j in range(k + 1, x.d):
        c = x.cores[j]
        m = c.reshape(c.shape[0], -1)
        if np.linalg.norm(m @ m.T - np.eye(m.shape[0])) > tol * max(1, m.shape[0]):
            return False
    return True


def normal_operator(a):
    """Compressed TT form of ``A^T A``."""
    return op_round(op_compose(op_transpose(a), a))


def build_reduced(a, x, k, rhs=None, gram=None, assemble_limit=1000):
    """Reduced problem at core ``k``.

    Parameters
    ----------
    a : TTOperator
        The operator ``A``.
    x : TTTensor
        Current iterate; cores left of ``k`` must be left-orthonormal and
        cores right of ``k`` right-orthonormal.
    rhs : TTTensor, optional
        ``b`` of the normal-equations problem; when absent the constraint
        vector is formed instead.
    gram : TTOperator, optional
        Precomputed ``A^T A``.
    """
    if not 0 <= k < x.d:
        raise ValueError(f"core index {k} out of range")
    if not _orth_ok(x, k):
        raise ValueError(f"tensor is not orthogonalized around core {k}")
    gram = normal_operator(a) if gram is None else gram
    env = _Env(x, gram, x)
    env.fill_left(k)
    env.fill_right(k + 1)
    e_tilde = b_proj = None
    if rhs is None:
        ones = tt_ones(x.modes)
        cenv = _Env(x, None, ones)
        cenv.fill_left(k)
        cenv.fill_right(k + 1)
        e_tilde = cenv.local(k).ravel()
    else:
        benv = _Env(x, op_transpose(a), rhs)
        benv.fill_left(k)
        benv.fill_right(k + 1)
        b_proj = benv.local(k).ravel()
    return _reduced_from_envs(k, x, gram.cores[k], env.left[k], env.right[k + 1], e_tilde, b_proj, assemble_limit)


# ---------------------------------------------------------------------------
# local solvers


@dataclass
class LocalSolution:
    core: np.ndarray
    multiplier: float | None
    path: str
    iterations: int
    residual: float
    converged: bool
    dim: int
    condition: float | None = None


def _cond(m):
    try:
        return float(np.linalg.cond(m))
    except np.linalg.LinAlgError:
        return float("inf")


def solve_local_constrained(rp, threshold=1000, tol=1e-10, maxit=1000, condition=False):
    """Solve the saddle system of a constrained reduced problem.

    Uses a dense factorization when ``dim <= threshold`` and MINRES on the
    symmetric indefinite saddle matrix otherwise.  The constraint row is
    rescaled to the size of the reduced matrix for MINRES, which leaves the
    solution unchanged.
    """
    e = rp.e_tilde
    if e is None:
        raise ValueError("constrained solve needs a projected constraint vector")
    enorm = float(np.linalg.norm(e))
    if enorm == 0.0:
        raise ValueError("projected constraint vector is zero")
    n = rp.dim
    if n <= threshold:
        m = rp.dense if rp.dense is not None else rp.op.to_dense()
        kkt = np.zeros((n + 1, n + 1))
        kkt[:n, :n] = m
        kkt[:n, n] = e
        kkt[n, :n] = e
        rhs = np.zeros(n + 1)
        rhs[n] = 1.0
        z = dense_solve(kkt, rhs)
        g, lam = z[:n], float(z[n])
        res = float(np.linalg.norm(m @ g + lam * e) + abs(e @ g - 1.0))
        cond = _cond(m) if condition else None
        return LocalSolution(g, lam, "direct", 0, res, bool(np.isfinite(res)), n, cond)

    ehat = e / enorm
    probe = np.random.default_rng(0).standard_normal(n)
    sigma = max(float(np.linalg.norm(rp.op(probe)) / np.linalg.norm(probe)), 1e-300)

    def apply(z):
        g, mu = z[:n], z[n]
        out = np.empty(n + 1)
        out[:n] = rp.op(g) + (sigma * mu) * ehat
        out[n] = sigma * (ehat @ g)
        return out

    rhs = np.zeros(n + 1)
    rhs[n] = sigma / enorm
    z0 = None
    if rp.start is not None and abs(e @ rp.start) > 0:
        g0 = rp.start / (e @ rp.start)
        mg0 = rp.op(g0)
        z0 = np.append(g0, -(ehat @ mg0) / sigma)
    out = minres(LinearMap(n + 1, apply), rhs, tol=tol, maxit=maxit, x0=z0)
    g, mu = out.x[:n], out.x[n]
    if not out.converged:
        log.debug("local MINRES stopped at residual %.3e after %d steps", out.residual, out.iterations)
    return LocalSolution(g, float(mu * sigma / enorm), "minres", out.iterations, out.residual, out.converged, n)


def solve_local_normal(rp, threshold=1000, tol=1e-10, maxit=1000, condition=False):
    """Solve ``M g = f`` of a normal-equations reduced problem."""
    f = rp.rhs
    if f is None:
        raise ValueError("normal-equations solve needs a projected right-hand side")
    n = rp.dim
    if not np.any(f):
        return LocalSolution(np.zeros(n), None, "zero", 0, 0.0, True, n)
    if n <= threshold:
        m = rp.dense if rp.dense is not None else rp.op.to_dense()
        g = dense_solve(m, f)
        res = float(np.linalg.norm(m @ g - f))
        cond = _cond(m) if condition else None
        return LocalSolution(g, None, "direct", 0, res, bool(np.isfinite(res)), n, cond)
    out = minres(rp.op, f, tol=tol, maxit=maxit, x0=rp.start)
    return LocalSolution(out.x, None, "minres", out.iterations, out.residual, out.converged, n)


# ---------------------------------------------------------------------------
# residual approximation and enrichment


def _targets(a, x, rhs=None, gram=None):
    """Terms ``(coef, op, ket)`` whose sum is the residual direction."""
    if rhs is None:
        return [(-1.0, a, x)]
    gram = normal_operator(a) if gram is None else gram
    return [(1.0, op_transpose(a), rhs), (-1.0, gram, x)]


def _fit(z, terms, half_sweeps, end_left):
    """ALS fit of ``z`` (ranks fixed) to ``sum coef * op @ ket``.

    Runs ``half_sweeps`` alternating half sweeps, the last one moving to the
    right when ``end_left`` (leaving ``z`` left-orthonormal up to its last
    core) and to the left otherwise.
    """
    d = z.d
    first_right = end_left == (half_sweeps % 2 == 1)
    if first_right:
        z = tt_orthogonalize(z, 0)
    else:
        z = tt_orthogonalize(z, d - 1)
    envs = [_Env(z, op, ket, coef) for coef, op, ket in terms]
    for env in envs:
        if first_right:
            env.fill_right(1)
        else:
            env.fill_left(d - 1)
    going_right = first_right
    for _ in range(half_sweeps):
        order = range(d) if going_right else range(d - 1, -1, -1)
        for k in order:
            core = sum(env.local(k) for env in envs)
            r0, n, r1 = core.shape
            if going_right and k < d - 1:
                q, _ = np.linalg.qr(core.reshape(r0 * n, r1))
                if q.shape[1] < r1:
                    q = np.hstack([q, np.zeros((q.shape[0], r1 - q.shape[1]))])
                z.cores[k] = q.reshape(r0, n, r1)
                for env in envs:
                    env.push_left(k)
            elif not going_right and k > 0:
                q, _ = np.linalg.qr(core.reshape(r0, n * r1).T)
                if q.shape[1] < r0:
                    q = np.hstack([q, np.zeros((q.shape[0], r0 - q.shape[1]))])
                z.cores[k] = q.T.reshape(r0, n, r1)
                for env in envs:
                    env.push_right(k)
            else:
                z.cores[k] = core
        going_right = not going_right
    z.orth = ("center", d - 1 if end_left else 0)
    return z


def _initial_fit_tensor(modes, rank, rng):
    d = len(modes)
    ranks = [1]
    for k in range(1, d):
        left = int(np.prod(modes[:k], dtype=np.int64))
        right = int(np.prod(modes[k:], dtype=np.int64))
        ranks.append(int(min(rank, left, right)))
    ranks.append(1)
    return tt_random(modes, ranks, rng)


def approx_residual(a, x, rhs=None, rank=3, sweeps=2, rng=0, gram=None):
    """Rank-``rank`` TT approximation of the residual direction.

    The target is ``-A x`` when ``rhs`` is ``None`` and ``A^T (b - A x)``
    otherwise.  ``sweeps`` forward-backward ALS sweeps are run from a seeded
    random start.
    """
    if rank < 1:
        raise ValueError("rank must be at least 1")
    rng = np.random.default_rng(rng)
    z = _initial_fit_tensor(x.modes, rank, rng)
    return _fit(z, _targets(a, x, rhs, gram), 2 * sweeps, end_left=False)


def _split_right(core, extra, policy):
    """SVD-split ``core`` (r0, n, r1), append ``extra`` (r0, n, p) and orthonormalize.

    Returns the new left-orthonormal core and the carry matrix that must be
    multiplied into the next core from the left.
    """
    r0, n, r1 = core.shape
    mat = core.reshape(r0 * n, r1)
    u, s, vt = np.linalg.svd(mat, full_matrices=False)
    keep = _truncation_rank(s, policy)
    u, s, vt = u[:, :keep], s[:keep], vt[:keep]
    sv = s[:, None] * vt
    if extra is not None and extra.shape[2] > 0:
        u = np.hstack([u, extra.reshape(r0 * n, -1)])
        sv = np.vstack([sv, np.zeros((extra.shape[2], r1))])
    q, rfac = np.linalg.qr(u)
    return q.reshape(r0, n, q.shape[1]), rfac @ sv


def _split_left(core, extra, policy):
    """Mirror of :func:`_split_right`; ``extra`` has shape (p, n, r1)."""
    r0, n, r1 = core.shape
    mat = core.reshape(r0, n * r1)
    u, s, vt = np.linalg.svd(mat, full_matrices=False)
    keep = _truncation_rank(s, policy)
    u, s, vt = u[:, :keep], s[:keep], vt[:keep]
    us = u * s
    if extra is not None and extra.shape[0] > 0:
        vt = np.vstack([vt, extra.reshape(-1, n * r1)])
        us = np.hstack([us, np.zeros((r0, extra.shape[0]))])
    q, rfac = np.linalg.qr(vt.T)
    return q.T.reshape(q.shape[1], n, r1), us @ rfac.T


def _truncation_rank(s, policy):
    if policy is None:
        return max(1, int(np.sum(s > 0)) or 1)
    norm = float(np.linalg.norm(s))
    delta = max(policy.abs_tol, policy.rel_tol * norm)
    keep = _chop(s, delta) if delta > 0 else len(s)
    return max(1, min(keep, policy.max_rank))


def enrich(x, k, direction, rank):
    """Enlarge the interface between cores ``k-1`` and ``k`` (1-based ``k``).

    The left core of the interface gets ``rank`` extra columns taken from the
    projection of ``direction`` onto the left frame of ``x`` and the right
    frame of ``direction``; the right core gets zero rows, so the tensor is
    unchanged.  The left part of the result is re-orthonormalized.
    """
    d = x.d
    if not 1 <= k < d:
        raise ValueError(f"interface index must lie in 1..{d - 1}")
    if rank < 1:
        raise ValueError("rank must be at least 1")
    j = k - 1
    y = tt_orthogonalize(x, j)
    z = tt_orthogonalize(direction, 0)
    env = _Env(y, None, z)
    env.fill_left(j)
    zenv = _Env(z, None, z)
    # right frame of z at position j + 1 is the identity after right-orthonormalization
    right = np.eye(z.cores[j].shape[2])[:, None, :]
    extra = _project(env.left[j], None, z.cores[j], right)
    p = extra.shape[2]
    if p < rank:
        extra = np.concatenate([extra, np.zeros(extra.shape[:2] + (rank - p,))], axis=2)
    elif p > rank:
        u, _, _ = np.linalg.svd(extra.reshape(-1, p), full_matrices=False)
        extra = u[:, :rank].reshape(extra.shape[0], extra.shape[1], rank)
    del zenv
    r0, n, r1 = y.cores[j].shape
    mat = np.hstack([y.cores[j].reshape(r0 * n, r1), extra.reshape(r0 * n, rank)])
    q, rfac = np.linalg.qr(mat)
    if q.shape[1] < r1 + rank:
        # not enough room for an orthonormal basis; keep the raw columns
        q, rfac = mat, np.eye(r1 + rank)
    nxt = y.cores[j + 1]
    padded = np.concatenate([nxt, np.zeros((rank,) + nxt.shape[1:])], axis=0)
    cores = list(y.cores)
    cores[j] = q.reshape(r0, n, q.shape[1])
    cores[j + 1] = np.tensordot(rfac, padded, axes=(1, 0))
    return TTTensor(cores, orth=("center", j + 1))


# ---------------------------------------------------------------------------
# the sweeping solver


def _mass(x):
    return float(tt_hadamard_ones(x))


def amen_solve(a, variant="constrained", cfg=None, x0=None, rhs=None, gram=None, report=None):
    """Constrained or normal-equations AMEn.

    Parameters
    ----------
    a : TTOperator
    variant : {"constrained", "normal"}
    cfg : AmenConfig
    x0 : TTTensor, optional
        Starting guess; defaults to the normalized ones tensor (constrained)
        or to ``rhs`` (normal).
    rhs : TTTensor
        Right-hand side of the normal variant.

    Returns
    -------
    x : TTTensor
    report : SolveReport
        ``iterations`` counts full forward-backward sweeps.  The status is
        ``converged`` when the true residual reaches ``cfg.residual_target``
        and ``not_converged`` otherwise.
    """
    cfg = AmenConfig() if cfg is None else cfg
    if variant not in ("constrained", "normal"):
        raise ValueError(f"unknown variant {variant!r}")
    normal = variant == "normal"
    if normal and rhs is None:
        raise ValueError("normal variant needs a right-hand side")
    modes = a.col_modes
    if a.row_modes != modes:
        raise ValueError("square operator expected")
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    rep = report if report is not None else SolveReport(method=f"amen-{variant}")
    rep.config.update({k: v for k, v in cfg.__dict__.items()})
    tel = rep.telemetry
    tel.setdefault("local_dims", [])
    tel.setdefault("local_paths", {})
    tel.setdefault("local_objective", [])
    tel.setdefault("local_failures", 0)
    tel.setdefault("conditions", [])

    d = len(modes)
    gram = normal_operator(a) if gram is None else gram

    if normal and tt_norm(rhs) == 0.0:
        x = tt_zeros(modes)
        rep.initial_residual = 0.0
        rep.record(0.0, 1)
        rep.status = "converged"
        rep.wall_time = time.perf_counter() - t0
        return x, rep

    if x0 is None:
        x0 = rhs if normal else tt_scale(1.0 / np.prod(modes), tt_ones(modes))
    x = tt_orthogonalize(x0, 0)

    def true_residual(xx):
        ax = tt_apply(a, xx)
        return tt_norm(tt_sum([ax, rhs], [1.0, -1.0])) if normal else tt_norm(ax)

    def finalize(xx):
        if not normal:
            s = _mass(xx)
            if s != 0.0:
                xx = tt_scale(1.0 / s, xx)
        return xx

    rep.initial_residual = true_residual(finalize(x))
    policy = TruncationPolicy(rel_tol=cfg.trunc_tol, max_rank=cfg.max_rank)

    gram_env = _Env(x, gram, x)
    gram_env.fill_right(1)
    aux = None
    if normal:
        aux = _Env(x, op_transpose(a), rhs)
    else:
        aux = _Env(x, None, tt_ones(modes))
    aux.fill_right(1)
    envs = [gram_env, aux]

    rho = cfg.enrichment_rank
    terms = _targets(a, x, rhs if normal else None, gram)
    tenvs = [_Env(x, op, ket, coef) for coef, op, ket in terms] if rho > 0 else []
    for env in tenvs:
        env.fill_right(1)
    z = _initial_fit_tensor(modes, rho, rng) if rho > 0 else None

    def solve(k):
        left, right = gram_env.left[k], gram_env.right[k + 1]
        loc = aux.local(k, left=aux.left[k], right=aux.right[k + 1]).ravel()
        rp = _reduced_from_envs(
            k, x, gram.cores[k], left, right,
            e_tilde=None if normal else loc,
            rhs=loc if normal else None,
            assemble_limit=cfg.local_direct_threshold,
        )
        solver = solve_local_normal if normal else solve_local_constrained
        want_cond = rp.dim <= cfg.condition_limit
        sol = solver(rp, cfg.local_direct_threshold, cfg.local_iter_tol, cfg.local_iter_maxit, want_cond)
        x.cores[k] = sol.core.reshape(rp.shape)
        tel["local_dims"].append(rp.dim)
        if sol.condition is not None:
            tel["conditions"].append((rp.dim, sol.condition))
        if not normal:
            defect = abs(float(rp.e_tilde @ sol.core) - 1.0)
            tel["constraint_defect"] = max(tel.get("constraint_defect", 0.0), defect)
        tel["local_paths"][sol.path] = tel["local_paths"].get(sol.path, 0) + 1
        if not sol.converged:
            tel["local_failures"] += 1
        g = sol.core
        obj = g @ rp.op(g)
        if normal:
            obj += -2.0 * (g @ rp.rhs)
        tel["local_objective"].append(float(obj))

    def enrichment(k, forward):
        nonlocal z
        # refresh the residual approximation with ALS, warm-started
        z = _fit(z, terms, cfg.residual_sweeps, end_left=not forward)
        if forward:
            zr = [_Env(z, env.op, env.ket, env.coef) for env in tenvs]
            out = 0.0
            for env, ze in zip(tenvs, zr):
                ze.fill_right(k + 1)
                out = out + env.local(k, right=ze.right[k + 1])
        else:
            zl = [_Env(z, env.op, env.ket, env.coef) for env in tenvs]
            out = 0.0
            for env, ze in zip(tenvs, zl):
                ze.fill_left(k)
                out = out + env.local(k, left=ze.left[k])
        return out

    def move_right(k):
        extra = enrichment(k, True) if rho > 0 else None
        core, carry = _split_right(x.cores[k], extra, policy)
        x.cores[k] = core
        x.cores[k + 1] = np.tensordot(carry, x.cores[k + 1], axes=(1, 0))
        for env in envs + tenvs:
            env.push_left(k)

    def move_left(k):
        extra = enrichment(k, False) if rho > 0 else None
        core, carry = _split_left(x.cores[k], extra, policy)
        x.cores[k] = core
        x.cores[k - 1] = np.tensordot(x.cores[k - 1], carry, axes=(2, 0))
        for env in envs + tenvs:
            env.push_right(k)

    deadline = None if cfg.time_budget is None else t0 + cfg.time_budget
    best = (np.inf, None)
    status = "not_converged"
    for sweep in range(cfg.max_sweeps):
        for k in range(d):
            if sweep == 0 or k > 0:
                solve(k)
            if k < d - 1:
                move_right(k)
        for k in range(d - 1, -1, -1):
            if k < d - 1:
                solve(k)
            if k > 0:
                move_left(k)
        x.orth = ("center", 0)
        xf = finalize(x.copy())
        res = true_residual(xf)
        rep.record(res, xf.max_rank)
        log.debug("sweep %d residual %.3e rank %d", sweep + 1, res, xf.max_rank)
        if res < best[0]:
            best = (res, xf)
        if res <= cfg.residual_target:
            status = "converged"
            break
        if deadline is not None and time.perf_counter() > deadline:
            status = "timeout"
            break
    rep.status = status
    rep.wall_time = time.perf_counter() - t0
    out = best[1] if status != "converged" else xf
    return out, rep
