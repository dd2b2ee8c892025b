"""Tensorized multigrid for ``A x = 0`` with Kronecker-structured ``A``.

Coarse operators are formed factor by factor: with ``P = (x)_k P_k`` and
``Q = (x)_k Q_k`` the Petrov-Galerkin operator of a Kronecker sum is again a
Kronecker sum, ``Q A P = sum_t (x)_k Q_k E_k^t P_k``, so no coarse matrix is
ever assembled at full size.  Transfers act on TT cores one mode at a time and
do not change TT ranks.

The smoother is GMRES carried out in TT arithmetic with truncation of every
Krylov vector.  Truncation accuracy and rank caps follow an adaptive schedule
that tightens with the outer residual.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import lsqr

from .amen import AmenConfig, amen_solve, normal_operator
from .models import KroneckerModel, assemble_sparse
from .report import SolveReport
from .tt import (
    TTTensor,
    TruncationPolicy,
    kron_to_tt_operator,
    tt_apply,
    tt_from_dense,
    tt_hadamard_ones,
    tt_inner,
    tt_norm,
    tt_ones,
    tt_scale,
    tt_sum,
    tt_truncate,
    tt_zeros,
)

log = logging.getLogger(__name__)

COARSE_DIRECT_GUARD = 2 * 10**5
DENSE_PINV_LIMIT = 4096
OVERFLOW_FAMILY = ("overflow", "overflowsim", "overflowpersim")


@dataclass
class MGConfig:
    """Settings of :func:`multigrid_solve`.

    ``iterate_tol_mode`` selects how the adaptive tolerance
    ``eps_l = trunc_factor * rho_prev * ||v_l|| / ||v_1||`` is applied to the
    level-``l`` iterate: ``"absolute"`` uses it as the norm bound of the
    discarded part, ``"relative"`` as a bound relative to ``||v_l||``, and
    ``"normalized"`` as an absolute bound with ``rho_prev`` measured for the
    operator divided by its root-mean-square row norm ``||A||_F / sqrt(N)``,
    which makes the rule independent of the scale of the rates.
    """

    nu1: int = 3
    nu2: int = 3
    restrict_tol: float = 1e-1
    trunc_factor: float = 10.0
    initial_rank: int = 15
    rank_growth: float = math.sqrt(2.0)
    stagnation: float = 0.9
    factor_shrink: float = 2.0
    max_cycles: int = 50
    tol_orders: float = 2.0
    coarse: str = "direct"
    coarse_amen: AmenConfig | None = None
    iterate_tol_mode: str = "normalized"
    init_amen: AmenConfig | None = None
    time_budget: float | None = None

    def __post_init__(self):
        if self.nu1 < 0 or self.nu2 < 0:
            raise ValueError("smoothing step counts must be nonnegative")
        if min(self.restrict_tol, self.trunc_factor, self.rank_growth, self.stagnation) <= 0:
            raise ValueError("tolerances and factors must be positive")
        if self.initial_rank < 1 or self.max_cycles < 1:
            raise ValueError("initial_rank and max_cycles must be positive")
        if self.coarse not in ("direct", "amen"):
            raise ValueError(f"unknown coarse solver {self.coarse!r}")
        if self.iterate_tol_mode not in ("absolute", "relative", "normalized"):
            raise ValueError(f"unknown iterate_tol_mode {self.iterate_tol_mode!r}")


# ---------------------------------------------------------------------------
# one-dimensional transfers


def coarsen_size(n):
    """Coarse size of a mode: ``(n + 1) / 2`` for odd and ``n / 2 + 1`` for even ``n``."""
    n = int(n)
    if n <= 3:
        raise ValueError(f"mode size {n} is already coarsest")
    return (n + 1) // 2 if n % 2 else n // 2 + 1


def coarse_points(n):
    """Coarse points of the full-coarsening splitting (0-based even indices, plus the last)."""
    pts = list(range(0, n, 2))
    if pts[-1] != n - 1:
        pts.append(n - 1)
    return pts


def direct_interpolation(local_op, record=None):
    """Direct interpolation from a tridiagonal local operator.

    An F-point ``i`` with neighbours ``N_i`` and coarse neighbours ``C_i``
    receives the weights ``-(a_ij / a_ii) * sum_{N_i} a_ik / sum_{C_i} a_ik``
    for ``j`` in ``C_i``.  Rows whose coarse-neighbour sum vanishes fall back
    to linear weights; their indices are appended to ``record`` if given.
    """
    a = np.asarray(local_op.toarray() if hasattr(local_op, "toarray") else local_op, dtype=float)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError("square local operator expected")
    if n < 4:
        raise ValueError("direct interpolation needs at least 4 points")
    cpts = coarse_points(n)
    col = {c: j for j, c in enumerate(cpts)}
    p = np.zeros((n, len(cpts)))
    for i in range(n):
        if i in col:
            p[i, col[i]] = 1.0
            continue
        if a[i, i] == 0.0:
            raise ValueError(f"zero diagonal entry in row {i} of the local operator")
        nbrs = [k for k in range(n) if k != i and a[i, k] != 0.0]
        cn = [k for k in nbrs if k in col]
        csum = sum(a[i, k] for k in cn)
        if not cn or csum == 0.0:
            for k in (i - 1, i + 1):
                p[i, col[k]] = 0.5
            if record is not None:
                record.append(i)
            continue
        scale = sum(a[i, k] for k in nbrs) / csum
        for k in cn:
            p[i, col[k]] = -(a[i, k] / a[i, i]) * scale
    return p


def _linear(n):
    cpts = coarse_points(n)
    col = {c: j for j, c in enumerate(cpts)}
    p = np.zeros((n, len(cpts)))
    for i in range(n):
        if i in col:
            p[i, col[i]] = 1.0
        else:
            p[i, col[i - 1]] = 0.5
            p[i, col[i + 1]] = 0.5
    return p


def linear_interpolation(n):
    """Linear interpolation for an odd mode size ``n >= 5``."""
    if n % 2 == 0:
        raise ValueError("linear interpolation is defined for odd mode sizes")
    if n < 5:
        raise ValueError("linear interpolation needs at least 5 points")
    return _linear(n)


# ---------------------------------------------------------------------------
# hierarchy


@dataclass
class TransferFactors:
    """Per-mode interpolation ``P[k]`` (n x n_c) and restriction ``Q[k]`` (n_c x n)."""

    P: list
    Q: list
    kinds: list

    def prolong(self, x):
        return _apply_modes(self.P, x)

    def restrict(self, x):
        return _apply_modes(self.Q, x)


def _apply_modes(mats, x):
    cores = []
    for m, c in zip(mats, x.cores):
        if m is None:
            cores.append(c.copy())
        else:
            cores.append(np.tensordot(m, c, axes=(1, 1)).transpose(1, 0, 2))
    return TTTensor(cores)


@dataclass
class Level:
    model: KroneckerModel
    op: object

    @property
    def modes(self):
        return list(self.model.modes)


@dataclass
class Hierarchy:
    levels: list
    transfers: list
    notes: list = field(default_factory=list)

    @property
    def L(self):
        return len(self.levels)


def interpolation_kinds(model):
    """Per-mode interpolation choice: direct everywhere for the overflow family,
    direct on the first mode and linear elsewhere for the other models."""
    if model.name in OVERFLOW_FAMILY:
        return ["direct"] * model.d
    return ["direct"] + ["linear"] * (model.d - 1)


def galerkin_model(model, transfer):
    """Factor-wise coarse model ``Q_k E_k^t P_k``."""
    terms = []
    for term in model.terms:
        new = []
        for k, f in enumerate(term):
            p, q = transfer.P[k], transfer.Q[k]
            if p is None:
                new.append(sp.csr_array(f))
            else:
                new.append(sp.csr_array(q @ (f @ p)))
        terms.append(new)
    modes = [f.shape[0] for f in terms[0]]
    return KroneckerModel(modes, terms, list(model.local), model.name)


def build_hierarchy(model, cfg=None, kinds=None):
    """Levels down to mode size 3 with factor-wise Petrov-Galerkin coarsening.

    Modes of size 3 or less are left alone (identity transfer); the
    hierarchy ends when every mode has size at most 3.
    """
    kinds = interpolation_kinds(model) if kinds is None else list(kinds)
    levels = [Level(model, kron_to_tt_operator(model))]
    transfers = []
    notes = []
    cur = model
    while any(n > 3 for n in cur.modes):
        P, Q, used = [], [], []
        for k, n in enumerate(cur.modes):
            if n <= 3:
                P.append(None)
                Q.append(None)
                used.append("identity")
                continue
            if kinds[k] == "direct":
                fallback = []
                p = direct_interpolation(cur.local_operator(k), fallback)
                if fallback:
                    notes.append(f"level {len(levels) - 1} mode {k}: linear fallback rows {fallback}")
            else:
                p = _linear(n)
            P.append(p)
            Q.append(p.T.copy())
            used.append(kinds[k])
        tr = TransferFactors(P, Q, used)
        cur = galerkin_model(cur, tr)
        transfers.append(tr)
        levels.append(Level(cur, kron_to_tt_operator(cur)))
    return Hierarchy(levels, transfers, notes)


# ---------------------------------------------------------------------------
# smoother


def _residual(a, b, x, policy=None):
    ax = tt_apply(a, x)
    r = tt_scale(-1.0, ax) if b is None else tt_sum([b, ax], [1.0, -1.0])
    return r if policy is None else tt_truncate(r, policy)


def tt_gmres_smooth(a, b, x0, steps, trunc, telemetry=None):
    """``steps`` Arnoldi steps of GMRES in TT arithmetic.

    Every new Krylov vector is truncated once under ``trunc`` (taken relative
    to its norm when ``trunc.rel_tol`` is set), inner products are exact, and
    the update ``x0 + V y`` is truncated at the end.  ``b = None`` stands for
    the zero right-hand side.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    r0 = _residual(a, b, x0)
    beta = tt_norm(r0)
    if beta == 0.0 or not np.isfinite(beta):
        return x0
    r0 = tt_truncate(r0, trunc)
    beta = tt_norm(r0)
    basis = [tt_scale(1.0 / beta, r0)]
    h = np.zeros((steps + 1, steps))
    m = 0
    for j in range(steps):
        w = tt_apply(a, basis[j])
        coeffs = [tt_inner(v, w) for v in basis]
        h[: j + 1, j] = coeffs
        w = tt_sum([w] + basis, [1.0] + [-c for c in coeffs])
        w = tt_truncate(w, trunc)
        hn = tt_norm(w)
        h[j + 1, j] = hn
        m = j + 1
        if hn <= 1e-14 * beta:
            break
        basis.append(tt_scale(1.0 / hn, w))
    rhs = np.zeros(m + 1)
    rhs[0] = beta
    y, *_ = np.linalg.lstsq(h[: m + 1, :m], rhs, rcond=None)
    if telemetry is not None:
        telemetry.append(float(np.linalg.norm(h[: m + 1, :m] @ y - rhs) / beta))
    x = tt_sum([x0] + basis[:m], [1.0] + list(y))
    return tt_truncate(x, trunc)


# ---------------------------------------------------------------------------
# coarse solvers


class DirectCoarseSolver:
    """Least-squares solves with the assembled coarsest operator (cached)."""

    def __init__(self, model, guard=COARSE_DIRECT_GUARD):
        if model.size > guard:
            raise ValueError(
                f"coarsest problem has {model.size} states, above the direct-solve guard {guard}; "
                "use the AMEn coarse solver"
            )
        self.model = model
        self.matrix = assemble_sparse(model)
        self.pinv = None
        if model.size <= DENSE_PINV_LIMIT:
            self.pinv = np.linalg.pinv(self.matrix.toarray(), rcond=1e-12)

    def solve(self, b):
        vec = b.to_vector()
        if self.pinv is not None:
            return self.pinv @ vec
        return lsqr(self.matrix, vec, atol=1e-14, btol=1e-14, iter_lim=20 * self.model.size)[0]


def coarse_solve_direct(model, b, tol=1e-12, solver=None):
    """Minimum-norm least-squares solution of ``A_L v = b`` as a TT tensor."""
    solver = DirectCoarseSolver(model) if solver is None else solver
    if tt_norm(b) == 0.0:
        return tt_zeros(model.modes)
    v = solver.solve(b)
    arr = v.reshape(model.modes, order="F")
    return tt_from_dense(arr, tol=tol * np.linalg.norm(v))


def coarse_solve_amen(op, b, outer_residual, cfg=None, gram=None, telemetry=None):
    """Normal-equations AMEn for the coarse correction, at most 5 sweeps by default."""
    base = cfg if cfg is not None else AmenConfig(max_sweeps=5, enrichment_rank=3)
    run = AmenConfig(**{**base.__dict__, "residual_target": float(outer_residual)})
    if tt_norm(b) == 0.0:
        return tt_zeros(op.col_modes)
    x, rep = amen_solve(op, "normal", run, rhs=b, gram=gram)
    if telemetry is not None:
        telemetry.append(rep.iterations)
    return x


# ---------------------------------------------------------------------------
# V-cycle


@dataclass
class CycleState:
    """Adaptive quantities of one outer cycle."""

    rho_prev: float
    max_rank: int
    v1_norm: float
    mode: str = "normalized"
    factor: float = 10.0
    scale: float = 1.0
    level_norms: dict = field(default_factory=dict)
    telemetry: dict = field(default_factory=dict)

    def iterate_policy(self, level, vnorm):
        """Truncation policy for the level-``level`` iterate of norm ``vnorm``."""
        eps = self.factor * self.rho_prev * vnorm / self.v1_norm if self.v1_norm > 0 else 0.0
        if self.mode == "normalized":
            return TruncationPolicy(abs_tol=eps / self.scale, max_rank=self.max_rank)
        if self.mode == "absolute":
            return TruncationPolicy(abs_tol=eps, max_rank=self.max_rank)
        return TruncationPolicy(rel_tol=eps, max_rank=self.max_rank)

    def krylov_policy(self, level):
        """Relative policy for Krylov vectors, matching the iterate's relative accuracy."""
        vnorm = self.level_norms.get(level, self.v1_norm)
        if self.v1_norm <= 0:
            return TruncationPolicy(max_rank=self.max_rank)
        if self.mode == "absolute":
            rel = self.factor * self.rho_prev / self.v1_norm
        elif self.mode == "normalized":
            rel = self.factor * self.rho_prev / (self.scale * self.v1_norm)
        else:
            rel = self.factor * self.rho_prev * vnorm / self.v1_norm
        return TruncationPolicy(rel_tol=rel, max_rank=self.max_rank)


class _Coarse:
    def __init__(self, h, cfg):
        self.h = h
        self.cfg = cfg
        last = h.levels[-1]
        self.direct = DirectCoarseSolver(last.model) if cfg.coarse == "direct" else None
        self.gram = normal_operator(last.op) if cfg.coarse == "amen" else None

    def correct(self, b, v, state):
        """``v + A_L^+ (b - A_L v)`` with the configured solver."""
        last = self.h.levels[-1]
        r = _residual(last.op, b, v)
        if tt_norm(r) == 0.0:
            return v
        if self.direct is not None:
            e = coarse_solve_direct(last.model, r, solver=self.direct)
        else:
            sweeps = state.telemetry.setdefault("coarse_sweeps", [])
            e = coarse_solve_amen(last.op, r, state.rho_prev, self.cfg.coarse_amen, self.gram, sweeps)
        out = tt_sum([v, e])
        policy = state.iterate_policy(self.h.L - 1, tt_norm(out))
        return tt_truncate(out, policy)


def v_cycle(h, level, b, v, cfg, state, coarse):
    """One V-cycle on level ``level`` for ``A_l v = b`` (``b = None`` means zero)."""
    a = h.levels[level].op
    if level == h.L - 1:
        return coarse.correct(b, v, state)
    smooth_tel = state.telemetry.setdefault("gmres_reduction", [])
    if cfg.nu1:
        v = tt_gmres_smooth(a, b, v, cfg.nu1, state.krylov_policy(level), smooth_tel)
    r = _residual(a, b, v)
    tr = h.transfers[level]
    bc = tt_truncate(tr.restrict(r), TruncationPolicy(rel_tol=cfg.restrict_tol, max_rank=state.max_rank))
    ec = v_cycle(h, level + 1, bc, tt_zeros(h.levels[level + 1].modes), cfg, state, coarse)
    v = tt_sum([v, tr.prolong(ec)])
    vnorm = tt_norm(v)
    state.level_norms[level] = vnorm
    v = tt_truncate(v, state.iterate_policy(level, vnorm))
    if cfg.nu2:
        v = tt_gmres_smooth(a, b, v, cfg.nu2, state.krylov_policy(level), smooth_tel)
    return v


# ---------------------------------------------------------------------------
# driver


def _normalize(x):
    s = float(tt_hadamard_ones(x))
    if s == 0.0 or not np.isfinite(s):
        raise FloatingPointError("iterate has zero or non-finite mass")
    return tt_scale(1.0 / s, x)


def initial_guess(h, cfg=None):
    """Constrained AMEn on the coarsest level, interpolated to the finest."""
    last = h.levels[-1]
    u = tt_scale(1.0 / np.prod(last.modes), tt_ones(last.modes))
    ref = tt_norm(tt_apply(last.op, u))
    base = cfg if cfg is not None else AmenConfig(max_sweeps=10)
    run = AmenConfig(**{**base.__dict__, "residual_target": max(base.residual_target, 1e-8 * ref)})
    x, _ = amen_solve(last.op, "constrained", run)
    for level in range(h.L - 2, -1, -1):
        x = h.transfers[level].prolong(x)
    return _normalize(x)


def operator_scale(op):
    """Root-mean-square row norm ``||A||_F / sqrt(N)`` computed from the TT cores."""
    flat = TTTensor([c.reshape(c.shape[0], -1, c.shape[3]) for c in op.cores])
    n = float(np.prod(op.row_modes, dtype=float))
    return tt_norm(flat) / np.sqrt(n)


def reference_residual(op, modes):
    """``||A u||`` for the uniform distribution ``u``."""
    u = tt_scale(1.0 / np.prod(modes, dtype=float), tt_ones(modes))
    return tt_norm(tt_apply(op, u))


def multigrid_solve(model, cfg=None, coarse=None, hierarchy=None, x0=None):
    """Stationary vector by V-cycles with adaptive truncation.

    Parameters
    ----------
    model : KroneckerModel
    cfg : MGConfig
    coarse : {"direct", "amen"}, optional
        Overrides ``cfg.coarse``.

    Returns
    -------
    x : TTTensor
        Iterate normalized to sum one.
    report : SolveReport
        ``iterations`` counts V-cycles.
    """
    cfg = MGConfig() if cfg is None else cfg
    if coarse is not None:
        cfg = MGConfig(**{**cfg.__dict__, "coarse": coarse})
    t0 = time.perf_counter()
    h = build_hierarchy(model) if hierarchy is None else hierarchy
    rep = SolveReport(method="multigrid-amen" if cfg.coarse == "amen" else "multigrid")
    rep.config = {k: (v.__dict__ if hasattr(v, "__dict__") else v) for k, v in cfg.__dict__.items()}
    rep.telemetry["levels"] = [lv.modes for lv in h.levels]
    rep.telemetry["transfer_kinds"] = [tr.kinds for tr in h.transfers]
    rep.telemetry["notes"] = list(h.notes)
    rep.telemetry["rank_caps"] = []
    coarse_solver = _Coarse(h, cfg)
    a = h.levels[0].op
    ref = reference_residual(a, model.modes)
    target = 10.0 ** (-cfg.tol_orders) * ref
    rep.reference_residual, rep.target = ref, target
    scale = operator_scale(a)
    rep.telemetry["operator_scale"] = scale

    x = initial_guess(h, cfg.init_amen) if x0 is None else _normalize(x0)
    rho = tt_norm(tt_apply(a, x))
    rep.initial_residual = rho
    cap = cfg.initial_rank
    factor = cfg.trunc_factor
    deadline = None if cfg.time_budget is None else t0 + cfg.time_budget
    status = "not_converged"
    if rho <= target:
        status = "converged"
    cycles_tel = rep.telemetry.setdefault("cycles", [])
    while status != "converged" and rep.iterations < cfg.max_cycles:
        state = CycleState(rho, cap, tt_norm(x), cfg.iterate_tol_mode, factor, scale)
        x_new = _normalize(v_cycle(h, 0, None, x, cfg, state, coarse_solver))
        rho_new = tt_norm(tt_apply(a, x_new))
        rep.record(rho_new, x_new.max_rank)
        rep.telemetry["rank_caps"].append(cap)
        rep.telemetry.setdefault("trunc_factors", []).append(factor)
        cycles_tel.append({k: v for k, v in state.telemetry.items() if k != "gmres_reduction"})
        log.debug("cycle %d residual %.3e rank %d cap %d", rep.iterations, rho_new, x_new.max_rank, cap)
        if rho_new > cfg.stagnation * rho:
            if x_new.max_rank < cap:
                # the tolerance, not the cap, limited the ranks
                factor /= cfg.factor_shrink
            cap = int(math.floor(cap * cfg.rank_growth))
        x, rho = x_new, rho_new
        if not np.isfinite(rho):
            status = "breakdown"
            break
        if rho <= target:
            status = "converged"
            break
        if deadline is not None and time.perf_counter() > deadline:
            status = "timeout"
            break
    rep.status = status
    rep.wall_time = time.perf_counter() - t0
    return x, rep
