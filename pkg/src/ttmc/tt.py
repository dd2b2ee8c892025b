"""Tensor-train tensors and operators.

A tensor ``X`` of shape ``(n_1, ..., n_d)`` is stored as a list of cores, core
``k`` of shape ``(r_{k-1}, n_k, r_k)`` with ``r_0 = r_d = 1``, so that
``X[i_1, ..., i_d] = G_1[:, i_1, :] @ ... @ G_d[:, i_d, :]``.

Vectorization follows the column-major convention (the first index runs
fastest), i.e. ``vec(X) = X.reshape(-1, order="F")``.  Operators use cores of
shape ``(r_{k-1}, n_k, m_k, r_k)`` (row index, then column index); the factor
in position ``k`` acts on tensor index ``i_k``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

DENSE_LIMIT = 10**6

__all__ = [
    "TTTensor",
    "TTOperator",
    "TruncationPolicy",
    "tt_ones",
    "tt_zeros",
    "tt_random",
    "tt_add",
    "tt_sum",
    "tt_scale",
    "tt_inner",
    "tt_norm",
    "tt_apply",
    "tt_orthogonalize",
    "tt_truncate",
    "tt_from_dense",
    "tt_hadamard_ones",
    "kron_to_tt_operator",
    "op_identity",
    "op_transpose",
    "op_compose",
    "op_round",
    "save_ttf1",
    "load_ttf1",
    "dumps_ttf1",
    "loads_ttf1",
]


class TTTensor:
    """A tensor in TT format.

    Parameters
    ----------
    cores : sequence of ndarray
        Core ``k`` has shape ``(r_{k-1}, n_k, r_k)``.
    orth : tuple or None
        Orthogonality tag ``(kind, k)`` with ``kind`` one of ``"left"``
        (cores ``0..k-1`` left-orthonormal), ``"right"`` (cores ``k+1..d-1``
        right-orthonormal) or ``"center"`` (both).  ``None`` when unknown.
    """

    __slots__ = ("cores", "orth")

    def __init__(self, cores, orth=None):
        cores = [np.asarray(c, dtype=np.float64) for c in cores]
        if not cores:
            raise ValueError("a TT tensor needs at least one core")
        for k, c in enumerate(cores):
            if c.ndim != 3:
                raise ValueError(f"core {k} must be 3-way, got shape {c.shape}")
            if min(c.shape) < 1:
                raise ValueError(f"core {k} has an empty dimension {c.shape}")
        if cores[0].shape[0] != 1 or cores[-1].shape[2] != 1:
            raise ValueError("boundary ranks must be 1")
        for k in range(len(cores) - 1):
            if cores[k].shape[2] != cores[k + 1].shape[0]:
                raise ValueError(f"rank mismatch between cores {k} and {k + 1}")
        self.cores = cores
        self.orth = orth

    @property
    def d(self):
        return len(self.cores)

    @property
    def modes(self):
        return [c.shape[1] for c in self.cores]

    @property
    def ranks(self):
        return [1] + [c.shape[2] for c in self.cores]

    @property
    def max_rank(self):
        return max(self.ranks)

    @property
    def size(self):
        return int(np.prod(self.modes, dtype=np.int64))

    def __repr__(self):
        return f"TTTensor(modes={self.modes}, ranks={self.ranks})"

    def copy(self):
        return TTTensor([c.copy() for c in self.cores], self.orth)

    def full(self):
        """Dense tensor of shape ``modes``."""
        if self.size > DENSE_LIMIT:
            raise ValueError(f"dense expansion of {self.size} entries exceeds {DENSE_LIMIT}")
        res = self.cores[0].reshape(self.modes[0], -1)
        for c in self.cores[1:]:
            res = (res @ c.reshape(c.shape[0], -1)).reshape(-1, c.shape[2])
        # res rows are C-ordered over (i_1, ..., i_d)
        return res.reshape(self.modes)

    def to_vector(self):
        """``vec`` with the first index running fastest."""
        return self.full().reshape(-1, order="F")

    @classmethod
    def from_vector(cls, x, modes, tol=0.0, max_rank=None):
        x = np.asarray(x, dtype=np.float64)
        return tt_from_dense(x.reshape(modes, order="F"), tol=tol, max_rank=max_rank)

    def check_orth(self, tol=1e-12):
        """True if the cores agree with the orthogonality tag."""
        if self.orth is None:
            return True
        kind, k = self.orth
        ok = True
        if kind in ("left", "center"):
            ok &= all(_is_left_orth(self.cores[j], tol) for j in range(k))
        if kind in ("right", "center"):
            ok &= all(_is_right_orth(self.cores[j], tol) for j in range(k + 1, self.d))
        return bool(ok)


class TTOperator:
    """A linear operator in operator-TT format, cores ``(r, n_row, n_col, r)``."""

    __slots__ = ("cores",)

    def __init__(self, cores):
        cores = [np.asarray(c, dtype=np.float64) for c in cores]
        if not cores:
            raise ValueError("an operator needs at least one core")
        for k, c in enumerate(cores):
            if c.ndim != 4:
                raise ValueError(f"operator core {k} must be 4-way, got {c.shape}")
        if cores[0].shape[0] != 1 or cores[-1].shape[3] != 1:
            raise ValueError("boundary operator ranks must be 1")
        for k in range(len(cores) - 1):
            if cores[k].shape[3] != cores[k + 1].shape[0]:
                raise ValueError(f"operator rank mismatch between cores {k} and {k + 1}")
        self.cores = cores

    @property
    def d(self):
        return len(self.cores)

    @property
    def row_modes(self):
        return [c.shape[1] for c in self.cores]

    @property
    def col_modes(self):
        return [c.shape[2] for c in self.cores]

    @property
    def ranks(self):
        return [1] + [c.shape[3] for c in self.cores]

    def __repr__(self):
        return f"TTOperator(modes={self.row_modes}, ranks={self.ranks})"

    def full(self):
        """Dense matrix acting on ``vec`` (first index fastest)."""
        rows = int(np.prod(self.row_modes))
        cols = int(np.prod(self.col_modes))
        if rows * cols > DENSE_LIMIT * 10:
            raise ValueError("dense expansion of operator too large")
        res = self.cores[0].reshape(-1, self.cores[0].shape[3])
        nr, nc = self.row_modes[0], self.col_modes[0]
        for c in self.cores[1:]:
            res = res @ c.reshape(c.shape[0], -1)
            # (nr, nc) C-ordered then (n, m, r)
            res = res.reshape(nr, nc, c.shape[1], c.shape[2], c.shape[3])
            res = res.transpose(0, 2, 1, 3, 4)
            nr, nc = nr * c.shape[1], nc * c.shape[2]
            res = res.reshape(nr * nc, c.shape[3])
        res = res.reshape([*self.row_modes, *self.col_modes])
        d = self.d
        # C-ordered multi-index -> first index fastest
        perm = list(range(d - 1, -1, -1)) + list(range(2 * d - 1, d - 1, -1))
        return res.transpose(perm).reshape(rows, cols)


@dataclass(frozen=True)
class TruncationPolicy:
    """Truncation accuracy and rank cap.

    The discarded part has Euclidean norm at most ``max(abs_tol,
    rel_tol * ||X||)`` unless ``max_rank`` binds first.
    """

    abs_tol: float = 0.0
    max_rank: int = 10**9
    rel_tol: float = 0.0

    def __post_init__(self):
        if self.abs_tol < 0 or self.rel_tol < 0:
            raise ValueError("truncation tolerances must be nonnegative")
        if self.max_rank < 1:
            raise ValueError("max_rank must be at least 1")


# ---------------------------------------------------------------------------
# construction


def tt_ones(modes):
    modes = list(modes)
    if not modes:
        raise ValueError("empty mode list")
    if min(modes) < 1:
        raise ValueError("mode sizes must be positive")
    return TTTensor([np.ones((1, n, 1)) for n in modes])


def tt_zeros(modes):
    modes = list(modes)
    if not modes:
        raise ValueError("empty mode list")
    return TTTensor([np.zeros((1, n, 1)) for n in modes])


def tt_random(modes, ranks, rng=None):
    """Random Gaussian cores; ``ranks`` is an int or the full list ``r_0..r_d``."""
    rng = np.random.default_rng(rng)
    modes = list(modes)
    d = len(modes)
    if np.isscalar(ranks):
        ranks = [1] + [int(ranks)] * (d - 1) + [1]
    ranks = list(ranks)
    if len(ranks) != d + 1 or ranks[0] != 1 or ranks[-1] != 1:
        raise ValueError("ranks must have length d+1 with unit boundary ranks")
    return TTTensor([rng.standard_normal((ranks[k], modes[k], ranks[k + 1])) for k in range(d)])


def tt_from_dense(a, tol=0.0, max_rank=None):
    """TT-SVD of a dense tensor with absolute accuracy ``tol``."""
    a = np.asarray(a, dtype=np.float64)
    modes = list(a.shape)
    d = len(modes)
    if d == 1:
        return TTTensor([a.reshape(1, -1, 1)], orth=("left", 0))
    delta = tol / np.sqrt(d - 1)
    cap = max_rank or 10**9
    cores = []
    r = 1
    c = a
    for k in range(d - 1):
        c = c.reshape(r * modes[k], -1)
        u, s, vt = np.linalg.svd(c, full_matrices=False)
        rk = min(_chop(s, delta), cap)
        cores.append(u[:, :rk].reshape(r, modes[k], rk))
        c = s[:rk, None] * vt[:rk]
        r = rk
    cores.append(c.reshape(r, modes[-1], 1))
    return TTTensor(cores, orth=("left", d - 1))


# ---------------------------------------------------------------------------
# arithmetic


def _check_modes(x, y):
    if x.modes != y.modes:
        raise ValueError(f"mode mismatch: {x.modes} vs {y.modes}")


def tt_add(x, y):
    _check_modes(x, y)
    d = x.d
    if d == 1:
        return TTTensor([x.cores[0] + y.cores[0]])
    cores = []
    for k, (a, b) in enumerate(zip(x.cores, y.cores)):
        if k == 0:
            cores.append(np.concatenate([a, b], axis=2))
        elif k == d - 1:
            cores.append(np.concatenate([a, b], axis=0))
        else:
            ra, n, sa = a.shape
            rb, _, sb = b.shape
            c = np.zeros((ra + rb, n, sa + sb))
            c[:ra, :, :sa] = a
            c[ra:, :, sa:] = b
            cores.append(c)
    return TTTensor(cores)


def tt_sum(tensors, coeffs=None):
    """Linear combination ``sum_i coeffs[i] * tensors[i]`` (ranks add)."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("nothing to sum")
    if coeffs is None:
        coeffs = [1.0] * len(tensors)
    for t in tensors[1:]:
        _check_modes(tensors[0], t)
    d = tensors[0].d
    if d == 1:
        return TTTensor([sum(c * t.cores[0] for c, t in zip(coeffs, tensors))])
    cores = []
    for k in range(d):
        blocks = [t.cores[k] for t in tensors]
        if k == 0:
            cores.append(np.concatenate([c * b for c, b in zip(coeffs, blocks)], axis=2))
        elif k == d - 1:
            cores.append(np.concatenate(blocks, axis=0))
        else:
            rl = sum(b.shape[0] for b in blocks)
            rr = sum(b.shape[2] for b in blocks)
            c = np.zeros((rl, blocks[0].shape[1], rr))
            i = j = 0
            for b in blocks:
                c[i:i + b.shape[0], :, j:j + b.shape[2]] = b
                i += b.shape[0]
                j += b.shape[2]
            cores.append(c)
    return TTTensor(cores)


def tt_scale(alpha, x):
    cores = [c for c in x.cores]
    # scale the core that carries the norm, if known
    k = x.d - 1
    if x.orth is not None:
        k = x.orth[1]
    cores[k] = alpha * cores[k]
    return TTTensor(cores, x.orth)


def tt_inner(x, y):
    _check_modes(x, y)
    v = np.ones((1, 1))
    for a, b in zip(x.cores, y.cores):
        # v[a0, b0] a[a0, i, a1] b[b0, i, b1]
        t = np.tensordot(v, a, axes=(0, 0))  # (b0, i, a1)
        v = np.tensordot(t, b, axes=([0, 1], [0, 1]))  # (a1, b1)
    return float(v[0, 0])


def tt_norm(x):
    if x.orth is not None and x.orth[0] == "center":
        return float(np.linalg.norm(x.cores[x.orth[1]]))
    # right-to-left QR sweep; only the R factors are needed
    r = np.ones((1, 1))
    for c in reversed(x.cores[1:]):
        m = np.tensordot(c, r, axes=(2, 0))  # (r0, n, r')
        m = m.reshape(m.shape[0], -1)
        if m.shape[0] <= m.shape[1]:
            r = np.linalg.qr(m.T, mode="r").T
        else:
            r = m
    m = np.tensordot(x.cores[0], r, axes=(2, 0))
    return float(np.linalg.norm(m))


def tt_apply(a, x):
    if a.col_modes != x.modes:
        raise ValueError(f"mode mismatch: operator columns {a.col_modes} vs tensor {x.modes}")
    cores = []
    for ac, xc in zip(a.cores, x.cores):
        ra, n, _, sa = ac.shape
        rx, _, sx = xc.shape
        c = np.tensordot(ac, xc, axes=(2, 1))  # (ra, n, sa, rx, sx)
        c = c.transpose(0, 3, 1, 2, 4).reshape(ra * rx, n, sa * sx)
        cores.append(c)
    return TTTensor(cores)


def tt_hadamard_ones(x):
    """Sum of all entries, ``<X, 1>``."""
    v = np.ones((1,))
    for c in x.cores:
        v = v @ c.sum(axis=1)
    return float(v[0])


# ---------------------------------------------------------------------------
# orthogonalization and truncation


def _is_left_orth(c, tol):
    m = c.reshape(-1, c.shape[2])
    return np.allclose(m.T @ m, np.eye(m.shape[1]), atol=tol, rtol=0)


def _is_right_orth(c, tol):
    m = c.reshape(c.shape[0], -1)
    return np.allclose(m @ m.T, np.eye(m.shape[0]), atol=tol, rtol=0)


def _qr_left(c):
    """Left-orthonormalize core ``c``; returns (Q core, R)."""
    r0, n, r1 = c.shape
    q, r = np.linalg.qr(c.reshape(r0 * n, r1))
    return q.reshape(r0, n, q.shape[1]), r


def _qr_right(c):
    """Right-orthonormalize core ``c``; returns (Q core, L) with c = L @ Q."""
    r0, n, r1 = c.shape
    q, r = np.linalg.qr(c.reshape(r0, n * r1).T)
    return q.T.reshape(q.shape[1], n, r1), r.T


def tt_orthogonalize(x, center, direction="both"):
    """Orthogonalize around core ``center`` (0-based).

    ``direction`` selects which side is processed: ``"left"`` makes cores
    ``0..center-1`` left-orthonormal, ``"right"`` makes ``center+1..d-1``
    right-orthonormal, ``"both"`` does both.
    """
    d = x.d
    if not 0 <= center < d:
        raise ValueError(f"center {center} out of range for d={d}")
    cores = list(x.cores)
    if direction in ("left", "both"):
        for k in range(center):
            q, r = _qr_left(cores[k])
            cores[k] = q
            cores[k + 1] = np.tensordot(r, cores[k + 1], axes=(1, 0))
    if direction in ("right", "both"):
        for k in range(d - 1, center, -1):
            q, l = _qr_right(cores[k])
            cores[k] = q
            cores[k - 1] = np.tensordot(cores[k - 1], l, axes=(2, 0))
    kind = {"left": "left", "right": "right", "both": "center"}[direction]
    return TTTensor(cores, orth=(kind, center))


def _chop(s, delta):
    """Smallest rank whose discarded tail has norm <= delta (at least 1)."""
    if delta <= 0:
        return max(1, int(np.count_nonzero(s > 0)) or 1)
    tail = np.sqrt(np.cumsum((s**2)[::-1]))[::-1]  # tail[j] = ||s[j:]||
    ok = np.nonzero(tail <= delta)[0]
    r = int(ok[0]) if ok.size else len(s)
    return max(r, 1)


def tt_truncate(x, policy):
    """TT-SVD rounding; the result is left-orthogonal up to its last core."""
    d = x.d
    if d == 1:
        return TTTensor([x.cores[0].copy()], orth=("center", 0))
    y = tt_orthogonalize(x, 0, "right")
    nrm = float(np.linalg.norm(y.cores[0]))
    tol = max(policy.abs_tol, policy.rel_tol * nrm)
    delta = tol / np.sqrt(d - 1)
    cores = list(y.cores)
    for k in range(d - 1):
        r0, n, r1 = cores[k].shape
        u, s, vt = np.linalg.svd(cores[k].reshape(r0 * n, r1), full_matrices=False)
        rk = min(_chop(s, delta), policy.max_rank, len(s))
        cores[k] = u[:, :rk].reshape(r0, n, rk)
        sv = s[:rk, None] * vt[:rk]
        cores[k + 1] = np.tensordot(sv, cores[k + 1], axes=(1, 0))
    return TTTensor(cores, orth=("center", d - 1))


# ---------------------------------------------------------------------------
# operators


def op_identity(modes):
    return TTOperator([np.eye(n).reshape(1, n, n, 1) for n in modes])


def op_transpose(a):
    return TTOperator([c.transpose(0, 2, 1, 3) for c in a.cores])


def op_compose(a, b):
    """Operator product ``a @ b``."""
    if a.col_modes != b.row_modes:
        raise ValueError("operator mode mismatch")
    cores = []
    for ac, bc in zip(a.cores, b.cores):
        ra, n, _, sa = ac.shape
        rb, _, m, sb = bc.shape
        c = np.tensordot(ac, bc, axes=(2, 1))  # (ra, n, sa, rb, m, sb)
        cores.append(c.transpose(0, 3, 1, 4, 2, 5).reshape(ra * rb, n, m, sa * sb))
    return TTOperator(cores)


def op_round(a, rel_tol=1e-14, max_rank=None):
    """Compress operator ranks by TT-SVD of the cores viewed as vectors."""
    flat = TTTensor([c.reshape(c.shape[0], -1, c.shape[3]) for c in a.cores])
    t = tt_truncate(flat, TruncationPolicy(rel_tol=rel_tol, max_rank=max_rank or 10**9))
    return TTOperator(
        [c.reshape(c.shape[0], n, m, c.shape[2]) for c, n, m in zip(t.cores, a.row_modes, a.col_modes)]
    )


def kron_to_tt_operator(model, rel_tol=1e-14):
    """Operator-TT form of ``sum_t E_1^t (x) ... (x) E_d^t``.

    Built block-diagonally with rank T, then compressed, so ranks never
    exceed the number of terms.
    """
    terms = model.terms
    if not terms:
        raise ValueError("model has no Kronecker terms")
    modes = list(model.modes)
    d = len(modes)
    for t, term in enumerate(terms):
        if len(term) != d:
            raise ValueError(f"term {t} has {len(term)} factors, expected {d}")
        for k, f in enumerate(term):
            if f.shape != (modes[k], modes[k]):
                raise ValueError(f"factor ({t},{k}) has shape {f.shape}, expected {(modes[k],) * 2}")
    T = len(terms)
    dense = [[_dense(term[k]) for term in terms] for k in range(d)]
    if d == 1:
        return TTOperator([sum(dense[0]).reshape(1, modes[0], modes[0], 1)])
    cores = []
    for k in range(d):
        n = modes[k]
        if k == 0:
            c = np.stack(dense[k], axis=-1).reshape(1, n, n, T)
        elif k == d - 1:
            c = np.stack(dense[k], axis=0).reshape(T, n, n, 1)
        else:
            c = np.zeros((T, n, n, T))
            for t in range(T):
                c[t, :, :, t] = dense[k][t]
        cores.append(c)
    return op_round(TTOperator(cores), rel_tol=rel_tol)


def _dense(f):
    return f.toarray() if hasattr(f, "toarray") else np.asarray(f, dtype=np.float64)


# ---------------------------------------------------------------------------
# TTF1 binary format

_MAGIC = b"TTF1"


def dumps_ttf1(x):
    parts = [_MAGIC, struct.pack("<Q", x.d)]
    parts.append(np.asarray(x.modes, dtype="<u8").tobytes())
    parts.append(np.asarray(x.ranks, dtype="<u8").tobytes())
    for c in x.cores:
        # C order over (left rank, mode, right rank): right rank fastest
        parts.append(np.ascontiguousarray(c, dtype="<f8").tobytes())
    return b"".join(parts)


def loads_ttf1(buf):
    buf = bytes(buf)
    if buf[:4] != _MAGIC:
        raise ValueError("not a TTF1 stream")
    (d,) = struct.unpack_from("<Q", buf, 4)
    off = 12
    modes = np.frombuffer(buf, dtype="<u8", count=d, offset=off).astype(int)
    off += 8 * d
    ranks = np.frombuffer(buf, dtype="<u8", count=d + 1, offset=off).astype(int)
    off += 8 * (d + 1)
    cores = []
    for k in range(d):
        shape = (ranks[k], modes[k], ranks[k + 1])
        cnt = int(np.prod(shape))
        cores.append(np.frombuffer(buf, dtype="<f8", count=cnt, offset=off).reshape(shape).copy())
        off += 8 * cnt
    if off != len(buf):
        raise ValueError("trailing bytes in TTF1 stream")
    return TTTensor(cores)


def save_ttf1(path, x):
    with open(path, "wb") as fh:
        fh.write(dumps_ttf1(x))


def load_ttf1(path):
    with open(path, "rb") as fh:
        return loads_ttf1(fh.read())
