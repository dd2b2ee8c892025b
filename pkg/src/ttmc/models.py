"""Benchmark Markov models as sums of Kronecker products.

Every model is stored as the transposed generator ``A = sum_t E_1^t (x) ... (x)
E_d^t`` with ``1^T A = 0``.  Factors use the transposed orientation: the entry
``E[to, from]`` carries the rate of a transition ``from -> to``, so births sit
on the sub-diagonal and deaths on the super-diagonal.

Each physical transition contributes a pair of terms: the off-diagonal term
``rate * (x)_k F_k`` and its diagonal compensation ``-rate * (x)_k
diag(colsum F_k)``.  This works because all off-diagonal factors are
entrywise nonnegative, so the exit rate factorizes over the modes.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from .numkit import strongly_connected

KINDS = ("overflow", "overflowsim", "overflowpersim", "kanbanalt2", "directedmetab", "divergingmetab")
DENSE_GUARD = 10**4


@dataclass
class ModelSpec:
    kind: str
    d: int
    cap: int
    branch_node: int | None = None
    lam: list | None = None
    mu: list | None = None
    dep: list | None = None
    v: float | list | None = None
    K: float | list | None = None
    inflow: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.d < 2:
            raise ValueError("d must be at least 2")
        if self.cap < 1:
            raise ValueError("cap must be at least 1")
        if self.branch_node is not None and not 2 <= self.branch_node <= self.d - 2:
            raise ValueError(f"branch_node must lie in 2..{self.d - 2}")

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        overrides = data.pop("overrides", None) or {}
        if "lambda" in overrides:
            overrides["lam"] = overrides.pop("lambda")
        data.update(overrides)
        return cls(**data)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass
class KroneckerModel:
    """Transposed generator as a list of Kronecker terms.

    ``local[t]`` is the mode ``k`` if term ``t`` acts only on mode ``k``
    (identity elsewhere at the finest level), else ``None``.
    """

    modes: list
    terms: list
    local: list = field(default_factory=list)
    name: str = ""

    def __post_init__(self):
        if not self.local:
            self.local = [None] * len(self.terms)

    @property
    def d(self):
        return len(self.modes)

    @property
    def size(self):
        return int(np.prod(self.modes, dtype=np.int64))

    @property
    def n_terms(self):
        return len(self.terms)

    def local_operator(self, k):
        """Sum of the factors on mode ``k`` of the terms local to mode ``k``."""
        n = self.modes[k]
        acc = sp.csr_array((n, n))
        for term, loc in zip(self.terms, self.local):
            if loc == k:
                acc = acc + term[k]
        return acc.toarray()


# ---------------------------------------------------------------------------
# elementary factors (transposed orientation)


def birth(n):
    """Occupancy ``s -> s+1`` for ``s < n-1``; zero column at the full state."""
    return sp.csr_array(sp.eye(n, k=-1))


def death(n, rates=None):
    """Occupancy ``s -> s-1`` at rate ``rates[s]`` (default 1)."""
    r = np.ones(n) if rates is None else np.asarray(rates, dtype=float)
    return sp.csr_array(sp.diags(r[1:], 1, shape=(n, n)))


def full_indicator(n):
    e = np.zeros(n)
    e[-1] = 1.0
    return sp.csr_array(sp.diags(e))


def _compensation(f):
    return sp.csr_array(sp.diags(np.asarray(f.sum(axis=0)).ravel()))


def _identity(n):
    return sp.csr_array(sp.eye(n))


class _Builder:
    def __init__(self, modes):
        self.modes = list(modes)
        self.terms = []
        self.local = []

    def local_term(self, k, factors_rates):
        """Local transitions on mode ``k``: off-diagonal sum plus its diagonal."""
        n = self.modes[k]
        off = sp.csr_array((n, n))
        for rate, f in factors_rates:
            off = off + rate * f
        op = off - _compensation(off)
        term = [_identity(m) for m in self.modes]
        term[k] = sp.csr_array(op)
        self.terms.append(term)
        self.local.append(k)

    def transition(self, rate, factors):
        """Synchronized or functional transition touching several modes."""
        off = [_identity(m) for m in self.modes]
        comp = [_identity(m) for m in self.modes]
        first = True
        for k, f in sorted(factors.items()):
            s = rate if first else 1.0
            off[k] = sp.csr_array(s * f)
            comp[k] = sp.csr_array((-s if first else s) * _compensation(f))
            first = False
        self.terms.extend([off, comp])
        self.local.extend([None, None])

    def model(self, name):
        return KroneckerModel(self.modes, self.terms, self.local, name)


def _per_mode(value, d, default):
    if value is None:
        return [default(k) for k in range(d)]
    if np.isscalar(value):
        return [float(value)] * d
    value = [float(v) for v in value]
    if len(value) != d:
        raise ValueError(f"expected {d} rate values, got {len(value)}")
    return value


def metab_rates(n, v, K):
    """Death rates ``v m / (m + K - 1)`` at occupancy ``m = 0..n-1``."""
    m = np.arange(n, dtype=float)
    return v * m / (m + K - 1.0)


def build_model(spec):
    """Kronecker form of one of the six benchmark models."""
    if isinstance(spec, dict):
        spec = ModelSpec.from_dict(spec)
    d, n = spec.d, spec.cap + 1
    b = _Builder([n] * d)
    kind = spec.kind

    if kind.startswith("overflow"):
        lam = _per_mode(spec.lam, d, lambda k: 1.2 - k * 0.1)
        mu = _per_mode(spec.mu, d, lambda k: 1.0)
        for k in range(d):
            b.local_term(k, [(lam[k], birth(n)), (mu[k], death(n))])
        for j in range(d):
            targets = range(j + 1, d) if kind == "overflow" else range(j + 1, min(j + 2, d))
            for m in targets:
                factors = {i: full_indicator(n) for i in range(j, m)}
                factors[m] = birth(n)
                b.transition(lam[j], factors)
        if kind == "overflowpersim":
            b.transition(lam[d - 1], {d - 1: full_indicator(n), 0: birth(n)})

    elif kind == "kanbanalt2":
        dep = _per_mode(spec.dep, d, lambda k: 1.0)
        arrival = 1.2 if spec.inflow is None else float(spec.inflow)
        b.local_term(0, [(arrival, birth(n))])
        for k in range(d - 1):
            b.transition(dep[k], {k: death(n), k + 1: birth(n)})
        b.local_term(d - 1, [(dep[d - 1], death(n))])

    else:
        v = _per_mode(spec.v, d, lambda k: 0.1)
        K = _per_mode(spec.K, d, lambda k: 1000.0)
        inflow = 0.1 if spec.inflow is None else float(spec.inflow)
        rate = [death(n, metab_rates(n, v[k], K[k])) for k in range(d)]
        b.local_term(0, [(inflow, birth(n))])
        if kind == "directedmetab":
            edges = [(k, k + 1) for k in range(d - 1)]
            sinks = [d - 1]
        else:
            edges, sinks = diverging_topology(d, spec.branch_node)
        for src, dst in edges:
            b.transition(1.0, {src: rate[src], dst: birth(n)})
        # outflow to the environment; a node may also be a sink of an empty branch
        for k in sorted(set(sinks)):
            b.local_term(k, [(1.0, rate[k])] * sinks.count(k))
    return b.model(kind)


def diverging_topology(d, branch_node=None):
    """Edges and outflow nodes of the diverging pathway (0-based modes).

    Trunk nodes come first, then the longer branch, then the shorter one.  If a
    branch is empty its reaction leaves the system directly from the branch
    node.
    """
    bn = branch_node if branch_node is not None else min(2, d - 1)
    trunk = list(range(bn))
    rest = d - bn
    len1 = (rest + 1) // 2
    branch1 = list(range(bn, bn + len1))
    branch2 = list(range(bn + len1, d))
    edges = [(k, k + 1) for k in trunk[:-1]]
    sinks = []
    hub = trunk[-1]
    for br in (branch1, branch2):
        if not br:
            sinks.append(hub)
            continue
        edges.append((hub, br[0]))
        edges.extend((a, a + 1) for a in br[:-1])
        sinks.append(br[-1])
    return edges, sinks


# ---------------------------------------------------------------------------
# dense assembly and validation


def _kron_modes(factors):
    """Matrix of ``(x)_k factors[k]`` acting on vec with the first index fastest."""
    out = sp.csr_array(factors[-1])
    for f in reversed(factors[:-1]):
        out = sp.kron(out, f, format="csr")
    return out


def assemble_sparse(model):
    a = None
    for term in model.terms:
        t = _kron_modes(term)
        a = t if a is None else a + t
    return sp.csr_array(a)


def assemble_dense(model, guard=DENSE_GUARD):
    if model.size > guard:
        raise ValueError(f"dense assembly of size {model.size} exceeds guard {guard}")
    return assemble_sparse(model).toarray()


@dataclass
class ModelValidation:
    column_sum_defect: float
    negativity_defect: float | None
    strongly_connected: bool | None

    @property
    def ok(self):
        return (
            self.column_sum_defect <= 1e-12
            and (self.negativity_defect is None or self.negativity_defect == 0.0)
            and self.strongly_connected is not False
        )


def validate_model(model, guard=DENSE_GUARD):
    """Column sums, sign pattern and irreducibility of a model.

    Column sums are checked on any size through the TT form; the sign and
    connectivity checks need the assembled matrix and are skipped (``None``)
    above ``guard`` states.
    """
    from .tt import kron_to_tt_operator, op_transpose, tt_apply, tt_norm, tt_ones

    op = kron_to_tt_operator(model)
    scale = max(sum(float(np.prod([sp.linalg.norm(f) for f in term])) for term in model.terms), 1.0)
    colsum = tt_norm(tt_apply(op_transpose(op), tt_ones(model.modes))) / scale
    if model.size > guard:
        return ModelValidation(colsum, None, None)
    a = assemble_sparse(model).tolil()
    a.setdiag(0)
    off = sp.csr_array(a)
    off.eliminate_zeros()
    neg = float(max(0.0, -off.data.min())) if off.nnz else 0.0
    pattern = sp.csr_array((np.ones(off.nnz), off.indices, off.indptr), shape=off.shape)
    # pattern[to, from]: edge from -> to; strong connectivity is orientation-free
    return ModelValidation(colsum, neg, strongly_connected(pattern))
