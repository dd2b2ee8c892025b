"""Independent reference constructions used by the tests.

The generators here are built by enumerating states and applying each model's
transition rules directly, without any Kronecker structure.
"""

import itertools

import numpy as np


def state_index(s, n):
    """Position of state ``s`` in vec order (first subsystem fastest)."""
    return sum(int(v) * n**k for k, v in enumerate(s))


def _metab_rate(m, v=0.1, K=1000.0):
    return v * m / (m + K - 1.0)


def enumerate_generator(kind, d, cap, branch_edges=None, branch_sinks=None):
    """Transposed generator ``A[to, from]`` of a benchmark model, by enumeration."""
    n = cap + 1
    N = n**d
    A = np.zeros((N, N))

    def add(s, t, rate):
        if rate == 0.0:
            return
        i, j = state_index(s, n), state_index(t, n)
        A[j, i] += rate
        A[i, i] -= rate

    for s in itertools.product(range(n), repeat=d):
        s = list(s)
        if kind.startswith("overflow"):
            lam = [1.2 - 0.1 * k for k in range(d)]
            for k in range(d):
                if s[k] > 0:
                    t = s.copy()
                    t[k] -= 1
                    add(s, t, 1.0)
                # arrival at queue k: stays, overflows, or is lost
                target = None
                if s[k] < cap:
                    target = k
                elif kind == "overflow":
                    for m in range(k + 1, d):
                        if s[m] < cap:
                            target = m
                            break
                elif k + 1 < d:
                    if s[k + 1] < cap:
                        target = k + 1
                elif kind == "overflowpersim" and s[0] < cap:
                    target = 0
                if target is not None:
                    t = s.copy()
                    t[target] += 1
                    add(s, t, lam[k])
        elif kind == "kanbanalt2":
            if s[0] < cap:
                t = s.copy()
                t[0] += 1
                add(s, t, 1.2)
            for k in range(d - 1):
                if s[k] > 0 and s[k + 1] < cap:
                    t = s.copy()
                    t[k] -= 1
                    t[k + 1] += 1
                    add(s, t, 1.0)
            if s[d - 1] > 0:
                t = s.copy()
                t[d - 1] -= 1
                add(s, t, 1.0)
        elif kind in ("directedmetab", "divergingmetab"):
            if kind == "directedmetab":
                edges = [(k, k + 1) for k in range(d - 1)]
                sinks = [d - 1]
            else:
                edges, sinks = branch_edges, branch_sinks
            if s[0] < cap:
                t = s.copy()
                t[0] += 1
                add(s, t, 0.1)
            for a, b in edges:
                if s[b] < cap:
                    t = s.copy()
                    t[a] -= 1
                    t[b] += 1
                    add(s, t, _metab_rate(s[a]))
            for k in sinks:
                t = s.copy()
                t[k] -= 1
                add(s, t, _metab_rate(s[k]))
        else:
            raise ValueError(kind)
    return A


def null_vector(A):
    """Normalized null vector by SVD, independent of the LU-based oracle."""
    _, _, vt = np.linalg.svd(A)
    v = vt[-1]
    return v / v.sum()


def dense_gmres(A, b, x0, steps):
    """Textbook GMRES via explicit Krylov basis and least squares."""
    r0 = b - A @ x0
    beta = np.linalg.norm(r0)
    V = [r0 / beta]
    H = np.zeros((steps + 1, steps))
    for j in range(steps):
        w = A @ V[j]
        for i in range(j + 1):
            H[i, j] = V[i] @ w
            w = w - H[i, j] * V[i]
        H[j + 1, j] = np.linalg.norm(w)
        V.append(w / H[j + 1, j])
    e1 = np.zeros(steps + 1)
    e1[0] = beta
    y = np.linalg.lstsq(H, e1, rcond=None)[0]
    return x0 + np.column_stack(V[:steps]) @ y
