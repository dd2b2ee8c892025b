import numpy as np
import pytest

from ttmc.amen import (
    AmenConfig,
    ReducedProblem,
    amen_solve,
    approx_residual,
    build_reduced,
    enrich,
    solve_local_constrained,
    solve_local_normal,
)
from ttmc.models import ModelSpec, assemble_dense, build_model
from ttmc.multigrid import reference_residual
from ttmc.numkit import LinearMap, dense_stationary
from ttmc.tt import (
    TTOperator,
    TTTensor,
    kron_to_tt_operator,
    tt_apply,
    tt_hadamard_ones,
    tt_norm,
    tt_ones,
    tt_orthogonalize,
    tt_random,
    tt_sum,
)


def dense_frame(x, k):
    """Columns ``vec(X with core k replaced by a unit core)`` in C order of the core."""
    shape = x.cores[k].shape
    cols = []
    for j in range(int(np.prod(shape))):
        e = np.zeros(int(np.prod(shape)))
        e[j] = 1.0
        cores = list(x.cores)
        cores[k] = e.reshape(shape)
        cols.append(TTTensor(cores).to_vector())
    return np.column_stack(cols)


def near_identity_operator(modes, rng, eps=0.1):
    """``I + eps * R`` with a random rank-1 operator ``R`` (well conditioned)."""
    d = len(modes)
    cores = []
    for k, n in enumerate(modes):
        c = np.zeros((1 if k == 0 else 2, n, n, 1 if k == d - 1 else 2))
        eye = np.eye(n)
        rnd = rng.standard_normal((n, n)) / np.sqrt(n)
        if d == 1:
            c[0, :, :, 0] = eye + eps * rnd
        elif k == 0:
            c[0, :, :, 0], c[0, :, :, 1] = eye, eps * rnd
        elif k == d - 1:
            c[0, :, :, 0], c[1, :, :, 0] = eye, rnd
        else:
            c[0, :, :, 0], c[1, :, :, 1] = eye, rnd
        cores.append(c)
    return TTOperator(cores)


@pytest.fixture
def overflow_small():
    model = build_model(ModelSpec("overflow", 3, 2))
    return model, kron_to_tt_operator(model), assemble_dense(model)


# ---------------------------------------------------------------------------
# reduced problems


def test_reduced_matrix_rank_one_frame_d2():
    model = build_model(ModelSpec("overflow", 2, 3))
    a, A = kron_to_tt_operator(model), assemble_dense(model)
    x = tt_orthogonalize(tt_random([4, 4], 1, 0), 1)
    rp = build_reduced(a, x, 1)
    G = dense_frame(x, 1)
    assert rp.dim == 4
    assert np.allclose(rp.dense, G.T @ A.T @ A @ G, atol=1e-10)
    assert np.allclose(rp.e_tilde, G.T @ np.ones(16), atol=1e-12)


@pytest.mark.parametrize("k", [0, 1, 2])
def test_reduced_map_agrees_with_dense(overflow_small, k, rng):
    _, a, A = overflow_small
    x = tt_orthogonalize(tt_random([3, 3, 3], [1, 2, 3, 1], rng), k)
    rp = build_reduced(a, x, k)
    G = dense_frame(x, k)
    M = G.T @ A.T @ A @ G
    assert np.allclose(rp.dense, M, atol=1e-10)
    v = rng.standard_normal(rp.dim)
    assert np.allclose(rp.op(v), M @ v, atol=1e-10)
    assert rp.op.probe_symmetric(rng, tol=1e-10)
    assert np.linalg.eigvalsh(rp.dense).min() >= -1e-10 * np.abs(rp.dense).max()


def test_projected_ones_for_ones_tensor():
    # X = ones, active core 0: e~ = G^T 1 equals the right interface contraction
    x = tt_orthogonalize(tt_ones([3, 4, 5]), 0)
    model = build_model(ModelSpec("overflow", 3, 2))
    # any operator with matching modes; only e~ is checked
    a = TTOperator([np.eye(n).reshape(1, n, n, 1) for n in (3, 4, 5)])
    rp = build_reduced(a, x, 0)
    right = np.ones(20) @ (x.cores[1][0].reshape(-1, 1) @ x.cores[2].reshape(1, -1)).reshape(-1)
    G = dense_frame(x, 0)
    assert np.allclose(rp.e_tilde, G.T @ np.ones(60), atol=1e-12)
    assert np.allclose(rp.e_tilde, np.full(3, x.cores[1].sum() * x.cores[2].sum()), atol=1e-12)
    assert model.d == 3 and np.isfinite(right)


def test_build_reduced_requires_orthogonal_form(overflow_small):
    _, a, _ = overflow_small
    x = tt_random([3, 3, 3], 2, 0)
    with pytest.raises(ValueError):
        build_reduced(a, x, 1)


# ---------------------------------------------------------------------------
# local solves


def test_saddle_by_hand():
    a = 2.5
    rp = ReducedProblem(0, (1, 1, 1), LinearMap.from_dense(np.array([[a]])), e_tilde=np.ones(1), dense=np.array([[a]]))
    sol = solve_local_constrained(rp)
    assert sol.core[0] == pytest.approx(1.0)
    assert sol.multiplier == pytest.approx(-a)


def _threshold_problem(n0, n1, rng):
    a = near_identity_operator([n0, n1], rng)
    x = tt_orthogonalize(tt_random([n0, n1], [1, n0, 1], rng), 1)
    return build_reduced(a, x, 1, assemble_limit=1000)


@pytest.mark.parametrize("n0,n1,path", [(37, 27, "direct"), (77, 13, "minres")])
def test_direct_minres_threshold(n0, n1, path, rng):
    rp = _threshold_problem(n0, n1, rng)
    assert rp.dim == n0 * n1
    sol = solve_local_constrained(rp, threshold=1000, tol=1e-12, maxit=5000)
    assert sol.path == path and sol.converged
    M = rp.op.to_dense() if rp.dense is None else rp.dense
    assert np.linalg.norm(M @ sol.core + sol.multiplier * rp.e_tilde) <= 1e-8 * np.linalg.norm(M)
    assert rp.e_tilde @ sol.core == pytest.approx(1.0, abs=1e-10)


def test_minres_and_direct_agree(rng):
    rp = _threshold_problem(12, 9, rng)
    direct = solve_local_constrained(rp, threshold=1000)
    iterative = solve_local_constrained(rp, threshold=10, tol=1e-13, maxit=2000)
    assert iterative.path == "minres"
    assert np.allclose(direct.core, iterative.core, atol=1e-8)
    assert direct.multiplier == pytest.approx(iterative.multiplier, rel=1e-6, abs=1e-10)


def test_normal_local_solve_recovers_core(rng):
    modes = [4, 5, 3]
    a = near_identity_operator(modes, rng)
    x = tt_orthogonalize(tt_random(modes, 2, rng), 1)
    gstar = x.cores[1].copy()
    b = tt_apply(a, x)
    x.cores[1] = rng.standard_normal(gstar.shape)  # current core is irrelevant
    rp = build_reduced(a, x, 1, rhs=b)
    for threshold in (1000, 5):
        sol = solve_local_normal(rp, threshold=threshold, tol=1e-13, maxit=2000)
        assert np.allclose(sol.core, gstar.ravel(), atol=1e-8)
    zero = build_reduced(a, x, 1, rhs=tt_sum([b], [0.0]))
    assert np.all(solve_local_normal(zero).core == 0)


@pytest.mark.parametrize("seed", range(5))
def test_normal_rhs_projection_dense(seed):
    rng = np.random.default_rng(seed)
    modes = [3, 4, 3]
    a = near_identity_operator(modes, rng, eps=0.5)
    A = a.full()
    x = tt_orthogonalize(tt_random(modes, [1, 3, 4, 1], rng), 1)
    b = tt_random(modes, 2, rng)
    rp = build_reduced(a, x, 1, rhs=b)
    G = dense_frame(x, 1)
    assert rp.dim <= 200
    assert np.allclose(rp.rhs, G.T @ A.T @ b.to_vector(), atol=1e-9)
    assert np.allclose(rp.dense, G.T @ A.T @ A @ G, atol=1e-9)


# ---------------------------------------------------------------------------
# residual approximation and enrichment


def test_approx_residual_exact_for_sufficient_rank():
    model = build_model(ModelSpec("overflow", 2, 3))
    a = kron_to_tt_operator(model)
    x = tt_random([4, 4], 2, 3)
    target = -tt_apply(a, x).to_vector()
    z = approx_residual(a, x, rank=4)
    assert max(z.ranks) <= 4
    assert np.linalg.norm(z.to_vector() - target) <= 1e-10 * np.linalg.norm(target)


def test_approx_residual_low_rank_and_exact_solution():
    model = build_model(ModelSpec("kanbanalt2", 3, 2))
    a = kron_to_tt_operator(model)
    pi = dense_stationary(assemble_dense(model))
    x = TTTensor.from_vector(pi, model.modes)
    z = approx_residual(a, x, rank=2)
    assert max(z.ranks) <= 2
    assert tt_norm(z) <= 1e-12
    # normal variant: target A^T (b - A x) vanishes when b = A x
    zn = approx_residual(a, x, rhs=tt_apply(a, x), rank=3)
    assert tt_norm(zn) <= 1e-12


@pytest.mark.parametrize("k", [1, 2])
def test_enrich_preserves_value_and_adds_rank(k, rng):
    x = tt_random([4, 5, 4], [1, 2, 2, 1], rng)
    direction = tt_random([4, 5, 4], 3, rng)
    y = enrich(x, k, direction, 2)
    assert np.allclose(y.full(), x.full(), atol=1e-13 * np.abs(x.full()).max())
    assert y.ranks[k] == x.ranks[k] + 2
    c = y.cores[k - 1]
    m = c.reshape(-1, c.shape[2])
    assert np.allclose(m.T @ m, np.eye(m.shape[1]), atol=1e-12)


def test_enrich_validates_position(rng):
    x = tt_random([3, 3], 1, rng)
    with pytest.raises(ValueError):
        enrich(x, 0, x, 1)
    with pytest.raises(ValueError):
        enrich(x, 2, x, 1)


@pytest.mark.parametrize("seed", range(6))
def test_enrichment_never_hurts_local_solve(seed):
    rng = np.random.default_rng(seed)
    model = build_model(ModelSpec("overflow", 2, 5))
    a = kron_to_tt_operator(model)
    x0 = tt_random([6, 6], 1, rng)
    # plain: move the center to core 1 and solve there
    plain = tt_orthogonalize(x0, 1)
    sol = solve_local_constrained(build_reduced(a, plain, 1))
    plain.cores[1] = sol.core.reshape(plain.cores[1].shape)
    # enriched: augment the interface with residual directions, then solve
    direction = approx_residual(a, tt_orthogonalize(x0, 0), rank=3)
    rich = enrich(tt_orthogonalize(x0, 0), 1, direction, 3)
    sol = solve_local_constrained(build_reduced(a, rich, 1))
    rich.cores[1] = sol.core.reshape(rich.cores[1].shape)
    assert tt_norm(tt_apply(a, rich)) <= tt_norm(tt_apply(a, plain)) * (1 + 1e-10)


# ---------------------------------------------------------------------------
# full solver


def test_amen_overflow_d3_against_oracle(overflow_small):
    model, a, A = overflow_small
    ref = reference_residual(a, model.modes)
    x, rep = amen_solve(a, cfg=AmenConfig(residual_target=1e-2 * ref))
    assert rep.converged
    assert tt_norm(tt_apply(a, x)) <= 1e-2 * ref
    assert np.abs(x.to_vector() - dense_stationary(A)).max() <= 1e-4
    assert abs(tt_hadamard_ones(x) - 1) <= 1e-12
    assert rep.telemetry["constraint_defect"] <= 1e-10
    assert len(rep.residuals) == rep.iterations
    assert rep.telemetry["conditions"] and all(c >= 1 for _, c in rep.telemetry["conditions"])


def test_amen_one_sweep_full_rank_d2():
    model = build_model(ModelSpec("overflow", 2, 1))
    a = kron_to_tt_operator(model)
    x0 = tt_random([2, 2], [1, 2, 1], 5)
    x, _ = amen_solve(a, cfg=AmenConfig(enrichment_rank=0, max_sweeps=1, trunc_tol=0.0), x0=x0)
    assert np.abs(x.to_vector() - dense_stationary(assemble_dense(model))).max() <= 1e-8


def test_amen_normal_recovers_known_solution():
    rng = np.random.default_rng(11)
    modes = [4, 3, 5]
    a = near_identity_operator(modes, rng, eps=0.3)
    xk = tt_random(modes, 2, rng)
    b = tt_apply(a, xk)
    x, rep = amen_solve(a, "normal", AmenConfig(residual_target=1e-12 * tt_norm(b), max_sweeps=10), rhs=b)
    err = np.linalg.norm(x.to_vector() - xk.to_vector()) / np.linalg.norm(xk.to_vector())
    assert err <= 1e-6
    assert rep.converged


def test_amen_normal_zero_rhs():
    model = build_model(ModelSpec("overflow", 2, 2))
    a = kron_to_tt_operator(model)
    x, rep = amen_solve(a, "normal", AmenConfig(), rhs=tt_sum([tt_ones([3, 3])], [0.0]))
    assert tt_norm(x) == 0.0 and rep.converged


def test_amen_reports_non_convergence_without_raising():
    model = build_model(ModelSpec("overflow", 3, 4))
    a = kron_to_tt_operator(model)
    x, rep = amen_solve(a, cfg=AmenConfig(residual_target=1e-30, max_sweeps=2))
    assert rep.status == "not_converged" and rep.iterations == 2
    assert rep.final_residual == min(rep.residuals) or np.isfinite(tt_norm(x))


def test_amen_config_validation():
    with pytest.raises(ValueError):
        AmenConfig(enrichment_rank=-1)
    with pytest.raises(ValueError):
        AmenConfig(local_direct_threshold=0)
    with pytest.raises(ValueError):
        amen_solve(kron_to_tt_operator(build_model(ModelSpec("overflow", 2, 1))), "normal")
