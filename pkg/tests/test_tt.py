import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from ttmc.models import ModelSpec, assemble_dense, build_model
from ttmc.tt import (
    TTOperator,
    TTTensor,
    TruncationPolicy,
    dumps_ttf1,
    kron_to_tt_operator,
    load_ttf1,
    loads_ttf1,
    op_compose,
    op_identity,
    op_round,
    op_transpose,
    save_ttf1,
    tt_add,
    tt_apply,
    tt_from_dense,
    tt_hadamard_ones,
    tt_inner,
    tt_norm,
    tt_ones,
    tt_orthogonalize,
    tt_random,
    tt_scale,
    tt_sum,
    tt_truncate,
    tt_zeros,
)


@st.composite
def tt_tensors(draw, max_d=4, max_n=6, max_r=5):
    d = draw(st.integers(1, max_d))
    modes = draw(st.lists(st.integers(1, max_n), min_size=d, max_size=d))
    inner = draw(st.lists(st.integers(1, max_r), min_size=d - 1, max_size=d - 1))
    seed = draw(st.integers(0, 2**31 - 1))
    return tt_random(modes, [1] + inner + [1], seed)


def random_operator(modes, rank, rng):
    d = len(modes)
    ranks = [1] + [rank] * (d - 1) + [1]
    return TTOperator([rng.standard_normal((ranks[k], n, n, ranks[k + 1])) for k, n in enumerate(modes)])


def test_full_matches_core_products():
    # X[i, j] = G1[:, i, :] @ G2[:, j, :]
    rng = np.random.default_rng(0)
    g1, g2 = rng.standard_normal((1, 3, 2)), rng.standard_normal((2, 4, 1))
    x = TTTensor([g1, g2])
    ref = np.einsum("aib,bjc->ij", g1, g2)
    assert np.allclose(x.full(), ref, atol=1e-14)
    assert np.allclose(x.to_vector(), ref.reshape(-1, order="F"))


def test_ones_and_zeros():
    assert np.array_equal(tt_ones([2, 3]).full(), np.ones((2, 3)))
    assert np.array_equal(tt_zeros([2, 3]).full(), np.zeros((2, 3)))
    assert tt_hadamard_ones(tt_ones([2, 3, 4])) == 24.0


def test_invalid_cores_rejected():
    with pytest.raises(ValueError):
        TTTensor([np.ones((1, 2, 2)), np.ones((3, 2, 1))])
    with pytest.raises(ValueError):
        TTTensor([np.ones((2, 2, 1))])
    with pytest.raises(ValueError):
        TTTensor([])


def test_dense_guard():
    x = tt_ones([101] * 3)
    with pytest.raises(ValueError):
        x.full()


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(tt_tensors(), st.floats(-3, 3), st.integers(0, 10**6))
def test_linear_algebra_agrees_with_dense(x, alpha, seed):
    y = tt_random(x.modes, 2, seed)
    fx, fy = x.full(), y.full()
    scale = 1 + np.abs(fx).max() + np.abs(fy).max()
    assert np.allclose(tt_add(x, y).full(), fx + fy, atol=1e-12 * scale)
    assert np.allclose(tt_scale(alpha, x).full(), alpha * fx, atol=1e-12 * scale)
    assert np.allclose(tt_sum([x, y], [alpha, -1.0]).full(), alpha * fx - fy, atol=1e-12 * scale)
    assert abs(tt_inner(x, y) - np.sum(fx * fy)) <= 1e-12 * scale**2 * fx.size
    assert abs(tt_norm(x) - np.linalg.norm(fx)) <= 1e-12 * scale * np.sqrt(fx.size)
    assert abs(tt_hadamard_ones(x) - fx.sum()) <= 1e-12 * scale * fx.size
    # rank arithmetic of the sum
    assert tt_add(x, y).ranks[1:-1] == [a + b for a, b in zip(x.ranks[1:-1], y.ranks[1:-1])]


@settings(max_examples=30, deadline=None)
@given(tt_tensors(max_d=3, max_n=4, max_r=3), st.integers(1, 3), st.integers(0, 10**6))
def test_apply_agrees_with_dense(x, rank, seed):
    a = random_operator(x.modes, rank, np.random.default_rng(seed))
    y = tt_apply(a, x)
    assert np.allclose(y.to_vector(), a.full() @ x.to_vector(), atol=1e-10 * (1 + np.abs(a.full()).sum()))
    assert y.ranks == [p * q for p, q in zip([1] + [rank] * (x.d - 1) + [1], x.ranks)]


@settings(max_examples=40, deadline=None)
@given(tt_tensors(), st.data())
def test_orthogonalize_preserves_value(x, data):
    center = data.draw(st.integers(0, x.d - 1))
    y = tt_orthogonalize(x, center)
    assert y.orth == ("center", center)
    assert y.check_orth(1e-10)
    assert np.allclose(y.full(), x.full(), atol=1e-12 * (1 + np.abs(x.full()).max()))
    assert abs(tt_norm(y) - np.linalg.norm(x.full())) <= 1e-10 * (1 + np.linalg.norm(x.full()))


@settings(max_examples=40, deadline=None)
@given(tt_tensors(), st.floats(1e-3, 0.5))
def test_truncation_error_bound(x, rel):
    policy = TruncationPolicy(rel_tol=rel)
    y = tt_truncate(x, policy)
    err = np.linalg.norm(y.full() - x.full())
    assert err <= rel * np.linalg.norm(x.full()) * (1 + 1e-8) + 1e-14
    assert all(r1 <= r0 for r1, r0 in zip(y.ranks, x.ranks))
    assert y.check_orth(1e-10)


@settings(max_examples=25, deadline=None)
@given(tt_tensors(max_d=4, max_n=5, max_r=5), st.integers(1, 2))
def test_truncation_rank_cap(x, cap):
    y = tt_truncate(x, TruncationPolicy(max_rank=cap))
    assert y.max_rank <= cap


def test_tt_svd_exact_and_optimal_rank():
    rng = np.random.default_rng(3)
    # a dense tensor of exact TT ranks (1, 2, 3, 1)
    src = tt_random([4, 5, 6], [1, 2, 3, 1], rng)
    y = tt_from_dense(src.full(), tol=1e-10)
    assert y.ranks == [1, 2, 3, 1]
    assert np.allclose(y.full(), src.full(), atol=1e-10)


def test_operator_helpers():
    rng = np.random.default_rng(4)
    a = random_operator([2, 3], 2, rng)
    b = random_operator([2, 3], 3, rng)
    assert np.allclose(op_transpose(a).full(), a.full().T)
    assert np.allclose(op_compose(a, b).full(), a.full() @ b.full())
    assert np.allclose(op_identity([2, 3]).full(), np.eye(6))
    r = op_round(op_compose(a, op_identity([2, 3])))
    assert max(r.ranks) <= 2
    assert np.allclose(r.full(), a.full(), atol=1e-12 * np.abs(a.full()).max())


def test_kron_ordering_convention():
    # sum_t E_1 (x) E_2 acts on vec(X) with the first index fastest: kron(E_2, E_1)
    rng = np.random.default_rng(5)
    e1, e2 = rng.standard_normal((2, 2)), rng.standard_normal((3, 3))
    model = type("M", (), {"terms": [[e1, e2]], "modes": [2, 3]})()
    op = kron_to_tt_operator(model)
    assert np.allclose(op.full(), np.kron(e2, e1))


@pytest.mark.parametrize("kind", ["overflow", "kanbanalt2", "divergingmetab"])
def test_kron_to_tt_matches_sparse_assembly(kind):
    model = build_model(ModelSpec(kind, 4, 2))
    op = kron_to_tt_operator(model)
    assert np.allclose(op.full(), assemble_dense(model), atol=1e-12)
    assert max(op.ranks) <= model.n_terms


def test_ttf1_roundtrip_and_layout(tmp_path):
    x = tt_random([2, 3, 4], [1, 2, 3, 1], 7)
    buf = dumps_ttf1(x)
    assert buf[:4] == b"TTF1"
    assert int.from_bytes(buf[4:12], "little") == 3
    assert len(buf) == 4 + 8 + 8 * 3 + 8 * 4 + 8 * sum(c.size for c in x.cores)
    y = loads_ttf1(buf)
    assert all(np.array_equal(a, b) for a, b in zip(x.cores, y.cores))
    path = tmp_path / "x.ttf1"
    save_ttf1(path, x)
    assert dumps_ttf1(load_ttf1(path)) == buf
    with pytest.raises(ValueError):
        loads_ttf1(b"XXXX" + buf[4:])
    with pytest.raises(ValueError):
        loads_ttf1(buf + b"\0")
