import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qlab.errors import ContractViolation, FactorizationError
from qlab.ndkernel import cholesky, frobenius_norm, matmul, solve_spd, spd_inverse


def naive_matmul(a, b):
    n, k = a.shape
    k2, m = b.shape
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def det_recursive(a):
    n = a.shape[0]
    if n == 1:
        return a[0, 0]
    total = 0.0
    for j in range(n):
        minor = np.delete(np.delete(a, 0, axis=0), j, axis=1)
        total += ((-1.0) ** j) * a[0, j] * det_recursive(minor)
    return total


def adjugate_inverse(a):
    n = a.shape[0]
    d = det_recursive(a)
    cof = np.zeros_like(a)
    for i in range(n):
        for j in range(n):
            minor = np.delete(np.delete(a, i, axis=0), j, axis=1)
            cof[i, j] = ((-1.0) ** (i + j)) * det_recursive(minor)
    return cof.T / d


def random_spd(rng, n, jitter=0.5):
    a = rng.standard_normal((n, n))
    return a @ a.T + jitter * np.eye(n)


def test_matmul_identity():
    rng = np.random.Generator(np.random.PCG64(0))
    a = rng.standard_normal((3, 3))
    assert np.array_equal(matmul(np.eye(3), a), a)


def test_matmul_hand_case():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[5.0], [6.0]])
    assert np.array_equal(matmul(a, b), np.array([[17.0], [39.0]]))


def test_matmul_against_triple_loop():
    rng = np.random.Generator(np.random.PCG64(1))
    a = rng.standard_normal((7, 5))
    b = rng.standard_normal((5, 3))
    assert np.max(np.abs(matmul(a, b) - naive_matmul(a, b))) < 1e-12


def test_matmul_dimension_mismatch():
    with pytest.raises(ContractViolation):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_associativity():
    rng = np.random.Generator(np.random.PCG64(2))
    for _ in range(10):
        a, b, c = (rng.standard_normal((4, 4)) for _ in range(3))
        left = matmul(matmul(a, b), c)
        right = matmul(a, matmul(b, c))
        scale = max(np.max(np.abs(left)), 1.0)
        assert np.max(np.abs(left - right)) < 1e-10 * scale


def test_cholesky_identity():
    assert np.array_equal(cholesky(np.eye(4)), np.eye(4))


def test_cholesky_hand_case():
    L = cholesky(np.array([[4.0, 2.0], [2.0, 3.0]]))
    expected = np.array([[2.0, 0.0], [1.0, np.sqrt(2.0)]])
    assert np.max(np.abs(L - expected)) < 1e-14
    assert np.max(np.abs(L @ L.T - [[4, 2], [2, 3]])) < 1e-14


def test_cholesky_indefinite_reports_pivot():
    with pytest.raises(FactorizationError) as exc:
        cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))
    assert exc.value.pivot == 1


def test_cholesky_rejects_asymmetric():
    a = np.array([[2.0, 1.0], [0.5, 2.0]])
    with pytest.raises(ContractViolation):
        cholesky(a)


def test_cholesky_reconstruction_and_positive_diagonal():
    rng = np.random.Generator(np.random.PCG64(3))
    for n in (2, 5, 17, 64):
        h = random_spd(rng, n)
        L = cholesky(h)
        assert np.all(np.diag(L) > 0)
        rel = np.linalg.norm(L @ L.T - h) / np.linalg.norm(h)
        assert rel < 1e-10


def test_cholesky_of_LLt_recovers_L():
    rng = np.random.Generator(np.random.PCG64(4))
    L = np.tril(rng.standard_normal((6, 6)))
    L[np.diag_indices(6)] = np.abs(np.diag(L)) + 0.5
    L2 = cholesky(L @ L.T)
    assert np.max(np.abs(L2 - L)) < 1e-10


def test_solve_spd_identity_and_diagonal():
    b = np.array([[1.0], [2.0]])
    assert np.allclose(solve_spd(np.eye(2), b), b)
    x = solve_spd(np.array([[4.0, 0.0], [0.0, 9.0]]), np.array([[8.0], [27.0]]))
    assert np.allclose(x, [[2.0], [3.0]])


def test_solve_spd_against_adjugate_inverse():
    rng = np.random.Generator(np.random.PCG64(5))
    h = random_spd(rng, 6)
    b = rng.standard_normal((6, 2))
    x = solve_spd(h, b)
    x_oracle = adjugate_inverse(h) @ b
    assert np.max(np.abs(x - x_oracle)) < 1e-8
    residual = np.linalg.norm(h @ x - b) / np.linalg.norm(b)
    assert residual < 1e-8


def test_solve_spd_residual_up_to_256():
    rng = np.random.Generator(np.random.PCG64(6))
    for n in (16, 64, 256):
        h = random_spd(rng, n, jitter=1.0)
        b = rng.standard_normal((n, 3))
        x = solve_spd(h, b)
        assert np.linalg.norm(h @ x - b) / np.linalg.norm(b) < 1e-8


def test_spd_inverse():
    rng = np.random.Generator(np.random.PCG64(7))
    h = random_spd(rng, 8)
    assert np.max(np.abs(h @ spd_inverse(h) - np.eye(8))) < 1e-8


def test_frobenius_norm_cases():
    assert frobenius_norm(np.zeros((3, 3))) == 0.0
    assert frobenius_norm(np.array([[3.0, 4.0]])) == 5.0


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_frobenius_matches_elementwise_sum(seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    a = rng.standard_normal((4, 4))
    oracle = np.sqrt(sum(a[i, j] ** 2 for i in range(4) for j in range(4)))
    got = frobenius_norm(a)
    assert abs(got - oracle) <= 1e-14 * max(oracle, 1.0)
