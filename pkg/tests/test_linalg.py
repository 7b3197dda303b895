import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from neuralccm import linalg
from neuralccm.dynamics import make_benchmark

from oracles import charpoly_eigs, gram_schmidt_complement

# eigenvalues of the seeded matrix below, from determinant bisection (oracles.charpoly_eigs)
SEEDED_SYM6_EIGS = [-6.042147461388028, -2.422774759534553, -0.5037461233382301,
                    2.820109154566154, 3.00299575304584, 6.817896258395299]


def seeded_sym6():
    a = np.random.default_rng(6).standard_normal((6, 6))
    return a + a.T


def test_eig_max_2x2():
    assert linalg.sym_eig_max(np.array([[2.0, 1.0], [1.0, 2.0]])) == pytest.approx(3.0, abs=1e-12)


@pytest.mark.parametrize("n", [1, 3, 7])
def test_eig_max_identity(n):
    assert linalg.sym_eig_max(np.eye(n)) == pytest.approx(1.0, abs=1e-12)


def test_eig_against_determinant_bisection():
    a = seeded_sym6()
    assert np.max(np.abs(charpoly_eigs(a) - SEEDED_SYM6_EIGS)) <= 1e-8
    got = linalg.sym_eigvals(a)
    assert np.max(np.abs(got - SEEDED_SYM6_EIGS)) <= 1e-8
    assert abs(linalg.sym_eig_max(a) - SEEDED_SYM6_EIGS[-1]) <= 1e-10 * (1 + linalg.fro(a))
    assert abs(linalg.sym_eig_min(a) - SEEDED_SYM6_EIGS[0]) <= 1e-10 * (1 + linalg.fro(a))


def test_eig_batched_matches_single():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((5, 4, 4))
    a = a + np.swapaxes(a, 1, 2)
    batched = linalg.sym_eig_max(a)
    assert np.allclose(batched, [linalg.sym_eig_max(x) for x in a], atol=0, rtol=0)


def test_eig_rejects_bad_input():
    with pytest.raises(linalg.ContractError):
        linalg.sym_eig_max(np.ones((2, 3)))
    with pytest.raises(linalg.ContractError):
        linalg.sym_eig_max(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_symmetry_tolerance_is_relative():
    a = np.array([[1.0, 1.0], [1.0 + 1e-12, 1.0]])
    linalg.check_symmetric(a)
    with pytest.raises(linalg.ContractError):
        linalg.check_symmetric(np.array([[1.0, 1.0], [1.0 + 1e-6, 1.0]]))


def test_null_space_dubins_exact():
    b = np.array([[0, 0], [0, 0], [1, 0], [0, 1]], dtype=float)
    q = linalg.null_space_basis(b)
    assert q.shape == (4, 2)
    assert np.all(q.T @ b == 0)
    proj = q @ q.T
    assert np.allclose(proj, np.diag([1, 1, 0, 0]), atol=1e-15)


def test_null_space_square_is_empty():
    q = linalg.null_space_basis(np.array([[2.0, 1.0], [0.0, 3.0]]))
    assert q.shape == (2, 0)


def test_null_space_segway_against_gram_schmidt():
    model = make_benchmark("segway")
    b = model.B(np.array([[0.0, 0.0, 0.0, 0.0]]))[0]
    q = linalg.null_space_basis(b)
    assert q.shape == (4, 3)
    assert np.linalg.norm(q.T @ b) <= 1e-12
    assert np.allclose(q.T @ q, np.eye(3), atol=1e-12)
    ref = gram_schmidt_complement(b)
    assert np.allclose(q @ q.T, ref @ ref.T, atol=1e-12)


def test_null_space_rank_deficient():
    with pytest.raises(linalg.ContractError):
        linalg.null_space_basis(np.array([[1.0, 2.0], [2.0, 4.0], [0.0, 0.0]]))


def test_null_space_deterministic():
    b = np.random.default_rng(3).standard_normal((5, 2))
    assert np.array_equal(linalg.null_space_basis(b), linalg.null_space_basis(b.copy()))


def test_spectral_norm_examples():
    assert linalg.spectral_norm(np.diag([3.0, -5.0])) == pytest.approx(5.0, rel=1e-12)
    assert linalg.spectral_norm(np.zeros((3, 2))) == 0.0


def test_spectral_norm_cross_check():
    a = np.random.default_rng(4).standard_normal((4, 7))
    ref = np.sqrt(linalg.sym_eig_max(a @ a.T))
    assert abs(linalg.spectral_norm(a) - ref) <= 1e-7


def test_inverse_examples():
    assert np.array_equal(linalg.inverse(np.eye(3)), np.eye(3))
    assert np.allclose(linalg.inverse(np.diag([2.0, 4.0])), np.diag([0.5, 0.25]), atol=1e-15)
    c = np.random.default_rng(5).standard_normal((6, 6))
    a = c.T @ c + 0.1 * np.eye(6)
    assert linalg.fro(a @ linalg.inverse(a) - np.eye(6)) <= 1e-10


def test_inverse_singular():
    with pytest.raises(linalg.SingularMatrixError):
        linalg.inverse(np.array([[1.0, 2.0], [2.0, 4.0]]))


def test_random_unit_vectors():
    p = linalg.random_unit_vectors(np.random.default_rng(0), 100, 5)
    assert p.shape == (100, 5)
    assert np.allclose(np.linalg.norm(p, axis=1), 1.0, atol=1e-14)


sym = st.integers(2, 6).flatmap(
    lambda n: arrays(np.float64, (n, n), elements=st.floats(-10, 10, allow_nan=False))
).map(lambda a: a + a.T)


@settings(max_examples=60, deadline=None)
@given(sym)
def test_eig_max_dominates_min(a):
    assert linalg.sym_eig_max(a) + linalg.sym_eig_max(-a) >= -1e-10 * (1 + linalg.fro(a))


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 6).flatmap(lambda n: st.tuples(
    arrays(np.float64, (n, n), elements=st.floats(-5, 5, allow_nan=False)),
    arrays(np.float64, (n, n), elements=st.floats(-5, 5, allow_nan=False)))))
def test_eig_max_lipschitz_in_spectral_norm(pair):
    a, b = (x + x.T for x in pair)
    gap = abs(linalg.sym_eig_max(a) - linalg.sym_eig_max(b))
    assert gap <= linalg.spectral_norm(a - b) + 1e-9 * (1 + linalg.fro(a) + linalg.fro(b))


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 6).flatmap(lambda n: st.integers(1, n - 1).flatmap(
    lambda m: arrays(np.float64, (n, m), elements=st.floats(-3, 3, allow_nan=False)))))
def test_null_space_orthonormal(b):
    try:
        q = linalg.null_space_basis(b)
    except linalg.ContractError:
        assert np.linalg.matrix_rank(b, tol=1e-8) < b.shape[1] or np.linalg.svd(b)[1][-1] < 1e-6
        return
    assert np.allclose(q.T @ q, np.eye(q.shape[1]), atol=1e-12)
    assert np.linalg.norm(q.T @ b) <= 1e-12 * (1 + np.linalg.norm(b)) * 10
