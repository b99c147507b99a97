import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from specbias.errors import IllConditionedError, InputError
from specbias.linalg import (
    clamp_floor,
    cluster_projectors,
    eigenvalue_clusters,
    eigh,
    frobenius_distance,
    solve_spd,
    sym,
)

from conftest import random_psd


def test_identity_2x2():
    d = eigh(np.eye(2))
    assert np.allclose(d.eigenvalues, [1, 1])
    assert np.allclose(d.eigenvectors.T @ d.eigenvectors, np.eye(2))
    for col in d.eigenvectors.T:
        assert col[np.argmax(np.abs(col))] >= 0


def test_two_by_two_analytic():
    d = eigh([[2.0, 1.0], [1.0, 2.0]])
    assert np.allclose(d.eigenvalues, [3, 1])
    assert np.allclose(d.eigenvectors[:, 0], np.array([1, 1]) / np.sqrt(2))
    assert np.allclose(np.abs(d.eigenvectors[:, 1]), np.array([1, 1]) / np.sqrt(2))
    assert d.eigenvectors[0, 1] * d.eigenvectors[1, 1] < 0


def test_random_reconstruction(rng):
    A = sym(rng.standard_normal((64, 64)))
    d = eigh(A)
    assert np.linalg.norm(d.reconstruct() - A) <= 1e-10 * np.linalg.norm(A)
    assert np.linalg.norm(d.eigenvectors.T @ d.eigenvectors - np.eye(64)) <= 1e-8 * 64
    assert np.all(np.diff(d.eigenvalues) <= 0)


def test_eigh_deterministic(rng):
    A = sym(rng.standard_normal((20, 20)))
    a, b = eigh(A), eigh(A.copy())
    assert np.array_equal(a.eigenvalues, b.eigenvalues)
    assert np.array_equal(a.eigenvectors, b.eigenvectors)


def test_eigh_rejects_nonfinite():
    with pytest.raises(InputError):
        eigh([[1.0, np.nan], [np.nan, 1.0]])


def test_known_spectrum_recovered(rng):
    n = 30
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    lam = np.linspace(10, 1, n)
    d = eigh((Q * lam) @ Q.T)
    assert np.allclose(d.eigenvalues, lam, rtol=1e-9)
    overlaps = np.abs(np.sum(Q * d.eigenvectors, axis=0))
    assert np.all(overlaps >= 1 - 1e-8)


def test_permutation_invariant(rng):
    A, lam, _ = random_psd(rng, 25)
    p = rng.permutation(25)
    assert np.allclose(eigh(A[np.ix_(p, p)]).eigenvalues, eigh(A).eigenvalues, atol=1e-10)


def test_clamp_floor():
    d = eigh(np.diag([1.0, 1e-15, -1e-14]))
    c, keep = clamp_floor(d)
    assert c.eigenvalues.min() >= 1e-12
    assert keep.tolist() == [True, False, False]


def test_solve_examples():
    assert np.allclose(solve_spd(np.eye(2), [3, 4]), [3, 4])
    assert np.allclose(solve_spd(np.diag([2.0, 4.0]), [3, 5], ridge=1.0), [1, 1])


@pytest.mark.parametrize("n", [32, 128, 512])
def test_solve_residual(rng, n):
    A, _, _ = random_psd(rng, n)
    b = rng.standard_normal(n)
    x = solve_spd(A, b, ridge=1e-3)
    assert np.linalg.norm((A + 1e-3 * np.eye(n)) @ x - b) <= 1e-8 * np.linalg.norm(b)


def test_solve_singular_reports_eigenvalue():
    with pytest.raises(IllConditionedError) as info:
        solve_spd(np.diag([1.0, 0.0]), [1, 1])
    assert info.value.smallest_eigenvalue is not None


def test_frobenius_examples(rng):
    A = rng.standard_normal((16, 16))
    assert frobenius_distance(A, A) == 0
    assert frobenius_distance(np.eye(2), np.zeros((2, 2))) == pytest.approx(np.sqrt(2))
    B = rng.standard_normal((16, 16))
    total = 0.0
    for i in range(16):
        for j in range(16):
            total += (A[i, j] - B[i, j]) ** 2
    assert abs(frobenius_distance(A, B) - np.sqrt(total)) <= 1e-12
    with pytest.raises(InputError):
        frobenius_distance(A, np.eye(3))


def test_clusters_and_projectors():
    lam = np.array([3.0, 3.0 * (1 + 1e-9), 1.0])
    cl = eigenvalue_clusters(np.sort(lam)[::-1])
    assert [len(c) for c in cl] == [2, 1]
    d = eigh(np.diag([3.0, 3.0, 1.0]))
    P = cluster_projectors(d, eigenvalue_clusters(d.eigenvalues))
    assert np.allclose(P[0], np.diag([1, 1, 0]))


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 24), st.integers(0, 2**31 - 1))
def test_reconstruction_property(n, seed):
    A = sym(np.random.default_rng(seed).standard_normal((n, n)))
    d = eigh(A)
    assert np.linalg.norm(d.reconstruct() - A) <= 1e-8 * max(1.0, np.linalg.norm(A))
