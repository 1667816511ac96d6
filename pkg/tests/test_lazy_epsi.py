import numpy as np
import pytest

import epsi_bench.lazy_epsi as lazy
from epsi_bench.epsi import epsi_step, make_state
from epsi_bench.lazy_epsi import (
    LazyOptions,
    _append_orthonormal,
    deflated_epsi_update,
    initial_basis,
    lazy_epsi_solve,
    orthogonalization_step,
)
from epsi_bench.matrix_core import SpectrumSpec, gen_synthetic
from epsi_bench.sketch import NystromApprox, estimate_distortion, nystrom_approximate

from conftest import random_orthonormal


def perturbed_basis(ref, k, delta, rng):
    """Orthonormal ``U`` with ``||V2^T U||_2 = delta`` and a random rotation inside V1."""
    n = ref.V.shape[0]
    Q = random_orthonormal(k, k, rng)
    Z = random_orthonormal(n - k, k, rng)
    return ref.V1(k) @ Q * np.sqrt(1 - delta**2) + ref.V2(k) @ Z * delta


# -- deflated update ------------------------------------------------------------------

def test_deflated_update_without_deflation_is_epsi_core(rng):
    A, _ = gen_synthetic(SpectrumSpec(80, kappa=100.0), 0)
    nys = nystrom_approximate(A, 12, seed=0)
    u = rng.standard_normal(80)
    u /= np.linalg.norm(u)
    state = make_state(A, u)
    w = deflated_epsi_update(A, nys, np.empty((80, 0)), u, state.lambda_R)
    w /= np.linalg.norm(w)
    w *= np.sign(w @ u)
    np.testing.assert_allclose(w, epsi_step(A, nys, state).u, atol=1e-12)


def test_deflated_fixed_point():
    A, ref = gen_synthetic(SpectrumSpec(100, kappa=1e3), 3)
    nys = nystrom_approximate(A, 20, seed=3)
    for i in (1, 3, 6):
        w = deflated_epsi_update(A, nys, ref.V[:, :i], ref.V[:, i], ref.Lambda[i])
        w /= np.linalg.norm(w)
        assert abs(abs(w @ ref.V[:, i]) - 1) <= 1e-9


def test_deflated_matches_dense_formula(rng):
    A, _ = gen_synthetic(SpectrumSpec(100, kappa=1e3), 4)
    nys = nystrom_approximate(A, 20, seed=4)
    U = random_orthonormal(100, 2, rng)
    u = rng.standard_normal(100)
    u /= np.linalg.norm(u)
    lam = 0.8
    P = np.eye(100) - U @ U.T
    PAP = P @ nys.to_dense() @ P
    want = np.linalg.solve(PAP - lam * np.eye(100), (PAP - A.to_dense()) @ u)
    got = deflated_epsi_update(A, nys, U, u, lam)
    assert np.linalg.norm(got - want) <= 1e-9 * np.linalg.norm(want)


# -- orthogonalization step -----------------------------------------------------------

def test_orthogonalization_invariant_subspace(rng):
    A, ref = gen_synthetic(SpectrumSpec(120, kappa=100.0), 0)
    U = ref.V1(4) @ random_orthonormal(4, 4, rng)
    Un, theta, AU = orthogonalization_step(A, U)
    np.testing.assert_allclose(theta, ref.Lambda[:4], atol=1e-10)
    assert np.linalg.norm(ref.V2(4).T @ Un) <= 1e-12
    np.testing.assert_allclose(AU, A.matmat(Un), atol=1e-12)


def test_orthogonalization_single_vector(rng):
    A, _ = gen_synthetic(SpectrumSpec(50, kappa=10.0), 1)
    u = random_orthonormal(50, 1, rng)
    Un, theta, _ = orthogonalization_step(A, u)
    assert abs(abs(Un[:, 0] @ u[:, 0]) - 1) <= 1e-14
    np.testing.assert_allclose(theta[0], u[:, 0] @ A.matvec(u[:, 0]), rtol=1e-14)


def test_orthogonalization_matches_projected_svd(rng):
    # Rayleigh-Ritz equals the top-k eigenpairs of (UU^T) A (UU^T).
    A, _ = gen_synthetic(SpectrumSpec(60, kappa=100.0), 2)
    U = random_orthonormal(60, 3, rng)
    _, theta, _ = orthogonalization_step(A, U)
    Pi = U @ U.T
    w = np.linalg.eigvalsh(Pi @ A.to_dense() @ Pi)[::-1][:3]
    np.testing.assert_allclose(theta, w, atol=1e-12)


@pytest.mark.parametrize("delta", [1e-2, 1e-3])
def test_quadratic_correction_bound_n200(delta):
    for seed in range(5):
        A, ref = gen_synthetic(SpectrumSpec(200, kappa=1e3), seed)
        k = 5
        U = perturbed_basis(ref, k, delta, np.random.default_rng(seed))
        d = np.linalg.norm(ref.V2(k).T @ U, 2)
        np.testing.assert_allclose(d, delta, rtol=1e-10)
        Un, theta, _ = orthogonalization_step(A, U)
        for i in range(k):
            lhs = np.linalg.norm((theta[i] - ref.Lambda[:k]) * (ref.V1(k).T @ Un[:, i]))
            assert lhs <= 17 * ref.Lambda[0] * d**2


# -- Gram-Schmidt ---------------------------------------------------------------------

def test_append_orthonormal_regular(rng):
    U = random_orthonormal(30, 3, rng)
    Un, broke = _append_orthonormal(U, rng.standard_normal(30), rng)
    assert not broke
    np.testing.assert_allclose(Un.T @ Un, np.eye(4), atol=1e-14)


@pytest.mark.parametrize("kind", ["in_span", "zero"])
def test_append_orthonormal_breakdown(rng, kind):
    U = random_orthonormal(30, 3, rng)
    w = U @ np.array([1.0, -2.0, 0.5]) if kind == "in_span" else np.zeros(30)
    Un, broke = _append_orthonormal(U, w, rng)
    assert broke
    np.testing.assert_allclose(Un.T @ Un, np.eye(4), atol=1e-12)
    np.testing.assert_array_equal(Un[:, :3], U)


def test_solve_flags_breakdown_sweep(monkeypatch):
    A, _ = gen_synthetic(SpectrumSpec(60, kappa=10.0), 0)
    nys = nystrom_approximate(A, 10, seed=0)
    real = lazy.deflated_epsi_update

    def degenerate(A_, nys_, U_partial, u, lam, Au=None):
        if U_partial.shape[1] == 1:
            return U_partial[:, 0].copy()
        return real(A_, nys_, U_partial, u, lam, Au=Au)

    monkeypatch.setattr(lazy, "deflated_epsi_update", degenerate)
    st, tr = lazy_epsi_solve(A, nys, opts=LazyOptions(3, q_max=2, tol=1e-14), timing=False)
    assert tr.breakdown_sweeps == [1, 2]
    np.testing.assert_allclose(st.U.T @ st.U, np.eye(3), atol=1e-10)


# -- solve ----------------------------------------------------------------------------

def test_options_validation():
    nys = NystromApprox(U=np.eye(10)[:, :4], lam=np.ones(4), nu=0.0, ell=4)
    LazyOptions(4).validate(nys, 10)
    for bad in (LazyOptions(0), LazyOptions(5), LazyOptions(2, q_max=0), LazyOptions(2, tol=0.0)):
        with pytest.raises(ValueError):
            bad.validate(nys, 10)
    with pytest.raises(ValueError):
        LazyOptions(4).validate(None, 3)


def test_initial_basis_modes():
    A, _ = gen_synthetic(SpectrumSpec(40, kappa=10.0), 0)
    nys = nystrom_approximate(A, 8, seed=0)
    np.testing.assert_array_equal(initial_basis(A, nys, "auto", 3, 0), nys.U[:, :3])
    R = initial_basis(A, None, "random", 3, 7)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-14)
    np.testing.assert_array_equal(R, initial_basis(A, None, "random", 3, 7))
    with pytest.raises(ValueError):
        initial_basis(A, nys, np.ones((40, 2)), 3, 0)
    with pytest.raises(ValueError):
        initial_basis(A, nys, "nope", 3, 0)


def test_exact_start_converges_at_first_sweep():
    A, ref = gen_synthetic(SpectrumSpec(150, kappa=1e3), 0)
    nys = nystrom_approximate(A, 20, seed=0)
    st, tr = lazy_epsi_solve(A, nys, U0=ref.V1(5), opts=LazyOptions(5, tol=1e-10), reference=ref)
    assert tr.converged and st.sweep == 1
    assert st.residuals.max() <= 1e-10 * ref.Lambda[0]


def test_converges_and_stays_orthonormal(monkeypatch):
    A, ref = gen_synthetic(SpectrumSpec(200, kappa=1e3), 1)
    nys = nystrom_approximate(A, 40, seed=1)
    real = lazy.orthogonalization_step
    defects = []

    def watch(A_, U, AU=None):
        out = real(A_, U, AU)
        defects.append(np.abs(out[0].T @ out[0] - np.eye(U.shape[1])).max())
        return out

    monkeypatch.setattr(lazy, "orthogonalization_step", watch)
    st, tr = lazy_epsi_solve(A, nys, opts=LazyOptions(4, q_max=200, tol=1e-8), reference=ref)
    assert tr.converged
    assert max(defects) <= 1e-10
    np.testing.assert_allclose(st.lambdas, ref.Lambda[:4], atol=1e-7)
    assert st.matvecs == 4 * (st.sweep + 1)


def test_repeated_intermediate_eigenvalue():
    eigs = np.concatenate([[2.5, 2.2, 2.2, 1.6, 1.3], 0.8 ** np.arange(295)])
    A, ref = gen_synthetic(SpectrumSpec(300, kind="custom", custom_eigs=eigs), 0)
    nys = nystrom_approximate(A, 20, seed=0)
    st, tr = lazy_epsi_solve(A, nys, opts=LazyOptions(5, q_max=50, tol=1e-8), reference=ref)
    assert tr.converged
    np.testing.assert_allclose(st.lambdas, eigs[:5], atol=1e-6)


def test_subspace_contraction_bound_where_attainable():
    k = 3
    eigs = np.concatenate([[1.0, 0.95, 0.9], 0.5 * 0.9 ** np.arange(297)])
    gap = eigs[k - 1] - eigs[k]
    for seed in range(5):
        A, ref = gen_synthetic(SpectrumSpec(300, kind="custom", custom_eigs=eigs), seed)
        for ell in range(10, 301, 10):
            nys = nystrom_approximate(A, ell, seed)
            eta = estimate_distortion(A, nys, "dense").eta
            bound = 3.5 * np.sqrt(2) * eta / gap
            if bound < 1:
                break
        _, tr = lazy_epsi_solve(A, nys, opts=LazyOptions(k, 50, 1e-10, seed), reference=ref, timing=False)
        fro = np.sqrt(sum(tr.series("subspace_err", pair=i)[1] ** 2 for i in range(k)))
        inside = fro[:-1] <= 0.1
        ratios = fro[1:][inside] / fro[:-1][inside]
        assert ratios.size >= 3
        assert ratios.max() <= bound + 0.1


def test_no_stall_on_small_intermediate_gaps():
    # Exponential decay: every intermediate gap is about 1.4% of lambda_1.
    # The Frobenius subspace error keeps contracting at a steady rate set by
    # lambda_k - lambda_{k+1}; no sweep stalls.
    A, ref = gen_synthetic(SpectrumSpec(500, kappa=1e3), 0)
    k = 10
    _, tr = lazy_epsi_solve(A, nystrom_approximate(A, 100, 0), opts=LazyOptions(k, 25, 1e-12),
                            reference=ref, timing=False)
    fro = np.sqrt(sum(tr.series("subspace_err", pair=i)[1] ** 2 for i in range(k)))
    ratios = fro[1:] / fro[:-1]
    late = ratios[3:]
    assert late.max() < 0.99
    assert late.max() - late.min() <= 0.1


@pytest.mark.slow
def test_no_stall_n2000_k20():
    A, ref = gen_synthetic(SpectrumSpec(2000, kappa=1e3), 0)
    k = 20
    _, tr = lazy_epsi_solve(A, nystrom_approximate(A, 200, 0), opts=LazyOptions(k, 30, 1e-12),
                            reference=ref, timing=False)
    fro = np.sqrt(sum(tr.series("subspace_err", pair=i)[1] ** 2 for i in range(k)))
    late = (fro[1:] / fro[:-1])[8:]
    assert late.max() < 0.99
    assert late.max() - late.min() <= 0.1
