import numpy as np
import pytest

from icopt.numerics import (
    NotInImage,
    NotPositiveDefiniteError,
    contraction_power,
    eigen_extremes,
    min_norm_solve,
    psd_from_spectrum,
    solve_spd,
)
from icopt.problems import make_tau_decoupled_pair
from icopt.rng import stream


def test_psd_from_spectrum_standard_basis():
    a = psd_from_spectrum([1.0, 2.0], np.eye(2))
    assert np.allclose(a, np.diag([1.0, 2.0]), atol=1e-14)


def test_psd_from_spectrum_zero_spectrum():
    basis = np.array([[0.6, 0.8], [-0.8, 0.6]])
    assert np.allclose(psd_from_spectrum([0.0, 0.0], basis), 0.0)


def test_psd_from_spectrum_isotropic_invariant():
    s = 1 / np.sqrt(2)
    basis = np.array([[s, s], [s, -s]])
    assert np.allclose(psd_from_spectrum([1.0, 1.0], basis), np.eye(2), atol=1e-14)


def test_psd_from_spectrum_rejects_bad_inputs():
    with pytest.raises(ValueError, match="orthonormal"):
        psd_from_spectrum([1.0, 1.0], np.array([[1.0, 0.0], [1.0, 0.0]]))
    with pytest.raises(ValueError, match="negative"):
        psd_from_spectrum([-1.0, 1.0], np.eye(2))


def test_contraction_power_exact_cases():
    h = 4.0
    assert np.allclose(contraction_power(h * np.eye(3), 1.0 / h, 3), 0.0)
    assert np.allclose(contraction_power(np.zeros((2, 2)), 0.3, 7), np.eye(2))
    got = contraction_power(np.diag([1.0, 2.0]), 0.5, 2)
    assert np.allclose(got, np.diag([0.25, 0.0]), atol=1e-15)


def test_contraction_power_commutes_with_eigendecomposition():
    for seed in range(100):
        rng = stream(1000, seed)
        d = int(rng.integers(2, 11))
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        lam = rng.uniform(0.0, 3.0, size=d)
        a = (q * lam) @ q.T
        eta, k = float(rng.uniform(0.01, 0.3)), int(rng.integers(1, 12))
        got = np.sort(np.linalg.eigvalsh(contraction_power(a, eta, k)))
        want = np.sort((1.0 - eta * lam) ** k)
        assert np.max(np.abs(got - want)) <= 1e-9


def test_solve_spd_examples():
    b = np.array([0.3, -0.7])
    assert np.allclose(solve_spd(np.eye(2), b), b)
    assert np.allclose(solve_spd(np.diag([2.0, 4.0]), [2.0, 4.0]), [1.0, 1.0])
    with pytest.raises(NotPositiveDefiniteError):
        solve_spd(np.diag([1.0, 0.0]), [1.0, 0.0])


def test_solve_spd_residual():
    rng = stream(2000, 0)
    for _ in range(20):
        d = int(rng.integers(2, 9))
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        a = (q * rng.uniform(0.5, 5.0, size=d)) @ q.T
        b = rng.standard_normal(d)
        x = solve_spd(a, b)
        assert np.linalg.norm(a @ x - b) <= 1e-9 * np.linalg.norm(b)


def test_min_norm_solve_examples():
    c = np.diag([1.0, 0.0])
    assert np.allclose(min_norm_solve(c, [2.0, 0.0]), [2.0, 0.0])
    out = min_norm_solve(c, [0.0, 1.0])
    assert isinstance(out, NotInImage)
    assert np.allclose(out.residual, [0.0, 1.0])
    v = np.array([0.1, 0.2, 0.3])
    assert np.allclose(min_norm_solve(np.eye(3), v), v)


def test_min_norm_solve_solution_properties():
    for seed in range(30):
        rng = stream(3000, seed)
        d = int(rng.integers(2, 8))
        r = int(rng.integers(1, d + 1))
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        lam = np.concatenate([rng.uniform(0.5, 2.0, size=r), np.zeros(d - r)])
        c = (q * lam) @ q.T
        target = q[:, :r] @ rng.standard_normal(r)   # in the image
        rhs = c @ target
        x = min_norm_solve(c, rhs)
        assert not isinstance(x, NotInImage)
        assert np.linalg.norm(c @ x - rhs) <= 1e-8 * (1 + np.linalg.norm(rhs))
        kernel = q[:, r:]
        if kernel.size:
            assert np.linalg.norm(kernel.T @ x) <= 1e-8


def test_min_norm_agrees_with_spd_solver_when_pd():
    for seed in range(20):
        rng = stream(4000, seed)
        d = int(rng.integers(2, 8))
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        c = (q * rng.uniform(0.3, 4.0, size=d)) @ q.T
        b = rng.standard_normal(d)
        assert np.linalg.norm(min_norm_solve(c, b) - solve_spd(c, b)) <= 1e-8


def test_eigen_extremes():
    assert eigen_extremes(np.diag([1.0, 3.0])) == (1.0, 3.0)
    assert eigen_extremes(np.zeros((3, 3))) == (0.0, 0.0)
    inst = make_tau_decoupled_pair(1.0, 0.3, [0.0, 0.0, 0.0])
    diff = inst.machines[0].hessian - inst.machines[1].hessian
    lo, hi = eigen_extremes(diff)
    assert abs(lo + 0.3) <= 1e-12 and abs(hi - 0.3) <= 1e-12


def test_symmetry_validation():
    with pytest.raises(ValueError, match="symmetric"):
        contraction_power(np.array([[1.0, 0.5], [0.0, 1.0]]), 0.1, 2)
