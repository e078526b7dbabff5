import numpy as np
import pytest

from speconet.basis import BasisKind, BasisSpec, analyze_fourier
from speconet.galerkin import (
    AssemblyError,
    CompatibilityError,
    assemble_mass,
    assemble_stiffness,
    build_fourier_operator,
    build_operator,
    mass_eigen,
    solve_fourier,
)

DIR = BasisKind.LEGENDRE_DIRICHLET
NEU = BasisKind.LEGENDRE_NEUMANN


def test_stiffness_is_identity_for_dirichlet():
    np.testing.assert_allclose(assemble_stiffness(BasisSpec(DIR, 10)), np.eye(10), atol=1e-13)


def test_stiffness_for_neumann():
    S = assemble_stiffness(BasisSpec(NEU, 6))
    np.testing.assert_allclose(S, np.diag([0, 1, 1, 1, 1, 1.0]), atol=1e-13)


@pytest.mark.parametrize("kind", [DIR, NEU])
def test_mass_eigen_diagonalizes_both_matrices(kind):
    spec = BasisSpec(kind, 7)
    lam, E, d = mass_eigen(spec)
    B, S = assemble_mass(spec).entries, assemble_stiffness(spec)
    np.testing.assert_allclose(E.T @ B @ E, np.diag(lam), atol=1e-13)
    np.testing.assert_allclose(E.T @ S @ E, np.diag(d), atol=1e-12)


@pytest.mark.parametrize("dim", [2, 3])
def test_scaled_system_round_trips(dim):
    op = build_operator(2.5, 0.3, BasisSpec(DIR, 5), dim)
    rng = np.random.default_rng(dim)
    F = rng.standard_normal((2,) + (5,) * dim)
    h = op.transform(F)
    w = op.solve_w(h)
    np.testing.assert_allclose(op.apply(w), h, atol=1e-12)
    a = op.coeffs(w)
    np.testing.assert_allclose(op.to_w(a), w, atol=1e-12)
    np.testing.assert_allclose(op.apply_full(a), F, atol=1e-11)
    # preconditioned systems have unit diagonal
    np.testing.assert_allclose(np.einsum("pii->pi", op.mats), 1.0, atol=1e-13)


def test_neumann_poisson_is_gauged():
    op = build_operator(0.0, 1.0, BasisSpec(NEU, 5), 2)
    rng = np.random.default_rng(3)
    F = rng.standard_normal((5, 5))
    F[0, 0] = 0.0  # compatible: zero integral against the constant mode
    a = op.solve(F)
    assert abs(a[0, 0]) < 1e-12
    np.testing.assert_allclose(op.apply_full(a), F, atol=1e-11)


def test_negative_parameters_rejected():
    with pytest.raises(ValueError):
        build_operator(-1.0, 1.0, BasisSpec(DIR, 4), 2)


def test_fourier_solve_divides_by_symbol():
    n = 8
    x = 2 * np.pi * np.arange(n) / n
    X, Y = np.meshgrid(x, x, indexing="ij")
    u = np.sin(X) * np.cos(2 * Y)
    tau, nu = 3.0, 0.5
    f = (tau + nu * 5) * u
    a = solve_fourier(tau, nu, analyze_fourier(f, 2), 2)
    np.testing.assert_allclose(a, analyze_fourier(u, 2), atol=1e-12)


def test_fourier_operator_scaling_is_identity():
    op = build_fourier_operator(1.5, 0.1, 8, 2)
    rng = np.random.default_rng(1)
    F = rng.standard_normal((8, 8)) + 1j * rng.standard_normal((8, 8))
    w = op.solve_w(op.transform(F))
    np.testing.assert_allclose(op.apply_full(op.coeffs(w)), np.where(op.mask, 0, F), atol=1e-12)


def test_periodic_poisson_rejects_nonzero_mean():
    f = np.ones((8, 8))
    with pytest.raises(CompatibilityError):
        solve_fourier(0.0, 1.0, analyze_fourier(f, 2), 2)


def test_assembly_error_is_numerical():
    from speconet.basis import NumericalError

    assert issubclass(AssemblyError, NumericalError)
