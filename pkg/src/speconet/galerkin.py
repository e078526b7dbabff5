"""
Mass/stiffness assembly and fast-diagonalized Helmholtz solves.

A Legendre Galerkin system for tau u - nu Laplace(u) = f on a cubic grid
reads, with one mass matrix B and stiffness S per axis,

    tau (B x B [x B]) a + nu (S x B [x B] + B x S [x B] [+ B x B x S]) a = F.

All axes except the last are diagonalized with the eigenpairs of B
(B E = E diag(lam), E^T S E = diag(d)); what remains is one small system
per eigen index p along the last axis,

    A_p = (tau prod(lam) + nu sum_a d_a prod_{b != a} lam_b) B + nu prod(lam) S,

symmetrically scaled by C_p = diag(A_p)^{-1/2}. The unknown of the scaled
system is w, with a = E (C w) and h = C E^T F.
"""
from __future__ import annotations

import enum
import functools
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .basis import (
    BasisKind,
    BasisSpec,
    NumericalError,
    build_tables,
    derivative_wavenumbers,
    evaluate_basis,
    gll_rule,
    mode_product,
    nyquist_mask,
    project_rhs,
    wavenumbers,
)


class AssemblyError(NumericalError):
    pass


class CompatibilityError(ValueError):
    """A pure-Neumann or periodic Poisson right-hand side has a nonzero mean."""


class SystemCase(enum.Enum):
    LEGENDRE_2D = "legendre2d"
    LEGENDRE_3D = "legendre3d"
    FOURIER_2D = "fourier2d"
    FOURIER_3D = "fourier3d"


@dataclass(frozen=True)
class MassMatrix:
    entries: np.ndarray
    basis: BasisSpec


@functools.lru_cache(maxsize=None)
def _mass_cached(spec: BasisSpec) -> MassMatrix:
    if not spec.kind.is_legendre:
        raise ValueError("mass matrices are assembled for Legendre bases only")
    tab = build_tables(spec)
    B = (tab.values * tab.weights) @ tab.values.T
    B = 0.5 * (B + B.T)
    lam = np.linalg.eigvalsh(B)
    if lam.min() <= 0:
        raise AssemblyError(f"mass matrix is not positive definite (min eigenvalue {lam.min():.3e})")
    B.setflags(write=False)
    return MassMatrix(B, spec)


def assemble_mass(spec: BasisSpec) -> MassMatrix:
    """B_lm = integral of psi_l psi_m, by GLL quadrature."""
    return _mass_cached(spec)


def dirichlet_mass_closed_form(n_modes: int) -> np.ndarray:
    """Closed-form pentadiagonal Dirichlet mass matrix, used as a cross-check."""
    l = np.arange(n_modes)
    c = 1.0 / np.sqrt(4 * l + 6)
    B = np.diag(c**2 * (2.0 / (2 * l + 1) + 2.0 / (2 * l + 5)))
    off = -c[:-2] * c[2:] * 2.0 / (2 * l[:-2] + 5)
    B += np.diag(off, 2) + np.diag(off, -2)
    return B


@functools.lru_cache(maxsize=None)
def _stiffness_cached(spec: BasisSpec) -> np.ndarray:
    tab = build_tables(spec)
    S = (tab.derivatives * tab.weights) @ tab.derivatives.T
    S = 0.5 * (S + S.T)
    S.setflags(write=False)
    return S


def assemble_stiffness(spec: BasisSpec) -> np.ndarray:
    """S_lm = integral of psi_l' psi_m', by GLL quadrature.

    Identity for the Dirichlet basis and diag(0, 1, ..., 1) for the Neumann
    basis, both up to round-off.
    """
    if not spec.kind.is_legendre:
        raise ValueError("stiffness matrices are assembled for Legendre bases only")
    return _stiffness_cached(spec)


@functools.lru_cache(maxsize=None)
def mass_eigen(spec: BasisSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Eigenpairs of B with E^T S E diagonal.

    Returns (lam, E, d) where d = diag(E^T S E). For the Neumann basis B and S
    are block diagonal with the constant mode split off, and each block is
    decomposed on its own so that degenerate eigenvalues cannot mix the
    constant mode into the rest.
    """
    B = assemble_mass(spec).entries
    S = assemble_stiffness(spec)
    N = B.shape[0]
    if spec.kind is BasisKind.LEGENDRE_NEUMANN and N > 1:
        lam = np.empty(N)
        E = np.zeros((N, N))
        lam[0], E[0, 0] = B[0, 0], 1.0
        lam[1:], E[1:, 1:] = scipy.linalg.eigh(B[1:, 1:])
    else:
        lam, E = scipy.linalg.eigh(B)
    if lam.min() <= 0:
        raise AssemblyError("mass matrix eigenvalue is not positive")
    D = E.T @ S @ E
    off = D - np.diag(np.diag(D))
    if np.abs(off).max() > 1e-10 * max(1.0, np.abs(D).max()):
        raise AssemblyError("stiffness matrix is not diagonal in the mass eigenbasis")
    d = np.diag(D).copy()
    for a in (lam, E, d):
        a.setflags(write=False)
    return lam, E, d


@dataclass
class HelmholtzOperator:
    """Fast-diagonalized, preconditioned form of tau*M + nu*K on a cubic grid.

    ``mats`` holds the stacked scaled systems M_p = C_p A_p C_p with shape
    ``(N^(dim-1), N, N)``; ``precond`` the matching diagonals of C_p.
    ``pinned`` marks (p, i) entries of the gauge-fixed constant mode.
    """

    tau: float
    nu: float
    basis: BasisSpec
    dim: int
    eigvals: np.ndarray
    eigvecs: np.ndarray
    stiff_diag: np.ndarray
    raw: np.ndarray
    mats: np.ndarray
    precond: np.ndarray
    pinned: np.ndarray
    inverse: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.basis.n_modes

    @property
    def case(self) -> SystemCase:
        return SystemCase.LEGENDRE_2D if self.dim == 2 else SystemCase.LEGENDRE_3D

    # -- layout helpers ---------------------------------------------------
    def _flat(self, X: np.ndarray) -> np.ndarray:
        N = self.n
        lead = X.shape[: X.ndim - self.dim]
        if X.shape[X.ndim - self.dim:] != (N,) * self.dim:
            raise ValueError(f"expected trailing shape {(N,) * self.dim}, got {X.shape}")
        return X.reshape(lead + (N ** (self.dim - 1), N))

    def _unflat(self, X: np.ndarray) -> np.ndarray:
        lead = X.shape[:-2]
        return X.reshape(lead + (self.n,) * self.dim)

    def _rotate(self, X: np.ndarray, M: np.ndarray) -> np.ndarray:
        for a in range(self.dim - 1):
            X = mode_product(X, M, X.ndim - self.dim + a)
        return X

    # -- transforms -------------------------------------------------------
    def transform(self, F: np.ndarray) -> np.ndarray:
        """h = C E^T F, flattened to ``(..., N^(dim-1), N)``."""
        G = self._flat(self._rotate(np.asarray(F, dtype=float), self.eigvecs.T))
        h = self.precond * G
        return np.where(self.pinned, 0.0, h)

    def coeffs(self, w: np.ndarray) -> np.ndarray:
        """a = E C w, returned with the cubic coefficient layout."""
        return self._rotate(self._unflat(self.precond * w), self.eigvecs)

    def to_w(self, alpha: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`coeffs`."""
        return self._flat(self._rotate(alpha, self.eigvecs.T)) / self.precond

    def apply(self, w: np.ndarray) -> np.ndarray:
        return np.einsum("pij,...pj->...pi", self.mats, w)

    def residual(self, w: np.ndarray, h: np.ndarray) -> tuple[np.ndarray, float]:
        r = self.apply(w) - h
        return r, float(np.sum(r * r))

    def solve_w(self, h: np.ndarray) -> np.ndarray:
        return np.einsum("pij,...pj->...pi", self.inverse, h)

    def solve(self, F: np.ndarray) -> np.ndarray:
        """Coefficients a solving the Galerkin system for right-hand side F."""
        return self.coeffs(self.solve_w(self.transform(F)))

    def apply_full(self, alpha: np.ndarray) -> np.ndarray:
        """Unpreconditioned operator tau*M + nu*K applied to coefficients."""
        B = assemble_mass(self.basis).entries
        S = assemble_stiffness(self.basis)
        nd = alpha.ndim
        out = self.tau * _kron_apply(alpha, [B] * self.dim, nd)
        for a in range(self.dim):
            mats = [B] * self.dim
            mats[a] = S
            out = out + self.nu * _kron_apply(alpha, mats, nd)
        return out


def _kron_apply(X, mats, nd):
    dim = len(mats)
    for a, M in enumerate(mats):
        X = mode_product(X, M, nd - dim + a)
    return X


def build_operator(tau: float, nu: float, spec: BasisSpec, dim: int = 2) -> HelmholtzOperator:
    return _build_operator(float(tau), float(nu), spec, int(dim))


@functools.lru_cache(maxsize=32)
def _build_operator(tau: float, nu: float, spec: BasisSpec, dim: int) -> HelmholtzOperator:
    if tau < 0 or nu <= 0:
        raise ValueError("need tau >= 0 and nu > 0")
    if dim not in (2, 3):
        raise ValueError("dim must be 2 or 3")
    B = assemble_mass(spec).entries
    S = assemble_stiffness(spec)
    lam, E, d = mass_eigen(spec)
    N = spec.n_modes
    if dim == 2:
        plam = lam
        dsum = d
    else:
        plam = np.outer(lam, lam).ravel()
        dsum = (np.outer(d, lam) + np.outer(lam, d)).ravel()
    cb = tau * plam + nu * dsum
    cs = nu * plam
    A = cb[:, None, None] * B + cs[:, None, None] * S
    diag = np.einsum("pii->pi", A).copy()
    scale = np.abs(A).max()
    pinned = diag <= 1e-13 * scale
    if pinned.any():
        # only the global constant of a pure-Neumann Poisson problem may vanish
        if pinned.sum() != 1 or spec.kind is not BasisKind.LEGENDRE_NEUMANN or tau != 0:
            raise AssemblyError("singular per-eigenvalue system outside the Neumann gauge mode")
        p, i = np.argwhere(pinned)[0]
        A[p, i, :] = 0.0
        A[p, :, i] = 0.0
        A[p, i, i] = 1.0
        diag[p, i] = 1.0
    C = 1.0 / np.sqrt(diag)
    M = C[:, :, None] * A * C[:, None, :]
    try:
        inv = np.linalg.inv(M)
    except np.linalg.LinAlgError as exc:
        raise AssemblyError("per-eigenvalue system is singular; check the gauge") from exc
    for a in (A, M, C, pinned, inv):
        a.setflags(write=False)
    return HelmholtzOperator(tau, nu, spec, dim, lam, E, d, A, M, C, pinned, inv)


# ---------------------------------------------------------------------------
# Residual systems
# ---------------------------------------------------------------------------


@dataclass
class ResidualSystem:
    case: SystemCase
    operator: object
    rhs: np.ndarray


def residual_2d(w: np.ndarray, sys: ResidualSystem) -> tuple[np.ndarray, float]:
    if sys.case is SystemCase.LEGENDRE_2D:
        return sys.operator.residual(w, sys.rhs)
    if sys.case is SystemCase.FOURIER_2D:
        return sys.operator.residual(w, sys.rhs)
    raise ValueError(f"residual_2d called with case {sys.case}")


def residual_3d(w: np.ndarray, sys: ResidualSystem) -> tuple[np.ndarray, float]:
    if sys.case in (SystemCase.LEGENDRE_3D, SystemCase.FOURIER_3D):
        return sys.operator.residual(w, sys.rhs)
    raise ValueError(f"residual_3d called with case {sys.case}")


def solve_direct(sys: ResidualSystem) -> np.ndarray:
    op = sys.operator
    return op.coeffs(op.solve_w(sys.rhs))


# ---------------------------------------------------------------------------
# Fourier
# ---------------------------------------------------------------------------


@dataclass
class FourierOperator:
    """Diagonal operator tau + nu |xi|^2 on complex coefficients.

    As in the Legendre case the system is symmetrically scaled by
    C = (tau + nu |xi|^2)^{-1/2}: unknowns are w = a / C, right-hand sides
    h = C F, and the scaled operator is the identity. The Nyquist slots are
    masked to zero; for tau = 0 the mean mode is pinned as well.
    Arrays are complex with shape (..., N^dim).
    """

    tau: float
    nu: float
    n: int
    dim: int
    symbol: np.ndarray
    mask: np.ndarray
    precond: np.ndarray

    @property
    def case(self) -> SystemCase:
        return SystemCase.FOURIER_2D if self.dim == 2 else SystemCase.FOURIER_3D

    def transform(self, F: np.ndarray) -> np.ndarray:
        return np.where(self.mask, 0.0, self.precond * F)

    def coeffs(self, w):
        return np.where(self.mask, 0.0, self.precond * w)

    def to_w(self, alpha):
        return np.where(self.mask, 0.0, alpha / self.precond)

    def apply(self, w):
        return np.where(self.mask, 0.0, w)

    def apply_full(self, alpha):
        """Unscaled operator (tau + nu |xi|^2) alpha."""
        return self.symbol * alpha

    def residual(self, w, h):
        r = self.apply(w) - h
        return r, float(np.sum(r.real**2 + r.imag**2))

    def solve_w(self, h):
        return np.where(self.mask, 0.0, h)

    def solve(self, F):
        return self.coeffs(self.solve_w(self.transform(F)))


def build_fourier_operator(tau: float, nu: float, n: int, dim: int) -> FourierOperator:
    return _build_fourier(float(tau), float(nu), int(n), int(dim))


@functools.lru_cache(maxsize=32)
def _build_fourier(tau, nu, n, dim):
    xi = wavenumbers(n)
    k2 = np.zeros((n,) * dim)
    for a in range(dim):
        shape = [1] * dim
        shape[a] = n
        k2 = k2 + xi.reshape(shape) ** 2
    mask = nyquist_mask(n, dim)
    if tau == 0:
        mask = mask.copy()
        mask[(0,) * dim] = True
    sym = tau + nu * k2
    C = 1.0 / np.sqrt(np.where(mask, 1.0, sym))
    for a in (sym, mask, C):
        a.setflags(write=False)
    return FourierOperator(tau, nu, n, dim, sym, mask, C)


def solve_fourier(tau: float, nu: float, f_hat: np.ndarray, dim: int, tol: float = 1e-8) -> np.ndarray:
    """alpha_xi = F_xi / (tau + nu |xi|^2), zero-mean gauge when tau = 0."""
    n = f_hat.shape[-1]
    if tau == 0:
        f0 = f_hat[(Ellipsis,) + (0,) * dim]
        scale = np.sqrt(np.sum(np.abs(f_hat) ** 2))
        if np.abs(f0).max() > tol * max(scale, 1e-300) and scale > 0:
            raise CompatibilityError(
                f"periodic Poisson right-hand side has nonzero mean {np.abs(f0).max():.3e}"
            )
    return build_fourier_operator(tau, nu, n, dim).solve(f_hat)


def fourier_gradient_symbols(n: int, dim: int) -> list[np.ndarray]:
    """i*xi_a broadcast over a cubic grid, with Nyquist slots zeroed."""
    xi = derivative_wavenumbers(n)
    out = []
    for a in range(dim):
        shape = [1] * dim
        shape[a] = n
        out.append(1j * xi.reshape(shape))
    return out


def sine_helmholtz_error(n: int, tau: float = 1.0, nu: float = 1.0, check_points: int = 64) -> float:
    """Max error of the 2D Dirichlet solve for u = sin(pi x) sin(pi y).

    The right-hand side f = (tau + 2 nu pi^2) u is integrated by quadrature;
    the error is sampled on a finer GLL grid.
    """
    spec = BasisSpec(BasisKind.LEGENDRE_DIRICHLET, n)
    tab = build_tables(spec)
    x = tab.nodes
    s = np.sin(np.pi * x)
    F = project_rhs((tau + 2 * nu * np.pi**2) * np.outer(s, s), [tab, tab])
    a = build_operator(tau, nu, spec, 2).solve(F)
    xc = gll_rule(check_points).nodes
    V, _ = evaluate_basis(spec, xc)
    u = V.T @ a @ V
    sc = np.sin(np.pi * xc)
    return float(np.abs(u - np.outer(sc, sc)).max())
