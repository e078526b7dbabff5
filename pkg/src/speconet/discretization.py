"""
Field representations and differential operators for the time stepper.

Two representations are used, one per boundary-condition family.

``bc="dirichlet"``  Legendre on [-1, 1]^d. Velocity and pressure are stored
                    nodally on the (N+3)-point GLL grid, which holds every
                    polynomial that the scheme produces (degree <= N+2 per
                    axis) exactly. Derivatives use the GLL differentiation
                    matrix and weak forms use the GLL quadrature.
``bc="periodic"``   Fourier on [0, 2 pi)^d. Every field is a complex
                    coefficient array in FFT order with the Nyquist slots
                    held at zero.

In both cases field arrays carry arbitrary leading axes (samples, vector
components); the last ``dim`` axes are spatial.
"""
from __future__ import annotations

import functools

import numpy as np

from .basis import (
    BasisKind,
    BasisSpec,
    analyze_fourier,
    build_tables,
    gll_diff_matrix,
    gll_rule,
    legendre_table,
    mode_product,
    nyquist_mask,
    synthesize_fourier,
    wavenumbers,
)
from .galerkin import (
    CompatibilityError,
    assemble_mass,
    build_fourier_operator,
    build_operator,
    fourier_gradient_symbols,
)


class Discretization:
    """Spatial discretization of a cubic domain.

    Parameters
    ----------
    dim : int
        2 or 3.
    n : int
        Modes per axis.
    bc : {"dirichlet", "periodic"}
    dealias : bool
        Form Fourier products on a 3/2-padded grid.
    """

    def __init__(self, dim: int, n: int, bc: str, dealias: bool = False):
        if dim not in (2, 3):
            raise ValueError("dim must be 2 or 3")
        if bc not in ("dirichlet", "periodic"):
            raise ValueError(f"unknown boundary condition {bc!r}")
        if dealias and bc != "periodic":
            raise ValueError("dealiasing is only available for periodic (Fourier) runs")
        self.dim = dim
        self.n = n
        self.bc = bc
        self.dealias = dealias
        self.periodic = bc == "periodic"
        if self.periodic:
            if n % 2:
                raise ValueError("Fourier resolution must be even")
            self.grid_points = n
            self.input_points = n
            x = 2 * np.pi * np.arange(n) / n
            self.nodes = x
            self.input_nodes = x
            self.weights = np.full(n, 2 * np.pi / n)
            self.mask = nyquist_mask(n, dim)
            self.gsym = fourier_gradient_symbols(n, dim)
            self.k2 = sum(-(g * g).real for g in self.gsym)
        else:
            self.vspec = BasisSpec(BasisKind.LEGENDRE_DIRICHLET, n)
            self.pspec = BasisSpec(BasisKind.LEGENDRE_NEUMANN, n)
            P = n + 3
            self.grid_points = P
            self.input_points = n + 2
            self.vtab = build_tables(self.vspec, P)
            self.ptab = build_tables(self.pspec, P)
            self.nodes = self.vtab.nodes
            self.weights = self.vtab.weights
            self.input_nodes = gll_rule(n + 2).nodes
            self.D = gll_diff_matrix(P)
            self.interp = _lagrange_matrix(self.nodes, self.input_nodes)
            self.vtab_in = build_tables(self.vspec, n + 2)
            self.ptab_in = build_tables(self.pspec, n + 2)

    # ------------------------------------------------------------------
    # grids
    # ------------------------------------------------------------------
    @property
    def grid_shape(self) -> tuple[int, ...]:
        return (self.grid_points,) * self.dim

    @property
    def coeff_shape(self) -> tuple[int, ...]:
        return (self.n,) * self.dim

    @property
    def volume(self) -> float:
        return (2 * np.pi) ** self.dim if self.periodic else 2.0**self.dim

    def coords(self, which: str = "grid") -> list[np.ndarray]:
        """Coordinate arrays broadcastable over the grid (``indexing="ij"``)."""
        x = self.nodes if which == "grid" else self.input_nodes
        return list(np.meshgrid(*([x] * self.dim), indexing="ij", sparse=True))

    def _axis(self, arr, a):
        return arr.ndim - self.dim + a

    # ------------------------------------------------------------------
    # nodal <-> representation
    # ------------------------------------------------------------------
    def from_nodal(self, f: np.ndarray) -> np.ndarray:
        """Representation of a field sampled on the solver grid."""
        if self.periodic:
            return np.where(self.mask, 0.0, analyze_fourier(f, self.dim))
        return np.asarray(f, dtype=float)

    def to_nodal(self, r: np.ndarray) -> np.ndarray:
        """Real samples on the solver grid."""
        if self.periodic:
            return synthesize_fourier(r, self.dim, real=True)
        return r

    def to_input(self, r: np.ndarray) -> np.ndarray:
        """Real samples on the network input grid."""
        if self.periodic:
            return synthesize_fourier(r, self.dim, real=True)
        out = r
        for a in range(self.dim):
            out = mode_product(out, self.interp, self._axis(out, a))
        return out

    def from_vel_coeffs(self, alpha: np.ndarray) -> np.ndarray:
        if self.periodic:
            return np.where(self.mask, 0.0, alpha)
        return self._synth(alpha, self.vtab)

    def from_phi_coeffs(self, phi: np.ndarray) -> np.ndarray:
        if self.periodic:
            return phi
        return self._synth(phi, self.ptab)

    def _synth(self, alpha, tab):
        out = alpha
        for a in range(self.dim):
            out = mode_product(out, tab.values.T, self._axis(out, a))
        return out

    # ------------------------------------------------------------------
    # differential operators
    # ------------------------------------------------------------------
    def deriv(self, r: np.ndarray, a: int) -> np.ndarray:
        if self.periodic:
            return self.gsym[a] * r
        return mode_product(r, self.D, self._axis(r, a))

    def grad(self, r: np.ndarray) -> np.ndarray:
        """Scalar (..., *grid) -> vector (..., dim, *grid)."""
        return np.stack([self.deriv(r, a) for a in range(self.dim)], axis=r.ndim - self.dim)

    def div(self, u: np.ndarray) -> np.ndarray:
        """Vector (..., dim, *grid) -> scalar (..., *grid)."""
        c = u.ndim - self.dim - 1
        out = self.deriv(np.take(u, 0, axis=c), 0)
        for a in range(1, self.dim):
            out = out + self.deriv(np.take(u, a, axis=c), a)
        return out

    def laplacian(self, r: np.ndarray) -> np.ndarray:
        if self.periodic:
            return -self.k2 * r
        out = 0.0
        for a in range(self.dim):
            out = out + self.deriv(self.deriv(r, a), a)
        return out

    def advection(self, u: np.ndarray) -> np.ndarray:
        """(u . grad) u, products formed pointwise (pseudo-spectral)."""
        c = u.ndim - self.dim - 1
        if not self.periodic:
            out = []
            for i in range(self.dim):
                ui = np.take(u, i, axis=c)
                acc = 0.0
                for j in range(self.dim):
                    acc = acc + np.take(u, j, axis=c) * self.deriv(ui, j)
                out.append(acc)
            return np.stack(out, axis=c)
        return self._advection_fourier(u, c)

    def _advection_fourier(self, u, c):
        n, d = self.n, self.dim
        m = 3 * n // 2 if self.dealias else n
        if m % 2:
            m += 1
        to_grid = lambda r: _pad_synth(r, n, m, d)
        uj = [to_grid(np.take(u, j, axis=c)) for j in range(d)]
        out = []
        for i in range(d):
            ui = np.take(u, i, axis=c)
            acc = 0.0
            for j in range(d):
                acc = acc + uj[j] * to_grid(self.gsym[j] * ui)
            out.append(_analyze_trunc(acc, n, m, d))
        res = np.stack(out, axis=c)
        return np.where(self.mask, 0.0, res)

    # ------------------------------------------------------------------
    # weak forms
    # ------------------------------------------------------------------
    def weak_velocity(self, r: np.ndarray) -> np.ndarray:
        """Integrals of a field against every velocity test function."""
        if self.periodic:
            return np.where(self.mask, 0.0, r)
        return self._project(r, self.vtab, None)

    def weak_phi(self, r: np.ndarray) -> np.ndarray:
        """Integrals of a scalar against every correction (Neumann) test function."""
        if self.periodic:
            return np.where(self.mask, 0.0, r)
        return self._project(r, self.ptab, None)

    def weak_stiffness_velocity(self, u: np.ndarray) -> np.ndarray:
        """Integrals of grad(u_c) . grad(Psi) for each component c (Legendre only)."""
        out = 0.0
        for a in range(self.dim):
            out = out + self._project(self.deriv(u, a), self.vtab, a)
        return out

    def _project(self, r, tab, deriv_axis):
        out = r
        for a in range(self.dim):
            M = tab.derivatives if a == deriv_axis else tab.values
            out = mode_product(out, M * tab.weights, self._axis(out, a))
        return out

    def weak_divergence(self, u: np.ndarray) -> np.ndarray:
        """Weak divergence tested against the correction space."""
        return self.weak_phi(self.div(u))

    # ------------------------------------------------------------------
    # operators
    # ------------------------------------------------------------------
    def helmholtz(self, tau: float, nu: float):
        if self.periodic:
            return build_fourier_operator(tau, nu, self.n, self.dim)
        return build_operator(tau, nu, self.vspec, self.dim)

    def poisson(self):
        if self.periodic:
            return build_fourier_operator(0.0, 1.0, self.n, self.dim)
        return build_operator(0.0, 1.0, self.pspec, self.dim)

    def check_compatible(self, F: np.ndarray, tol: float = 1e-8, atol: float = 1e-12):
        """Raise if the mean mode of a Poisson right-hand side is not negligible."""
        idx = (Ellipsis,) + (0,) * self.dim
        f0 = np.abs(F[idx])
        lead = F.shape[: F.ndim - self.dim]
        scale = np.sqrt(np.sum(np.abs(F.reshape(lead + (-1,))) ** 2, axis=-1))
        bad = f0 > tol * scale + atol
        if np.any(bad):
            worst = float(np.max(f0))
            raise CompatibilityError(
                f"divergence integral {worst:.3e} does not vanish; the Poisson problem is incompatible"
            )

    # ------------------------------------------------------------------
    # integrals and diagnostics
    # ------------------------------------------------------------------
    def integrate(self, f: np.ndarray) -> np.ndarray:
        """Integral over the domain of nodal samples on the solver grid."""
        out = f
        for _ in range(self.dim):
            out = out @ self.weights
        return out

    def boundary_max(self, u: np.ndarray) -> float:
        """Max |u| over boundary nodes (Legendre)."""
        if self.periodic:
            return 0.0
        u = np.abs(u)
        m = 0.0
        for a in range(self.dim):
            ax = self._axis(u, a)
            m = max(m, float(np.take(u, 0, axis=ax).max()), float(np.take(u, -1, axis=ax).max()))
        return m

    # ------------------------------------------------------------------
    # boundary lifting (2D top wall)
    # ------------------------------------------------------------------
    def lifting(self, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Lift top-wall tangential data g(x) into the interior.

        ``g`` holds samples on the solver x nodes with leading sample axes.
        The corner values are removed with their linear interpolant, the
        remainder is projected onto the Dirichlet span in x, and the result
        is extended as g_c(x) (1 + y) / 2 in the x component. Returns the
        nodal vector field and the corner values that were discarded.
        """
        if self.periodic or self.dim != 2:
            raise ValueError("boundary lifting is defined for 2D Dirichlet runs")
        x = self.nodes
        gl, gr = g[..., :1], g[..., -1:]
        corners = np.concatenate([gl, gr], axis=-1)
        lin = gl * (1 - x) / 2 + gr * (1 + x) / 2
        gc = g - lin
        rhs = (gc * self.weights) @ self.vtab.values.T
        B = assemble_mass(self.vspec).entries
        c = rhs @ np.linalg.inv(B)
        gp = c @ self.vtab.values
        y = (1 + x) / 2
        ux = gp[..., :, None] * y[None, :]
        L = np.stack([ux, np.zeros_like(ux)], axis=-3)
        return L, corners


def _lagrange_matrix(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Interpolation matrix from GLL nodes ``src`` to points ``dst``."""
    P = len(src)
    V, _ = legendre_table(P - 1, src)
    W, _ = legendre_table(P - 1, dst)
    return np.linalg.solve(V, W).T


def _pad_synth(r, n, m, d):
    """Real samples on an m-point grid of a field with n-mode coefficients."""
    if m == n:
        return synthesize_fourier(r, d, real=True)
    big = np.zeros(r.shape[: r.ndim - d] + (m,) * d, dtype=complex)
    idx = _embed_index(n, m)
    big[(Ellipsis,) + np.ix_(*([idx] * d))] = r
    return synthesize_fourier(big, d, real=True)


def _analyze_trunc(f, n, m, d):
    F = analyze_fourier(f, d)
    if m == n:
        return F
    idx = _embed_index(n, m)
    return F[(Ellipsis,) + np.ix_(*([idx] * d))]


@functools.lru_cache(maxsize=None)
def _embed_index(n, m):
    xi = wavenumbers(n).astype(int)
    return np.mod(xi, m)
