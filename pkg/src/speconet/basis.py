"""
Spectral bases on a single axis and the transforms built on them.

Three families are supported:

    * ``LEGENDRE_DIRICHLET``  psi_n = (L_n - L_{n+2}) / sqrt(4n+6)
    * ``LEGENDRE_NEUMANN``    psi_n = (L_n - b_n L_{n+2}) / sqrt(b_n (4n+6)),
                              b_n = n(n+1) / ((n+2)(n+3)), psi_0 = L_0
    * ``FOURIER``             psi_xi = exp(i xi x) / (2 pi) on [0, 2 pi)

Legendre bases live on [-1, 1] and are sampled on Gauss-Lobatto-Legendre
(GLL) nodes; Fourier bases on the equispaced grid x_j = 2 pi j / N.

Fourier coefficients are stored in FFT order. ``wavenumbers(N)`` gives the
wave number of each slot; the Nyquist slot carries +N/2 so that the set is
-N/2+1 ... N/2.
"""
from __future__ import annotations

import enum
import functools
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class NumericalError(RuntimeError):
    """A numerical kernel failed to converge."""


class BasisKind(enum.Enum):
    LEGENDRE_DIRICHLET = "legendre_dirichlet"
    LEGENDRE_NEUMANN = "legendre_neumann"
    FOURIER = "fourier"

    @property
    def is_legendre(self) -> bool:
        return self is not BasisKind.FOURIER

    @property
    def code(self) -> int:
        return _KIND_CODES[self]

    @classmethod
    def from_code(cls, code: int) -> "BasisKind":
        for kind, c in _KIND_CODES.items():
            if c == code:
                return kind
        raise ValueError(f"unknown basis kind code {code}")


_KIND_CODES = {
    BasisKind.LEGENDRE_DIRICHLET: 1,
    BasisKind.LEGENDRE_NEUMANN: 2,
    BasisKind.FOURIER: 3,
}


@dataclass(frozen=True)
class BasisSpec:
    kind: BasisKind
    n_modes: int

    def __post_init__(self):
        if self.n_modes < 1:
            raise ValueError("n_modes must be positive")
        if self.kind is BasisKind.FOURIER and self.n_modes % 2:
            raise ValueError("Fourier bases need an even number of modes")

    @property
    def interval(self) -> tuple[float, float]:
        if self.kind is BasisKind.FOURIER:
            return (0.0, 2.0 * np.pi)
        return (-1.0, 1.0)

    @property
    def length(self) -> float:
        a, b = self.interval
        return b - a


@dataclass(frozen=True)
class QuadratureRule:
    nodes: np.ndarray
    weights: np.ndarray

    @property
    def point_count(self) -> int:
        return len(self.nodes)


@dataclass(frozen=True)
class BasisTables:
    """Mode values and derivatives sampled on the quadrature nodes.

    ``values[n, j] = psi_n(x_j)`` and ``derivatives[n, j] = psi_n'(x_j)``.
    """

    spec: BasisSpec
    values: np.ndarray
    derivatives: np.ndarray
    quadrature: QuadratureRule

    @property
    def nodes(self) -> np.ndarray:
        return self.quadrature.nodes

    @property
    def weights(self) -> np.ndarray:
        return self.quadrature.weights


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# Legendre polynomials and GLL quadrature
# ---------------------------------------------------------------------------


def legendre_table(n_max: int, x) -> tuple[np.ndarray, np.ndarray]:
    """Values and first derivatives of L_0 ... L_{n_max} at ``x``.

    Uses the three-term recurrence for the values and
    L'_{n+1} = L'_{n-1} + (2n+1) L_n for the derivatives.
    """
    x = np.asarray(x, dtype=float)
    L = np.zeros((n_max + 1,) + x.shape)
    dL = np.zeros_like(L)
    L[0] = 1.0
    if n_max >= 1:
        L[1] = x
        dL[1] = 1.0
    for n in range(1, n_max):
        L[n + 1] = ((2 * n + 1) * x * L[n] - n * L[n - 1]) / (n + 1)
        dL[n + 1] = dL[n - 1] + (2 * n + 1) * L[n]
    return L, dL


@functools.lru_cache(maxsize=None)
def gll_rule(point_count: int, tol: float = 1e-15, max_iter: int = 100) -> QuadratureRule:
    """Gauss-Lobatto-Legendre nodes and weights on [-1, 1].

    Nodes are the roots of (1 - x^2) L'_{P-1}(x); weights are
    2 / (P (P-1) L_{P-1}(x_j)^2). Exact for polynomials of degree 2P-3.
    """
    P = int(point_count)
    if P < 2:
        raise ValueError("GLL rule needs at least 2 points")
    n = P - 1
    # Chebyshev-Gauss-Lobatto points as the starting guess
    x = -np.cos(np.pi * np.arange(P) / n)
    converged = np.zeros(P, dtype=bool)
    for _ in range(max_iter):
        L, _ = legendre_table(n, x)
        step = (x * L[n] - L[n - 1]) / (P * L[n])
        x = x - step
        converged = np.abs(step) <= tol
        if converged.all():
            break
    else:
        bad = int(np.flatnonzero(~converged)[0])
        raise NumericalError(f"GLL Newton iteration did not converge for node {bad} (P={P})")
    x[0], x[-1] = -1.0, 1.0
    # symmetrize to kill round-off asymmetry
    x = 0.5 * (x - x[::-1])
    L, _ = legendre_table(n, x)
    w = 2.0 / (P * n * L[n] ** 2)
    return QuadratureRule(_frozen(x), _frozen(w))


def gll_diff_matrix(point_count: int) -> np.ndarray:
    """Lagrange differentiation matrix on the GLL nodes.

    ``D @ f`` is the exact derivative at the nodes for any polynomial of
    degree <= P-1 sampled there.
    """
    return _gll_diff_matrix(int(point_count))


@functools.lru_cache(maxsize=None)
def _gll_diff_matrix(P: int) -> np.ndarray:
    x = gll_rule(P).nodes
    L, _ = legendre_table(P - 1, x)
    Ln = L[P - 1]
    diff = x[:, None] - x[None, :]
    np.fill_diagonal(diff, 1.0)
    D = (Ln[:, None] / Ln[None, :]) / diff
    np.fill_diagonal(D, 0.0)
    np.fill_diagonal(D, -D.sum(axis=1))
    return _frozen(D)


def neumann_b(n) -> np.ndarray:
    n = np.asarray(n, dtype=float)
    return n * (n + 1) / ((n + 2) * (n + 3))


def evaluate_basis(spec: BasisSpec, x) -> tuple[np.ndarray, np.ndarray]:
    """Values and derivatives of every mode of ``spec`` at points ``x``.

    Returns two arrays of shape ``(n_modes, len(x))``.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    N = spec.n_modes
    if spec.kind is BasisKind.FOURIER:
        xi = wavenumbers(N)
        vals = np.exp(1j * xi[:, None] * x[None, :]) / (2.0 * np.pi)
        return vals, 1j * xi[:, None] * vals
    L, dL = legendre_table(N + 1, x)
    n = np.arange(N)
    if spec.kind is BasisKind.LEGENDRE_DIRICHLET:
        c = 1.0 / np.sqrt(4 * n + 6)
        vals = c[:, None] * (L[:N] - L[2:N + 2])
        ders = c[:, None] * (dL[:N] - dL[2:N + 2])
        return vals, ders
    # Neumann: the constant mode is left unnormalized (b_0 = 0)
    b = neumann_b(n)
    c = np.ones(N)
    c[1:] = 1.0 / np.sqrt(b[1:] * (4 * n[1:] + 6))
    vals = c[:, None] * (L[:N] - b[:, None] * L[2:N + 2])
    ders = c[:, None] * (dL[:N] - b[:, None] * dL[2:N + 2])
    return vals, ders


def default_quad_points(spec: BasisSpec) -> int:
    """N+3 GLL points: the mass integrand psi_l psi_m has degree up to 2N+2."""
    if spec.kind is BasisKind.FOURIER:
        return spec.n_modes
    return spec.n_modes + 3


@functools.lru_cache(maxsize=None)
def build_tables(spec: BasisSpec, quad_points: int | None = None) -> BasisTables:
    if quad_points is None:
        quad_points = default_quad_points(spec)
    if spec.kind is BasisKind.FOURIER:
        N = spec.n_modes
        if quad_points != N:
            raise ValueError("Fourier tables use exactly N equispaced nodes")
        h = 2.0 * np.pi / N
        x = h * np.arange(N)
        quad = QuadratureRule(_frozen(x), _frozen(np.full(N, h)))
    else:
        if quad_points < spec.n_modes + 2:
            raise ValueError(
                f"need at least n_modes+2={spec.n_modes + 2} quadrature points, got {quad_points}"
            )
        quad = gll_rule(quad_points)
    vals, ders = evaluate_basis(spec, quad.nodes)
    return BasisTables(spec, _frozen(vals), _frozen(ders), quad)


# ---------------------------------------------------------------------------
# Fourier helpers
# ---------------------------------------------------------------------------


def wavenumbers(N: int) -> np.ndarray:
    """Wave numbers in FFT storage order, Nyquist slot reported as +N/2."""
    xi = np.fft.fftfreq(N, d=1.0 / N)
    if N % 2 == 0:
        xi[N // 2] = N // 2
    return xi


def derivative_wavenumbers(N: int) -> np.ndarray:
    """Wave numbers for first derivatives: the Nyquist slot is zeroed."""
    xi = wavenumbers(N)
    if N % 2 == 0:
        xi[N // 2] = 0.0
    return xi


def nyquist_mask(N: int, dim: int) -> np.ndarray:
    """Boolean array, True on every slot carrying a Nyquist index on some axis."""
    m1 = np.zeros(N, dtype=bool)
    if N % 2 == 0:
        m1[N // 2] = True
    mask = np.zeros((N,) * dim, dtype=bool)
    for ax in range(dim):
        shape = [1] * dim
        shape[ax] = N
        mask |= m1.reshape(shape)
    return mask


def analyze_fourier(nodal: np.ndarray, dim: int) -> np.ndarray:
    """F_xi(f) = h^dim sum_j f(x_j) exp(-i xi . x_j) over the last ``dim`` axes."""
    nodal = np.asarray(nodal)
    N = nodal.shape[-1]
    if any(s != N for s in nodal.shape[-dim:]):
        raise ValueError(f"expected a cubic grid on the last {dim} axes, got {nodal.shape}")
    h = 2.0 * np.pi / N
    axes = tuple(range(-dim, 0))
    return h**dim * np.fft.fftn(nodal, axes=axes)


def synthesize_fourier(coeffs: np.ndarray, dim: int, real: bool = True) -> np.ndarray:
    """(2 pi)^-dim sum_xi alpha_xi exp(i xi . x_j) on the equispaced grid."""
    coeffs = np.asarray(coeffs)
    N = coeffs.shape[-1]
    axes = tuple(range(-dim, 0))
    out = np.fft.ifftn(coeffs, axes=axes) * (N / (2.0 * np.pi)) ** dim
    return out.real if real else out


def hermitian_part(coeffs: np.ndarray, dim: int) -> np.ndarray:
    """(alpha_xi + conj(alpha_{-xi})) / 2, i.e. the coefficients of a real field."""
    rev = np.conj(coeffs)
    for ax in range(-dim, 0):
        rev = np.roll(np.flip(rev, axis=ax), 1, axis=ax)
    return 0.5 * (coeffs + rev)


# ---------------------------------------------------------------------------
# Tensor-product fields
# ---------------------------------------------------------------------------


def mode_product(X: np.ndarray, M: np.ndarray, axis: int) -> np.ndarray:
    """Apply matrix ``M`` along ``axis`` of ``X``: out[..i..] = sum_j M[i, j] X[..j..]."""
    out = np.tensordot(M, X, axes=([1], [axis]))
    return np.moveaxis(out, 0, axis)


@dataclass
class SpectralField:
    """Coefficients on a tensor-product basis.

    ``coeffs`` has shape ``(*lead, N_1, ..., N_dim)``; ``lead`` holds vector
    components and/or batch axes.
    """

    axes: tuple[BasisSpec, ...]
    coeffs: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def components(self) -> int:
        lead = self.coeffs.shape[: -self.dim]
        return int(np.prod(lead)) if lead else 1

    def check(self):
        shape = tuple(s.n_modes for s in self.axes)
        if self.coeffs.shape[-self.dim:] != shape:
            raise ValueError(
                f"coefficient shape {self.coeffs.shape} does not match axes {shape}"
            )


def synthesize(field: SpectralField, tables: Sequence[BasisTables] | None = None) -> np.ndarray:
    """Evaluate a field on the tensor grid of its axes' quadrature nodes."""
    field.check()
    dim = field.dim
    kinds = {s.kind for s in field.axes}
    if kinds == {BasisKind.FOURIER}:
        return synthesize_fourier(field.coeffs, dim, real=not np.iscomplexobj(field.coeffs) or
                                  _is_hermitian(field.coeffs, dim))
    if BasisKind.FOURIER in kinds:
        raise ValueError("mixed Fourier/Legendre axes are not supported")
    if tables is None:
        tables = [build_tables(s) for s in field.axes]
    if len(tables) != dim:
        raise ValueError("one table per axis is required")
    out = field.coeffs
    for a, tab in enumerate(tables):
        out = mode_product(out, tab.values.T, out.ndim - dim + a)
    return out


def _is_hermitian(coeffs: np.ndarray, dim: int, tol: float = 1e-12) -> bool:
    scale = max(np.abs(coeffs).max(), 1.0)
    return bool(np.abs(coeffs - hermitian_part(coeffs, dim)).max() <= tol * scale)


def project_rhs(nodal_f: np.ndarray, tables: Sequence[BasisTables]) -> np.ndarray:
    """Quadrature of f against every tensor-product test function.

    ``nodal_f`` holds samples on the quadrature grid in its last
    ``len(tables)`` axes; returns the array of integrals of f Psi_{lmn}.
    """
    dim = len(tables)
    nodal_f = np.asarray(nodal_f)
    expected = tuple(t.quadrature.point_count for t in tables)
    if nodal_f.shape[-dim:] != expected:
        raise ValueError(f"grid mismatch: expected trailing shape {expected}, got {nodal_f.shape}")
    out = nodal_f
    for a, tab in enumerate(tables):
        if tab.spec.kind is BasisKind.FOURIER:
            raise ValueError("use analyze_fourier for Fourier axes")
        out = mode_product(out, tab.values * tab.weights[None, :], out.ndim - dim + a)
    return out
