"""
Random input families, exact solutions, error metrics and ensemble statistics.

Each sample draws from its own PCG64 stream seeded by
``SeedSequence(seed, spawn_key=(i,))``, so sample ``i`` is the same no matter
how many samples are generated and batches nest by prefix.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.stats

from .discretization import Discretization
from .solver import FlowInputs

PRNG_ALGORITHM = "numpy-PCG64/SeedSequence(seed,spawn_key=(sample,))/ziggurat-normal"


class Family(enum.Enum):
    FORCING_2D = "forcing2d"
    INITIAL_2D = "initial2d"
    BOUNDARY_2D = "boundary2d"
    BELTRAMI_3D = "beltrami3d"
    FORCING_3D = "forcing3d"
    PERTURBED_FORCING_2D = "perturbed_forcing2d"


@dataclass(frozen=True)
class RandomInputSpec:
    family: Family
    sigma: float
    seed: int = 0
    count: int = 1
    mean: float = 0.0
    truncate: bool = False  # Beltrami rule: keep |C| > 60

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.count < 1:
            raise ValueError("count must be positive")


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(index,))))


def _normal_coeffs(spec: RandomInputSpec, shape) -> np.ndarray:
    """Complex coefficients a + ib with a, b ~ N(0, sigma^2), one stream per sample."""
    out = np.empty((spec.count,) + tuple(shape), dtype=complex)
    for i in range(spec.count):
        rng = sample_rng(spec.seed, i)
        z = rng.standard_normal((2,) + tuple(shape))
        out[i] = spec.sigma * (z[0] + 1j * z[1])
    return out


def _trig_series(c: np.ndarray, coords: Sequence[np.ndarray], kmax: int) -> np.ndarray:
    """Re sum_{k in [0, kmax]^d} c_k exp(i k.x), c shaped (..., kmax+1, ..., kmax+1)."""
    d = len(coords)
    lead = c.shape[: c.ndim - d]
    ks = np.arange(kmax + 1)
    # phase factors per axis: (kmax+1, *grid)
    acc = c
    for a, x in enumerate(coords):
        ph = np.exp(1j * np.multiply.outer(ks, np.ravel(x)))  # (k, n_a)
        acc = np.tensordot(acc, ph, axes=([len(lead)], [0]))
    return acc.real


def _grid_axes(coords):
    return [np.ravel(x) for x in coords]


# ---------------------------------------------------------------------------
# Families
# ---------------------------------------------------------------------------


@dataclass
class ForcingBatch:
    """f_c(t, x) = amp * sin(t) * Re sum c_{c,k} exp(i k.x) (+ clean field)."""

    coeffs: np.ndarray  # (S, dim, 3, 3[, 3])
    amplitude: float
    dim: int
    clean: bool = False

    def __call__(self, t: float, coords) -> np.ndarray:
        axes = _grid_axes(coords)
        f = self.amplitude * np.sin(t) * _trig_series(self.coeffs, axes, 2)
        if self.clean:
            X, Y = np.meshgrid(axes[0], axes[1], indexing="ij")
            fx = 1.5 * np.sin(t) * (1 + np.cos(Y) - np.sin(X) - np.sin(X + Y))
            fy = 1.5 * np.sin(t) * (1 + np.sin(Y) - np.cos(X) - np.cos(X + Y))
            f = f + np.stack([fx, fy])
        return f


def gen_forcing_2d(spec: RandomInputSpec) -> ForcingBatch:
    return ForcingBatch(_normal_coeffs(spec, (2, 3, 3)), 1.0 / 12.0, 2)


def gen_perturbed_forcing(spec: RandomInputSpec) -> ForcingBatch:
    return ForcingBatch(_normal_coeffs(spec, (2, 3, 3)), 1.0 / 24.0, 2, clean=True)


def gen_forcing_3d(spec: RandomInputSpec) -> ForcingBatch:
    return ForcingBatch(_normal_coeffs(spec, (3, 3, 3, 3)), 0.5, 3)


@dataclass
class InitialBatch:
    """(u0, v0) = (-d_y Psi, d_x Psi), Psi = amp * Re sum c_k exp(i k.x).

    The sin(t) factor of the stream function is taken at phase 1.
    """

    coeffs: np.ndarray  # (S, 3, 3)
    amplitude: float = 1.0 / 240.0

    def __call__(self, coords) -> np.ndarray:
        axes = _grid_axes(coords)
        k = np.arange(3)
        cx = self.coeffs * (1j * k)[:, None]
        cy = self.coeffs * (1j * k)[None, :]
        u = -self.amplitude * _trig_series(cy, axes, 2)
        v = self.amplitude * _trig_series(cx, axes, 2)
        return np.stack([u, v], axis=1)

    def stream(self, coords) -> np.ndarray:
        return self.amplitude * _trig_series(self.coeffs, _grid_axes(coords), 2)


def gen_initial_2d(spec: RandomInputSpec) -> InitialBatch:
    return InitialBatch(_normal_coeffs(spec, (3, 3)))


@dataclass
class BoundaryBatch:
    """Top-wall tangential velocity g(t, x) = amp sin(t) Re sum_{k<10} c_k exp(ikx)."""

    coeffs: np.ndarray  # (S, 10)
    amplitude: float = 0.015

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        return self.amplitude * np.sin(t) * _trig_series(self.coeffs, [np.ravel(x)], 9)

    def corners(self, t: float) -> np.ndarray:
        return self(t, np.array([-1.0, 1.0]))


def gen_boundary_2d(spec: RandomInputSpec) -> BoundaryBatch:
    return BoundaryBatch(_normal_coeffs(spec, (10,)))


def periodic_shear_forcing(t, coords):
    """f_x = f_y = sin(x) sin(y)."""
    x, y = coords[0], coords[1]
    s = np.sin(x) * np.sin(y)
    return np.stack([s, s])[None]


# ---------------------------------------------------------------------------
# Beltrami flows
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BeltramiParams:
    k: int = 1
    C4: float = 65.0
    C5: float = 70.0
    C6: float = 0.0  # appears in the family's definition but not in the formula
    A: float = 2e-6
    nu: float = 0.1
    r: float = 0.0
    p0: float = 0.0

    def constants(self):
        r = self.r
        s3 = np.sqrt(3.0)
        C1 = (s3 - r) * (s3 * r - 1)
        C2 = (s3 + r) * (s3 * r + 1)
        C3 = 3 * r * r - 1
        return dict(a=C1 * self.C4, b=C3 * self.C4, c=C2 * self.C5, d=C3 * self.C5, e=C3, f=r * C3)


def beltrami_exact(params: BeltramiParams, t: float, coords) -> tuple[np.ndarray, np.ndarray]:
    """Velocity (3, *grid) and pressure (*grid) of the Beltrami flow at time t."""
    X, Y, Z = coords
    k = params.k
    q = params.constants()
    a, b, c, d, e, f = (q[s] for s in "abcdef")
    cos, sin = np.cos, np.sin

    def comp(X, Y, Z):
        return (a * cos(k * X) + b * sin(k * X)) * (-c * sin(k * Y) + d * cos(k * Y)) * (
            e * cos(k * Z) + f * sin(k * Z)
        ) - (-a * sin(k * Z) + b * cos(k * Z)) * (c * cos(k * X) + d * sin(k * X)) * (
            e * cos(k * Y) + f * sin(k * Y)
        )

    decay = params.A * np.exp(-3 * params.nu * k * k * t)
    u = decay * comp(X, Y, Z)
    v = decay * comp(Y, Z, X)
    w = decay * comp(Z, X, Y)
    vel = np.stack(np.broadcast_arrays(u, v, w))
    p = params.p0 - 0.5 * np.sum(vel**2, axis=0)
    return vel, p


@dataclass
class BeltramiBatch:
    params: list

    def initial(self, coords):
        return np.stack([beltrami_exact(p, 0.0, coords)[0] for p in self.params])

    def pressure0(self, coords):
        return np.stack([beltrami_exact(p, 0.0, coords)[1] for p in self.params])

    def velocity(self, t, coords):
        return np.stack([beltrami_exact(p, t, coords)[0] for p in self.params])


def _truncated_normal(rng, mean, sigma, bound=60.0, max_draws=10_000):
    for _ in range(max_draws):
        z = mean + sigma * rng.standard_normal()
        if abs(z) > bound:
            return z
    raise RuntimeError("truncated normal sampler did not accept a draw")


def gen_beltrami(spec: RandomInputSpec, nu: float = 0.1) -> BeltramiBatch:
    params = []
    for i in range(spec.count):
        rng = sample_rng(spec.seed, i)
        k = int(rng.integers(1, 4))
        if spec.truncate:
            C = [_truncated_normal(rng, spec.mean, spec.sigma) for _ in range(3)]
        else:
            C = list(spec.mean + spec.sigma * rng.standard_normal(3))
        params.append(BeltramiParams(k=k, C4=C[0], C5=C[1], C6=C[2], nu=nu))
    return BeltramiBatch(params)


# ---------------------------------------------------------------------------
# Assembling solver inputs
# ---------------------------------------------------------------------------


def flow_inputs(family: Family, batch, count: int) -> FlowInputs:
    """FlowInputs for a generated batch of the given family."""
    if family in (Family.FORCING_2D, Family.PERTURBED_FORCING_2D):
        return FlowInputs(count, initial=lambda c: np.zeros((count, 2) + _shape(c)), forcing=batch)
    if family is Family.FORCING_3D:
        return FlowInputs(count, initial=lambda c: np.zeros((count, 3) + _shape(c)), forcing=batch)
    if family is Family.INITIAL_2D:
        return FlowInputs(count, initial=batch, forcing=periodic_shear_forcing)
    if family is Family.BOUNDARY_2D:
        return FlowInputs(count, initial=lambda c: np.zeros((count, 2) + _shape(c)), boundary=batch)
    if family is Family.BELTRAMI_3D:
        return FlowInputs(count, initial=batch.initial, pressure0=batch.pressure0)
    raise ValueError(family)


def _shape(coords):
    return tuple(np.broadcast_shapes(*[np.shape(x) for x in coords]))


def generate(spec: RandomInputSpec, nu: float | None = None):
    fam = spec.family
    if fam is Family.FORCING_2D:
        return gen_forcing_2d(spec)
    if fam is Family.PERTURBED_FORCING_2D:
        return gen_perturbed_forcing(spec)
    if fam is Family.FORCING_3D:
        return gen_forcing_3d(spec)
    if fam is Family.INITIAL_2D:
        return gen_initial_2d(spec)
    if fam is Family.BOUNDARY_2D:
        return gen_boundary_2d(spec)
    if fam is Family.BELTRAMI_3D:
        return gen_beltrami(spec, nu if nu is not None else 0.1)
    raise ValueError(fam)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass
class ErrorReport:
    times: np.ndarray
    rel_l2_x: np.ndarray  # (T, S) vector-norm error per time and sample
    rel_l2_x_components: np.ndarray  # (T, S, dim)
    rel_l2_tx: np.ndarray  # (S,)
    rel_h1_tx_pressure: Optional[np.ndarray] = None

    @property
    def mean_rel_l2_tx(self) -> float:
        return float(np.mean(self.rel_l2_tx))

    def mean_at(self, t: float) -> float:
        i = int(np.argmin(np.abs(self.times - t)))
        return float(np.mean(self.rel_l2_x[i]))


def rel_errors(d: Discretization, times, pred_u, ref_u, pred_p=None, ref_p=None, skip_initial=True) -> ErrorReport:
    """Relative L2_x / L2_{t,x} velocity errors and H1_{t,x} pressure error.

    Velocity arrays are nodal ``(T, S, dim, *grid)``; pressure ``(T, S, *grid)``.
    The pressure comparison removes each field's mean (pressure is defined up
    to a constant).
    """
    pred_u = np.asarray(pred_u)
    ref_u = np.asarray(ref_u)
    if pred_u.shape != ref_u.shape:
        raise ValueError(f"grid mismatch {pred_u.shape} vs {ref_u.shape}")
    times = np.asarray(times)
    sl = slice(1, None) if skip_initial and len(times) > 1 else slice(None)
    e2 = d.integrate((pred_u - ref_u) ** 2)  # (T, S, dim)
    r2 = d.integrate(ref_u**2)
    comp = np.sqrt(e2 / np.where(r2 > 0, r2, 1.0))
    E = e2.sum(-1)
    R = r2.sum(-1)
    rel_x = np.sqrt(E / np.where(R > 0, R, 1.0))
    rel_tx = np.sqrt(E[sl].sum(0) / np.maximum(R[sl].sum(0), 1e-300))
    h1 = None
    if pred_p is not None and ref_p is not None:
        vol = d.volume
        ep = pred_p - ref_p
        pad = (Ellipsis,) + (None,) * d.dim
        ep = ep - (d.integrate(ep) / vol)[pad]
        rp = ref_p - (d.integrate(ref_p) / vol)[pad]

        def h1sq(f):
            rep = d.from_nodal(f)
            g = d.to_nodal(d.grad(rep))
            return d.integrate(f**2) + d.integrate(g**2).sum(-1)

        num = h1sq(ep)[sl].sum(0)
        den = h1sq(rp)[sl].sum(0)
        h1 = np.sqrt(num / np.maximum(den, 1e-300))
    return ErrorReport(times, rel_x, comp, rel_tx, h1)


def energy_enstrophy(d: Discretization, u_nodal: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Domain-averaged kinetic energy and enstrophy of nodal velocity (..., dim, *grid)."""
    c = u_nodal.ndim - d.dim - 1
    vol = d.volume
    energy = d.integrate(0.5 * np.sum(u_nodal**2, axis=c)) / vol
    rep = d.from_nodal(u_nodal)
    comp = lambda i: np.take(rep, i, axis=c)
    if d.dim == 2:
        w = d.to_nodal(d.deriv(comp(1), 0) - d.deriv(comp(0), 1))
        w2 = w**2
    else:
        w2 = 0.0
        for i, j, k in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
            w2 = w2 + d.to_nodal(d.deriv(comp(k), j) - d.deriv(comp(j), k)) ** 2
    enstrophy = d.integrate(0.5 * w2) / vol
    return energy, enstrophy


# ---------------------------------------------------------------------------
# Ensemble statistics
# ---------------------------------------------------------------------------


@dataclass
class EnsembleReport:
    q: np.ndarray
    hist_sizes: list
    histograms: list  # (edges, counts) per size
    conv_sizes: np.ndarray
    conv_errors: np.ndarray
    slope: float
    skewness: dict
    kurtosis: dict
    degenerate: bool = False
    timings: dict = field(default_factory=dict)


def quantity_of_interest(d: Discretization, u_final: np.ndarray, component: int = 0) -> np.ndarray:
    """Q = integral of one velocity component at the final time, per sample."""
    return d.integrate(u_final[:, component])


def ensemble_stats(
    d: Discretization,
    u_final: np.ndarray,
    hist_sizes: Sequence[int] = (100, 500, 1000),
    conv_sizes: Sequence[int] = (10, 20, 50, 100, 200),
    bins: int = 20,
    component: int = 0,
) -> EnsembleReport:
    """Statistics of final-time velocities ``u_final`` shaped (S, dim, *grid).

    Ensemble means are taken over nested prefixes; the convergence error is
    ||mean_S - mean_Smax||_{L2_x} with Smax the full ensemble.
    """
    S = u_final.shape[0]
    hist_sizes = sorted(int(s) for s in hist_sizes)
    conv_sizes = sorted(int(s) for s in conv_sizes)
    if hist_sizes[-1] > S or conv_sizes[-1] >= S:
        raise ValueError(f"ensemble of {S} samples is too small for sizes {hist_sizes}, {conv_sizes}")
    q = quantity_of_interest(d, u_final, component)
    hists, skew, kurt = [], {}, {}
    degenerate = bool(np.ptp(q) <= 1e-14 * max(1.0, np.abs(q).max()))
    for s in hist_sizes:
        qs = q[:s]
        if degenerate:
            edges = np.array([qs.min(), qs.max()])
            counts = np.array([s])
            skew[s] = 0.0
            kurt[s] = 0.0
        else:
            counts, edges = np.histogram(qs, bins=bins)
            skew[s] = float(scipy.stats.skew(qs))
            kurt[s] = float(scipy.stats.kurtosis(qs))
        hists.append((edges, counts))
    csum = np.cumsum(u_final, axis=0)
    full = csum[-1] / S
    errs = []
    for s in conv_sizes:
        diff = csum[s - 1] / s - full
        errs.append(float(np.sqrt(d.integrate(diff**2).sum())))
    errs = np.array(errs)
    if degenerate or np.any(errs <= 0):
        slope = float("nan")
        degenerate = True
    else:
        slope = float(np.polyfit(np.log(conv_sizes), np.log(errs), 1)[0])
    return EnsembleReport(q, hist_sizes, hists, np.array(conv_sizes), errs, slope, skew, kurt, degenerate)
