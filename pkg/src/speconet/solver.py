"""
Rotational pressure-correction time stepper (BDF2) for incompressible flow.

One step from (u^{k-1}, u^k, p^k) to (u^{k+1}, p^{k+1}):

    (3 ut - 4 u^k + u^{k-1}) / (2 dt) - nu Lap(ut) + grad p^k = g^{k+1}
    int grad(Phi) . grad(Psi) + 3/(2 dt) int div(ut) Psi = 0      for all Psi
    u^{k+1} = ut - (2 dt / 3) grad(Phi)
    p^{k+1} = p^k + Phi - nu div(ut)

with g^{k+1} = f(t^{k+1}) - (2 (u^k . grad) u^k - (u^{k-1} . grad) u^{k-1}).

Every routine works on a leading batch axis of independent samples.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .basis import NumericalError
from .discretization import Discretization


class BlowUpError(NumericalError):
    def __init__(self, step: int, message: str = ""):
        super().__init__(f"solution blew up at step {step}{': ' + message if message else ''}")
        self.step = step


BLOWUP_THRESHOLD = 1e6


@dataclass
class SolverConfig:
    dt: float
    steps: int
    nu: float
    n: int
    bc: str
    dim: int
    dealias: bool = False

    def __post_init__(self):
        if self.dt <= 0 or self.nu <= 0 or self.steps < 1:
            raise ValueError("need dt > 0, nu > 0 and steps >= 1")

    @property
    def final_time(self) -> float:
        return self.dt * self.steps

    @property
    def tau(self) -> float:
        return 1.5 / self.dt


@dataclass
class FlowInputs:
    """Problem data for a batch of ``count`` samples.

    Callables receive coordinate arrays from :meth:`Discretization.coords`.
    ``forcing(t, coords)`` and ``initial(coords)`` return ``(S, dim, *grid)``;
    ``pressure0(coords)`` returns ``(S, *grid)``; ``boundary(t, x)`` returns
    top-wall tangential velocity ``(S, len(x))``.
    """

    count: int
    initial: Callable
    forcing: Optional[Callable] = None
    pressure0: Optional[Callable] = None
    boundary: Optional[Callable] = None
    t0: float = 0.0


@dataclass
class FlowState:
    """Flow variables at one time level, in solver representation."""

    k: int
    t: float
    u: np.ndarray
    p: np.ndarray
    phi: Optional[np.ndarray] = None
    u_tilde: Optional[np.ndarray] = None


@dataclass
class Trajectory:
    times: np.ndarray
    velocity: np.ndarray  # (K+1, S, dim, *grid) nodal
    pressure: np.ndarray  # (K+1, S, *grid) nodal
    div_ratio: np.ndarray = field(default_factory=lambda: np.zeros(0))
    boundary_max: np.ndarray = field(default_factory=lambda: np.zeros(0))
    corner_max: float = 0.0


class PressureCorrectionSolver:
    """BDF2 rotational pressure-correction stepper on a :class:`Discretization`."""

    def __init__(self, config: SolverConfig, disc: Discretization | None = None):
        self.config = config
        self.disc = disc or Discretization(config.dim, config.n, config.bc, config.dealias)
        self.helm = self.disc.helmholtz(config.tau, config.nu)
        self.pois = self.disc.poisson()

    # -- pieces ------------------------------------------------------------
    def forcing_at(self, inputs: FlowInputs, t: float) -> np.ndarray:
        d = self.disc
        shape = (inputs.count, d.dim) + d.grid_shape
        if inputs.forcing is None:
            f = np.zeros(shape)
        else:
            f = np.broadcast_to(inputs.forcing(t, d.coords()), shape)
        return d.from_nodal(f)

    def lifting_at(self, inputs: FlowInputs, t: float):
        """Lifting field in representation, or None, plus corner values."""
        if inputs.boundary is None:
            return None, None
        g = inputs.boundary(t, self.disc.nodes)
        return self.disc.lifting(np.asarray(g, dtype=float))

    def initial_state(self, inputs: FlowInputs) -> FlowState:
        d = self.disc
        u0 = np.broadcast_to(inputs.initial(d.coords()), (inputs.count, d.dim) + d.grid_shape)
        u0 = d.from_nodal(np.array(u0, dtype=float))
        if inputs.pressure0 is None:
            p0 = np.zeros((inputs.count,) + d.grid_shape)
        else:
            p0 = np.broadcast_to(inputs.pressure0(d.coords()), (inputs.count,) + d.grid_shape)
        p0 = d.from_nodal(np.array(p0, dtype=float))
        return FlowState(0, inputs.t0, u0, p0)

    def stokes_startup(self, state: FlowState, f0: np.ndarray) -> np.ndarray:
        """u^{-1} = u^0 - dt (f(t^0) + nu Lap(u^0) - grad p^0)."""
        d, cfg = self.disc, self.config
        return state.u - cfg.dt * (f0 + cfg.nu * d.laplacian(state.u) - d.grad(state.p))

    def nonlinear_rhs(self, u_k, u_km1, f_kp1):
        """g^{k+1} = f^{k+1} - (2 (u^k . grad) u^k - (u^{k-1} . grad) u^{k-1})."""
        d = self.disc
        return f_kp1 - (2.0 * d.advection(u_k) - d.advection(u_km1))

    def momentum_rhs(self, u_k, u_km1, p_k, g, lift=None):
        """Weak right-hand side F of the momentum Helmholtz problem."""
        d, cfg = self.disc, self.config
        r = g - d.grad(p_k) + (4.0 * u_k - u_km1) / (2.0 * cfg.dt)
        F = d.weak_velocity(r)
        if lift is not None:
            F = F - cfg.tau * d.weak_velocity(lift) - cfg.nu * d.weak_stiffness_velocity(lift)
        return F

    def momentum_step(self, u_k, u_km1, p_k, g, lift=None):
        """Returns (ut in representation, its velocity coefficients)."""
        F = self.momentum_rhs(u_k, u_km1, p_k, g, lift)
        alpha = self.helm.solve(F)
        ut = self.disc.from_vel_coeffs(alpha)
        if lift is not None:
            ut = ut + lift
        return ut, alpha

    def poisson_rhs(self, ut):
        d = self.disc
        F = -(1.5 / self.config.dt) * d.weak_phi(d.div(ut))
        d.check_compatible(F)
        return F

    def pressure_poisson(self, ut):
        phi = self.pois.solve(self.poisson_rhs(ut))
        return self.disc.from_phi_coeffs(phi), phi

    def correct(self, ut, phi, p_k):
        d, cfg = self.disc, self.config
        u = ut - (2.0 * cfg.dt / 3.0) * d.grad(phi)
        p = p_k + phi - cfg.nu * d.div(ut)
        return u, p

    # -- driver ------------------------------------------------------------
    def run(self, inputs: FlowInputs, record_every: int = 1, check_projection: bool = True) -> Trajectory:
        cfg, d = self.config, self.disc
        state = self.initial_state(inputs)
        f0 = self.forcing_at(inputs, inputs.t0)
        u_prev = self.stokes_startup(state, f0)
        u, p = state.u, state.p
        times = [inputs.t0]
        vel = [d.to_nodal(u)]
        pres = [d.to_nodal(p)]
        ratios, bmax = [], []
        corner_max = 0.0
        for k in range(cfg.steps):
            t1 = inputs.t0 + (k + 1) * cfg.dt
            f1 = self.forcing_at(inputs, t1)
            lift, corners = self.lifting_at(inputs, t1)
            if corners is not None:
                corner_max = max(corner_max, float(np.abs(corners).max()))
            g = self.nonlinear_rhs(u, u_prev, f1)
            ut, _ = self.momentum_step(u, u_prev, p, g, lift)
            phi, _ = self.pressure_poisson(ut)
            u_new, p_new = self.correct(ut, phi, p)
            if check_projection:
                ratios.append(_weak_div_ratio(d, u_new, ut))
            if not d.periodic:
                free = ut if lift is None else ut - lift
                bmax.append(d.boundary_max(free))
            nod = d.to_nodal(u_new)
            if not np.all(np.isfinite(nod)) or np.abs(nod).max() > BLOWUP_THRESHOLD:
                raise BlowUpError(k + 1)
            u_prev, u, p = u, u_new, p_new
            if (k + 1) % record_every == 0 or k + 1 == cfg.steps:
                times.append(t1)
                vel.append(nod)
                pres.append(d.to_nodal(p))
        return Trajectory(
            np.array(times),
            np.stack(vel),
            np.stack(pres),
            np.array(ratios),
            np.array(bmax),
            corner_max,
        )


def _weak_div_ratio(d: Discretization, u, ut) -> float:
    a = np.sqrt(np.sum(np.abs(d.weak_divergence(u)) ** 2))
    b = np.sqrt(np.sum(np.abs(d.weak_divergence(ut)) ** 2))
    return float(a / b) if b > 1e-300 else float(a)


def kinetic_energy(d: Discretization, u_nodal: np.ndarray) -> np.ndarray:
    """Domain-averaged kinetic energy 1/|Omega| int |u|^2 / 2 of nodal velocity."""
    c = u_nodal.ndim - d.dim - 1
    return d.integrate(0.5 * np.sum(u_nodal**2, axis=c)) / d.volume
