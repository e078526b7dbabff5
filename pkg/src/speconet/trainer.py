"""
Sequential data-free training and amortized inference.

For every time step k -> k+1 of a block of K steps:

1. fit the velocity network's step head (and, at the first step of the
   block, its convolution) to the weak momentum residual;
2. freeze the convolution for the remaining steps of the block;
3. fit a fresh correction network to the weak Poisson residual;
4. rebuild (u^{k+1}, p^{k+1}) from both outputs and roll forward.

History states are the network's own reconstructions and are constants
inside each step's loss. Every block starts from freshly initialized
networks.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .basis import NumericalError
from .lbfgs import LbfgsOptions, lbfgs_minimize
from .network import (
    ConvHead,
    OutputMap,
    StepProblem,
    features,
    init_convhead,
    input_rms,
    loss_and_grad,
    sq,
)
from .solver import FlowInputs, PressureCorrectionSolver, Trajectory


class TrainingDivergence(NumericalError):
    pass


LOG_COLUMNS = ("block", "step", "phase", "iteration", "loss", "grad_norm", "wall_time_ms")


@dataclass
class NetConfig:
    filters_u: int
    kernel_u: int
    filters_phi: int
    kernel_phi: int
    share_phi_conv: bool = False


@dataclass
class TrainSchedule:
    block_size: int = 10
    total_steps: int = 100
    freeze_conv_after_first: bool = True
    lbfgs: LbfgsOptions = field(default_factory=LbfgsOptions)
    lbfgs_phi: Optional[LbfgsOptions] = None
    divergence_factor: float = 10.0
    divergence_floor: float = 1e-6

    def blocks(self):
        K = self.block_size
        out, k = [], 0
        while k < self.total_steps:
            out.append(list(range(k, min(k + K, self.total_steps))))
            k += K
        return out


@dataclass
class NetInputs:
    """Velocity-network inputs: ``fn(k)`` returns (S, Cin, *grid) for step k -> k+1.

    ``static`` marks inputs that do not depend on k (initial data).
    """

    fn: Callable[[int], np.ndarray]
    static: bool = False

    def __call__(self, k: int) -> np.ndarray:
        return self.fn(k)


@dataclass
class BlockParams:
    steps: list
    net_u: ConvHead
    net_phi: list  # one ConvHead (single head) per step


@dataclass
class SpecONetModel:
    net: NetConfig
    blocks: list = field(default_factory=list)
    seed: int = 0
    meta: dict = field(default_factory=dict)


@dataclass
class TrainResult:
    model: SpecONetModel
    log: list
    trajectory: Trajectory


def _block_rng(seed: int, block: int, which: int) -> np.random.Generator:
    ss = np.random.SeedSequence(seed, spawn_key=(1 << 20, block, which))
    return np.random.Generator(np.random.PCG64(ss))


def _pack(arrays):
    return np.concatenate([a.ravel() for a in arrays])


def _unpack(x, like):
    out, i = [], 0
    for a in like:
        out.append(x[i:i + a.size].reshape(a.shape))
        i += a.size
    return out


class SequentialTrainer:
    """Block-sequential training of velocity and pressure networks on one batch."""

    def __init__(self, solver: PressureCorrectionSolver, inputs: FlowInputs, net_inputs: NetInputs,
                 net: NetConfig, schedule: TrainSchedule, seed: int = 0):
        self.solver = solver
        self.disc = solver.disc
        self.inputs = inputs
        self.net_inputs = net_inputs
        self.net = net
        self.schedule = schedule
        self.seed = seed
        self.omap_u = OutputMap(self.disc, "velocity", solver.helm)
        self.omap_phi = OutputMap(self.disc, "phi", solver.pois)

    # -- one L-BFGS fit -----------------------------------------------------
    def _fit(self, p: ConvHead, head: int, prob: StepProblem, train_conv: bool, opts: LbfgsOptions,
             log: list, block: int, step: int, phase: str):
        Z_fixed = None if train_conv else features(p, prob.x)[0]
        like = [p.kernel, p.bias, p.heads[head]] if train_conv else [p.heads[head]]
        raw_scale = 1.0 / prob.scale

        def objective(x):
            parts = _unpack(x, like)
            if train_conv:
                q = ConvHead(parts[0], parts[1], parts[2][None], p.input_scale)
            else:
                q = ConvHead(p.kernel, p.bias, parts[0][None], p.input_scale)
            f, g = loss_and_grad(q, 0, prob, train_conv, Z_fixed)
            if not np.isfinite(f):
                raise TrainingDivergence(f"non-finite {phase} loss at block {block}, step {step}")
            gv = _pack([g["kernel"], g["bias"], g["heads"]] if train_conv else [g["heads"]])
            return f, gv

        t0 = time.perf_counter()

        def cb(it, f, gn):
            log.append((block, step, phase, it, f * raw_scale, gn, (time.perf_counter() - t0) * 1e3))

        x0 = _pack(like)
        if train_conv:
            # convex warm start: head only, features fixed at the initial conv
            Zw = features(p, prob.x)[0]
            hx, _ = lbfgs_minimize(
                lambda v: self._head_objective(p, prob, Zw, v, like[-1].shape), like[-1].ravel(), opts, cb
            )
            x0[-hx.size:] = hx
        x, trace = lbfgs_minimize(objective, x0, opts, cb)
        parts = _unpack(x, like)
        if train_conv:
            p.kernel[...] = parts[0]
            p.bias[...] = parts[1]
        p.heads[head] = parts[-1]
        return trace.best_losses[-1]

    @staticmethod
    def _head_objective(p, prob, Z, v, shape):
        q = ConvHead(p.kernel, p.bias, v.reshape(shape)[None], p.input_scale)
        f, g = loss_and_grad(q, 0, prob, False, Z)
        return f, g["heads"].ravel()

    # -- training -------------------------------------------------------------
    def train(self) -> TrainResult:
        sol, d, sch = self.solver, self.disc, self.schedule
        model = SpecONetModel(self.net, [], self.seed)
        log: list = []
        state = sol.initial_state(self.inputs)
        u_prev = sol.stokes_startup(state, sol.forcing_at(self.inputs, self.inputs.t0))
        u, p = state.u, state.p
        rec = _Recorder(d, self.inputs.t0, u, p)
        phi_opts = sch.lbfgs_phi or sch.lbfgs
        for b, steps in enumerate(sch.blocks()):
            x0 = self.net_inputs(steps[0])
            net_u = init_convhead(_block_rng(self.seed, b, 0), x0.shape[1], x0.shape[2:],
                                  self.net.kernel_u, self.net.filters_u, self.omap_u.size, len(steps),
                                  input_rms(x0))
            phis = []
            first_loss = None
            for j, k in enumerate(steps):
                prob_u, lift = self._velocity_problem(u, u_prev, p, k)
                train_conv = j == 0 or not sch.freeze_conv_after_first
                lu = self._fit(net_u, j, prob_u, train_conv, sch.lbfgs, log, b, k + 1, "u")
                ut = self._velocity(net_u, j, prob_u, lift)
                prob_phi = self._phi_problem(ut)
                net_phi = self._init_phi(b, j, prob_phi.x, phis)
                train_phi_conv = not (self.net.share_phi_conv and j > 0)
                self._fit(net_phi, 0, prob_phi, train_phi_conv, phi_opts, log, b, k + 1, "phi")
                phis.append(net_phi)
                u_new, p_new = self._correct(net_phi, prob_phi, ut, p)
                first_loss = lu if first_loss is None else first_loss
                if lu > sch.divergence_factor * max(first_loss, sch.divergence_floor):
                    raise TrainingDivergence(
                        f"velocity loss {lu:.3e} at block {b}, step {k + 1} exceeds "
                        f"{sch.divergence_factor}x the block start {first_loss:.3e}"
                    )
                u_prev, u, p = u, u_new, p_new
                rec.add(self.inputs.t0 + (k + 1) * sol.config.dt, u, p)
            model.blocks.append(BlockParams(steps, net_u, phis))
        return TrainResult(model, log, rec.trajectory())

    def _init_phi(self, b, j, x, phis):
        if self.net.share_phi_conv and phis:
            first = phis[0]
            rng = _block_rng(self.seed, b, 1 + j)
            fresh = init_convhead(rng, 1, x.shape[2:], self.net.kernel_phi, self.net.filters_phi,
                                  self.omap_phi.size, 1)
            return ConvHead(first.kernel, first.bias, fresh.heads, first.input_scale)
        return init_convhead(_block_rng(self.seed, b, 1 + j), 1, x.shape[2:], self.net.kernel_phi,
                             self.net.filters_phi, self.omap_phi.size, 1, input_rms(x))

    # -- shared step algebra (training and inference) ---------------------------
    def _velocity_problem(self, u, u_prev, p, k):
        sol = self.solver
        t1 = self.inputs.t0 + (k + 1) * sol.config.dt
        f1 = sol.forcing_at(self.inputs, t1)
        lift, _ = sol.lifting_at(self.inputs, t1)
        g = sol.nonlinear_rhs(u, u_prev, f1)
        F = sol.momentum_rhs(u, u_prev, p, g, lift)
        h = sol.helm.transform(F)
        return StepProblem(self.net_inputs(k), h, self.omap_u, _scale(h)), lift

    def _velocity(self, net_u, j, prob, lift):
        w = self.omap_u.decode(features(net_u, prob.x)[0] @ net_u.heads[j])
        ut = self.disc.from_vel_coeffs(self.omap_u.coeffs(w))
        return ut if lift is None else ut + lift

    def _velocity_input(self, k):
        t1 = self.inputs.t0 + (k + 1) * self.solver.config.dt
        lift, _ = self.solver.lifting_at(self.inputs, t1)
        return StepProblem(self.net_inputs(k), None, self.omap_u), lift

    def _phi_input(self, ut):
        d = self.disc
        return StepProblem(d.to_input(d.div(ut))[:, None], None, self.omap_phi)

    def _phi_problem(self, ut):
        sol, d = self.solver, self.disc
        h = sol.pois.transform(sol.poisson_rhs(ut))
        x = d.to_input(d.div(ut))[:, None]
        return StepProblem(x, h, self.omap_phi, _scale(h))

    def _correct(self, net_phi, prob, ut, p):
        w = self.omap_phi.decode(features(net_phi, prob.x)[0] @ net_phi.heads[0])
        phi = self.disc.from_phi_coeffs(self.omap_phi.coeffs(w))
        return self.solver.correct(ut, phi, p)


def _scale(h):
    n = sq(h)
    return 1.0 / n if n > 1e-300 else 1.0


class _Recorder:
    def __init__(self, d, t0, u, p):
        self.d = d
        self.times = [t0]
        self.u = [d.to_nodal(u)]
        self.p = [d.to_nodal(p)]

    def add(self, t, u, p):
        self.times.append(t)
        self.u.append(self.d.to_nodal(u))
        self.p.append(self.d.to_nodal(p))

    def trajectory(self):
        return Trajectory(np.array(self.times), np.stack(self.u), np.stack(self.p))


def infer(model: SpecONetModel, solver: PressureCorrectionSolver, inputs: FlowInputs,
          net_inputs: NetInputs, record_every: int = 1) -> Trajectory:
    """Roll a trained model forward on new inputs (no optimization).

    Every ``record_every``-th step and the last step are recorded.
    """
    tr = SequentialTrainer(solver, inputs, net_inputs, model.net, TrainSchedule(), model.seed)
    sol = solver
    state = sol.initial_state(inputs)
    u_prev = sol.stokes_startup(state, sol.forcing_at(inputs, inputs.t0))
    u, p = state.u, state.p
    rec = _Recorder(solver.disc, inputs.t0, u, p)
    last = model.blocks[-1].steps[-1] if model.blocks else -1
    for blk in model.blocks:
        for j, k in enumerate(blk.steps):
            prob_u, lift = tr._velocity_input(k)
            ut = tr._velocity(blk.net_u, j, prob_u, lift)
            prob_phi = tr._phi_input(ut)
            u_new, p_new = tr._correct(blk.net_phi[j], prob_phi, ut, p)
            u_prev, u, p = u, u_new, p_new
            if (k + 1) % record_every == 0 or k == last:
                rec.add(inputs.t0 + (k + 1) * sol.config.dt, u, p)
    return rec.trajectory()


def network_inputs(solver: PressureCorrectionSolver, inputs: FlowInputs, kind: str) -> NetInputs:
    """Velocity-network inputs on the input grid.

    ``kind`` selects the varying input: "forcing" (f at t^{k+1}), "boundary"
    (the lifting field at t^{k+1}) or "initial" (u^0, the same every step).
    """
    d, dt = solver.disc, solver.config.dt
    if kind == "initial":
        x0 = d.to_input(solver.initial_state(inputs).u)
        return NetInputs(lambda k: x0, static=True)
    if kind == "forcing":
        return NetInputs(lambda k: d.to_input(solver.forcing_at(inputs, inputs.t0 + (k + 1) * dt)))
    if kind == "boundary":
        return NetInputs(lambda k: d.to_input(solver.lifting_at(inputs, inputs.t0 + (k + 1) * dt)[0]))
    raise ValueError(f"unknown network input kind {kind!r}")
