"""
Command-line interface: ``speconet <command> [--preset P] [--config F] ...``.

Commands
--------
solve        classical solver run; trajectory files, diagnostics CSV, error CSV
             when an exact solution exists
train        sequential data-free training; checkpoint, training log, error CSV
infer        roll a checkpoint forward on unseen inputs; trajectories, error CSV
ensemble     ensemble statistics of Q at the final time, plus timing table
convergence  temporal (Beltrami) and spatial (Helmholtz) convergence CSVs

Exit codes: 0 success, 2 config/input error, 3 data-integrity error,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .basis import BasisKind, NumericalError
from .config import PRESETS, ConfigError, RunConfig, load_file
from .galerkin import sine_helmholtz_error
from .io import DataIntegrityError, FieldFile, read_checkpoint, write_checkpoint, write_csv, write_field
from .problems import (
    PRNG_ALGORITHM,
    BeltramiBatch,
    BeltramiParams,
    Family,
    energy_enstrophy,
    ensemble_stats,
    flow_inputs,
    generate,
    rel_errors,
)
from .solver import FlowInputs, PressureCorrectionSolver, SolverConfig
from .trainer import LOG_COLUMNS, SequentialTrainer, infer, network_inputs

EXIT_OK, EXIT_CONFIG, EXIT_INTEGRITY, EXIT_NUMERICAL = 0, 2, 3, 4

# offset separating the seeds of evaluation batches from the training batch
TEST_SEED_OFFSET = 1_000_003


# ---------------------------------------------------------------------------
# Shared pieces
# ---------------------------------------------------------------------------


def make_batch(cfg: RunConfig, solver: PressureCorrectionSolver, sigma=None, count=None, seed=None):
    spec = cfg.input_spec(sigma, count, seed)
    batch = generate(spec, cfg["solver.nu"])
    return batch, flow_inputs(cfg.family, batch, spec.count)


def _kinds(solver) -> tuple:
    d = solver.disc
    k = BasisKind.FOURIER if d.periodic else BasisKind.LEGENDRE_DIRICHLET
    return (k,) * d.dim


def write_trajectory(out: Path, tag: str, solver, traj) -> None:
    """One field file per sample and recorded step, plus a manifest CSV."""
    base = out / tag
    base.mkdir(parents=True, exist_ok=True)
    kinds = _kinds(solver)
    rows = []
    for s in range(traj.velocity.shape[1]):
        sdir = base / f"sample_{s:04d}"
        sdir.mkdir(exist_ok=True)
        for k, t in enumerate(traj.times):
            uf = sdir / f"u_{k:04d}.spfd"
            pf = sdir / f"p_{k:04d}.spfd"
            write_field(uf, FieldFile(kinds, traj.velocity[k, s], float(t)))
            write_field(pf, FieldFile(kinds, traj.pressure[k, s][None], float(t)))
            rows.append((s, k, float(t), str(uf.relative_to(out)), str(pf.relative_to(out))))
    write_csv(base / "manifest.csv", ("sample", "step", "time", "velocity_file", "pressure_file"), rows)


def error_rows(report):
    """time, mean over samples, then one column per sample."""
    return [(float(t), float(np.mean(e)), *map(float, e)) for t, e in zip(report.times, report.rel_l2_x)]


def write_errors(path, report) -> None:
    S = report.rel_l2_x.shape[1]
    write_csv(path, ("time", "rel_l2_x_mean") + tuple(f"rel_l2_x_{s}" for s in range(S)), error_rows(report))
    rows = [(s, float(report.rel_l2_tx[s]),
             float(report.rel_h1_tx_pressure[s]) if report.rel_h1_tx_pressure is not None else float("nan"))
            for s in range(S)]
    write_csv(Path(path).with_name(Path(path).stem + "_tx.csv"), ("sample", "rel_l2_tx", "rel_h1_tx_pressure"), rows)


def exact_velocity(cfg: RunConfig, batch, solver, times):
    """Exact velocity (T, S, dim, *grid) when the family has one, else None."""
    if cfg.family is not Family.BELTRAMI_3D:
        return None
    c = solver.disc.coords()
    return np.stack([batch.velocity(t, c) for t in times])


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_solve(cfg: RunConfig, out: Path) -> int:
    solver = PressureCorrectionSolver(cfg.solver_config())
    batch, inputs = make_batch(cfg, solver)
    traj = solver.run(inputs)
    write_trajectory(out, "trajectory", solver, traj)
    E, Z = energy_enstrophy(solver.disc, traj.velocity)
    rows = [(float(t), float(traj.div_ratio[k - 1]) if k else 0.0,
             float(traj.boundary_max[k]) if len(traj.boundary_max) > k else 0.0,
             float(E[k].mean()), float(Z[k].mean()))
            for k, t in enumerate(traj.times)]
    write_csv(out / "diagnostics.csv", ("time", "div_ratio", "boundary_max", "energy", "enstrophy"), rows)
    ref = exact_velocity(cfg, batch, solver, traj.times)
    if ref is not None:
        write_errors(out / "errors.csv", rel_errors(solver.disc, traj.times, traj.velocity, ref))
    return EXIT_OK


def train_model(cfg: RunConfig):
    """Train on the configured batch; returns (solver, batch, inputs, result)."""
    solver = PressureCorrectionSolver(cfg.solver_config())
    batch, inputs = make_batch(cfg, solver)
    ni = network_inputs(solver, inputs, cfg.net_input_kind)
    trainer = SequentialTrainer(solver, inputs, ni, cfg.net(), cfg.schedule(), cfg["seed"])
    res = trainer.train()
    res.model.meta.update(preset=cfg["preset"], prng=PRNG_ALGORITHM)
    return solver, batch, inputs, res


def cmd_train(cfg: RunConfig, out: Path) -> int:
    solver, batch, inputs, res = train_model(cfg)
    write_csv(out / "training_log.csv", LOG_COLUMNS, res.log)
    ckpt = Path(cfg["paths.checkpoint"] or out / "model.spon")
    write_checkpoint(ckpt, res.model, cfg.echo(), PRNG_ALGORITHM)
    ref = solver.run(inputs)
    write_errors(out / "train_errors.csv", rel_errors(solver.disc, ref.times, res.trajectory.velocity, ref.velocity))
    return EXIT_OK


def load_model(cfg: RunConfig):
    path = cfg["paths.checkpoint"]
    if not path:
        raise ConfigError("paths.checkpoint is required")
    if not Path(path).is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    model, header = read_checkpoint(path)
    # the discretization and network come from the checkpoint
    saved = header.get("config", {})
    keep = {k: v for k, v in saved.items() if k.startswith(("solver.", "net.", "problem.family", "train.block"))}
    cur = {k: v for k, v in cfg.values.items() if k not in keep and k != "preset"}
    return model, RunConfig.build(saved.get("preset", cfg["preset"]), {**cur, **keep})


def cmd_infer(cfg: RunConfig, out: Path) -> int:
    model, cfg = load_model(cfg)
    solver = PressureCorrectionSolver(cfg.solver_config())
    batch, inputs = make_batch(cfg, solver, cfg["problem.test_sigma"], cfg["problem.test_count"],
                               cfg["seed"] + TEST_SEED_OFFSET)
    ni = network_inputs(solver, inputs, cfg.net_input_kind)
    traj = infer(model, solver, inputs, ni)
    write_trajectory(out, "prediction", solver, traj)
    ref = solver.run(inputs)
    write_errors(out / "infer_errors.csv",
                 rel_errors(solver.disc, ref.times, traj.velocity, ref.velocity, traj.pressure, ref.pressure))
    return EXIT_OK


def ensemble_final(cfg: RunConfig, count: int, model=None):
    """Final-time velocities for ``count`` samples and the wall time taken."""
    solver = PressureCorrectionSolver(cfg.solver_config())
    _, inputs = make_batch(cfg, solver, cfg["ensemble.sigma"], count, cfg["seed"] + TEST_SEED_OFFSET)
    t0 = time.perf_counter()
    if model is None:
        traj = solver.run(inputs, record_every=cfg["solver.steps"])
    else:
        traj = infer(model, solver, inputs, network_inputs(solver, inputs, cfg.net_input_kind),
                     record_every=cfg["solver.steps"])
    return solver, traj.velocity[-1], time.perf_counter() - t0


def write_ensemble(out: Path, d, rep) -> None:
    write_csv(out / "ensemble_convergence.csv", ("size", "mean_error", "slope"),
              [(int(s), float(e), rep.slope) for s, e in zip(rep.conv_sizes, rep.conv_errors)])
    write_csv(out / "ensemble_moments.csv", ("size", "q_mean", "q_std", "skewness", "kurtosis"),
              [(s, float(rep.q[:s].mean()), float(rep.q[:s].std()), rep.skewness[s], rep.kurtosis[s])
               for s in rep.hist_sizes])
    rows = []
    for s, (edges, counts) in zip(rep.hist_sizes, rep.histograms):
        rows += [(s, float(edges[i]), float(edges[i + 1]), int(c)) for i, c in enumerate(counts)]
    write_csv(out / "ensemble_histogram.csv", ("size", "bin_left", "bin_right", "count"), rows)


def cmd_ensemble(cfg: RunConfig, out: Path) -> int:
    model = None
    if cfg["ensemble.source"] == "model":
        model, cfg = load_model(cfg)
    sizes = sorted(cfg["ensemble.sizes"])
    hist = sorted(cfg["ensemble.hist_sizes"])
    count = cfg["ensemble.count"]
    if count < hist[-1] or count <= sizes[-1]:
        raise ConfigError(f"ensemble.count={count} is smaller than the requested sizes")
    solver, u_final, _ = ensemble_final(cfg, count, model)
    rep = ensemble_stats(solver.disc, u_final, hist, sizes)
    write_ensemble(out, solver.disc, rep)
    rows = []
    for s in sorted(cfg["ensemble.timing_sizes"]):
        _, _, t_oracle = ensemble_final(cfg, s, None)
        t_model = ensemble_final(cfg, s, model)[2] if model is not None else float("nan")
        rows.append((s, t_oracle, t_oracle / s, t_model, t_model / s, t_oracle / t_model))
    write_csv(out / "ensemble_timing.csv",
              ("size", "oracle_s", "oracle_per_sample_s", "inference_s", "inference_per_sample_s", "speedup"), rows)
    return EXIT_OK


def beltrami_temporal(dts, n: int = 16, final_time: float = 0.5, nu: float = 0.1):
    """(dt, relative L2 error at final_time, observed order) for a k=1 Beltrami flow."""
    bb = BeltramiBatch([BeltramiParams(k=1, nu=nu)])
    rows, prev = [], None
    for dt in sorted(dts, reverse=True):
        steps = int(round(final_time / dt))
        s = PressureCorrectionSolver(SolverConfig(dt=dt, steps=steps, nu=nu, n=n, bc="periodic", dim=3))
        tr = s.run(FlowInputs(1, initial=bb.initial, pressure0=bb.pressure0), record_every=steps)
        ex = bb.velocity(tr.times[-1], s.disc.coords())
        err = float(np.sqrt(np.sum((tr.velocity[-1] - ex) ** 2) / np.sum(ex**2)))
        order = float("nan") if prev is None else float(np.log(prev[1] / err) / np.log(prev[0] / dt))
        rows.append((dt, err, order))
        prev = (dt, err)
    return rows


def cmd_convergence(cfg: RunConfig, out: Path) -> int:
    rows = beltrami_temporal(cfg["convergence.dts"], final_time=cfg["convergence.final_time"])
    write_csv(out / "convergence_time.csv", ("dt", "rel_l2_error", "observed_order"), rows)
    write_csv(out / "convergence_space.csv", ("n", "max_error"),
              [(n, sine_helmholtz_error(n)) for n in sorted(cfg["convergence.ns"])])
    return EXIT_OK


COMMANDS = {
    "solve": cmd_solve,
    "train": cmd_train,
    "infer": cmd_infer,
    "ensemble": cmd_ensemble,
    "convergence": cmd_convergence,
}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="speconet", description="Spectral Navier-Stokes solver and operator network.")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--preset", choices=sorted(PRESETS))
    ap.add_argument("--config", help="key=value config file")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--threads", type=int)
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override one config key (repeatable)")
    return ap


def resolve_config(args) -> RunConfig:
    over = load_file(args.config) if args.config else {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        over[k.strip()] = v.strip()
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        over["seed"] = args.seed
    if args.threads is not None:
        over["threads"] = args.threads
    if args.out is not None:
        over["paths.out"] = args.out
    return RunConfig.build(args.preset or over.get("preset"), over)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        out = Path(cfg["paths.out"])
        out.mkdir(parents=True, exist_ok=True)
        with threadpool_limits(limits=cfg["threads"]):
            return COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataIntegrityError as exc:
        print(f"data integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
