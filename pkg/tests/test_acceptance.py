"""Acceptance criteria 1-13, each printed as one PASS/FAIL line.

Expected values come from independent oracles: closed-form integrals,
dense Kronecker solves, exact Beltrami flows, finite differences and
classical solver trajectories.
"""
import time

import numpy as np
import pytest

from speconet.basis import (
    BasisKind,
    BasisSpec,
    analyze_fourier,
    evaluate_basis,
    gll_rule,
    synthesize_fourier,
)
from speconet.cli import TEST_SEED_OFFSET, beltrami_temporal
from speconet.discretization import Discretization
from speconet.galerkin import assemble_mass, assemble_stiffness, build_operator, sine_helmholtz_error
from speconet.io import read_csv, write_csv
from speconet.network import init_convhead, input_rms, loss_and_grad
from speconet.problems import (
    BeltramiParams,
    Family,
    RandomInputSpec,
    beltrami_exact,
    ensemble_stats,
    flow_inputs,
    gen_beltrami,
    gen_forcing_2d,
    gen_initial_2d,
    generate,
    rel_errors,
)
from speconet.solver import PressureCorrectionSolver, SolverConfig
from speconet.trainer import LOG_COLUMNS, NetConfig, SequentialTrainer, TrainSchedule, infer, network_inputs

# --- tolerances ---------------------------------------------------------------
GLL_TOL = 1e-12
ENDPOINT_TOL = 1e-10
FOURIER_TOL = 1e-12
KRON_TOL = 1e-9
HELM_TOL = 1e-8
HELM_RATIO = 1e3
BELT_RES_TOL = 1e-8
BELT_DIV_TOL = 1e-10
ORDER_RANGE = (1.7, 2.3)
BELT_ACC_TOL = 1e-3
PROJ_TOL = 1e-8
GRAD_TOL = 1e-5
FD_EPS = 1e-6
TRAIN_TOL = 5e-2
GEN_RATIO = 4.0
SLOPE_RANGE = (-0.65, -0.35)
SCALING_RATIO = 1.5

# --- desk-scale training setup (criteria 9, 10, 12, 13) -------------------------
TRAIN_N, TRAIN_S, TRAIN_SIGMA, TRAIN_SEED = 16, 8, 5.0, 0
TRAIN_NU, TRAIN_DT, TRAIN_STEPS, TRAIN_K = 0.01, 0.01, 100, 10

pytestmark = pytest.mark.acceptance


# ---------------------------------------------------------------------------
# 1-4: discretization
# ---------------------------------------------------------------------------


def test_c01_quadrature_and_bases(record_criterion):
    t0 = time.perf_counter()
    worst_q = 0.0
    for P in (3, 5, 8, 13, 24, 33):
        x, w = gll_rule(P).nodes, gll_rule(P).weights
        for deg in range(2 * P - 2):
            exact = 2.0 / (deg + 1) if deg % 2 == 0 else 0.0
            worst_q = max(worst_q, abs(w @ x**deg - exact) / max(1.0, abs(exact)))
    worst_e = 0.0
    for n in (4, 9, 16, 30):
        for kind in (BasisKind.LEGENDRE_DIRICHLET, BasisKind.LEGENDRE_NEUMANN):
            v, d = evaluate_basis(BasisSpec(kind, n), np.array([-1.0, 1.0]))
            vals = v if kind is BasisKind.LEGENDRE_DIRICHLET else d
            worst_e = max(worst_e, np.abs(vals).max())
    rng = np.random.default_rng(1)
    worst_f = 0.0
    for dim, n in ((2, 16), (3, 12)):
        f = rng.standard_normal((2,) + (n,) * dim)
        worst_f = max(worst_f, np.abs(synthesize_fourier(analyze_fourier(f, dim), dim) - f).max())
    dt = time.perf_counter() - t0
    ok = worst_q <= GLL_TOL and worst_e <= ENDPOINT_TOL and worst_f <= FOURIER_TOL and dt < 10
    record_criterion(1, ok, f"gll={worst_q:.1e} endpoint={worst_e:.1e} fourier={worst_f:.1e} t={dt:.1f}s")
    assert ok


def _dense_operator(tau, nu, B, S, dim):
    K = [B] * dim
    M = K[0]
    for k in K[1:]:
        M = np.kron(M, k)
    A = tau * M
    for a in range(dim):
        mats = [S if b == a else B for b in range(dim)]
        T = mats[0]
        for m in mats[1:]:
            T = np.kron(T, m)
        A = A + nu * T
    return A


def test_c02_galerkin_matches_dense(record_criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for trial in range(20):
        dim = 2 if trial % 2 == 0 else 3
        n = int(rng.integers(3, 7))
        kind = BasisKind.LEGENDRE_DIRICHLET if trial % 4 < 2 else BasisKind.LEGENDRE_NEUMANN
        tau, nu = float(rng.uniform(0.1, 10.0)), float(rng.uniform(0.01, 2.0))
        spec = BasisSpec(kind, n)
        F = rng.standard_normal((n,) * dim)
        a = build_operator(tau, nu, spec, dim).solve(F)
        A = _dense_operator(tau, nu, assemble_mass(spec).entries, assemble_stiffness(spec), dim)
        ref = np.linalg.solve(A, F.ravel()).reshape(F.shape)
        worst = max(worst, np.linalg.norm(a - ref) / np.linalg.norm(ref))
    dt = time.perf_counter() - t0
    ok = worst <= KRON_TOL and dt < 30
    record_criterion(2, ok, f"max rel diff={worst:.1e} over 20 cases t={dt:.1f}s")
    assert ok


def test_c03_helmholtz_spectral_accuracy(record_criterion):
    e8, e16 = sine_helmholtz_error(8), sine_helmholtz_error(16)
    ok = e16 <= HELM_TOL and e8 / e16 >= HELM_RATIO
    record_criterion(3, ok, f"err(N=8)={e8:.2e} err(N=16)={e16:.2e} ratio={e8 / e16:.1e}")
    assert ok


def test_c04_beltrami_exact_solution(record_criterion):
    d = Discretization(3, 24, "periodic")
    c = d.coords()
    rng = np.random.default_rng(4)
    worst_r = worst_d = 0.0
    for k in (1, 2, 3):
        C4, C5 = rng.normal(60, 10, 2)
        bp = BeltramiParams(k=k, C4=C4, C5=C5, nu=0.1)
        for t in (0.0, 0.5):
            vel, p = beltrami_exact(bp, t, c)
            u = d.from_nodal(vel[None])
            dudt = -3 * bp.nu * k * k * u
            res = dudt + d.advection(u) - bp.nu * d.laplacian(u) + d.grad(d.from_nodal(p[None]))
            scale = np.abs(d.to_nodal(dudt)).max() + np.abs(d.to_nodal(d.advection(u))).max()
            worst_r = max(worst_r, np.abs(d.to_nodal(res)).max() / scale)
            grad_scale = np.abs(d.to_nodal(d.grad(u[:, 0]))).max()
            worst_d = max(worst_d, np.abs(d.to_nodal(d.div(u))).max() / grad_scale)
    ok = worst_r <= BELT_RES_TOL and worst_d <= BELT_DIV_TOL
    record_criterion(4, ok, f"momentum residual={worst_r:.1e} divergence={worst_d:.1e} (relative)")
    assert ok


# ---------------------------------------------------------------------------
# 5-7: classical solver
# ---------------------------------------------------------------------------


def test_c05_temporal_order(record_criterion):
    rows = beltrami_temporal([0.04, 0.02, 0.01], n=16, final_time=0.5, nu=0.1)
    dts = np.array([r[0] for r in rows])
    errs = np.array([r[1] for r in rows])
    order = float(np.polyfit(np.log(dts), np.log(errs), 1)[0])
    ok = ORDER_RANGE[0] <= order <= ORDER_RANGE[1]
    record_criterion(5, ok, f"errors={', '.join(f'{e:.2e}' for e in errs)} observed order={order:.2f}")
    assert ok


@pytest.fixture(scope="module")
def beltrami_run():
    cfg = SolverConfig(dt=0.01, steps=100, nu=0.1, n=24, bc="periodic", dim=3)
    sol = PressureCorrectionSolver(cfg)
    batch = gen_beltrami(RandomInputSpec(Family.BELTRAMI_3D, 10.0, seed=6, count=4, mean=60.0, truncate=True))
    t0 = time.perf_counter()
    traj = sol.run(flow_inputs(Family.BELTRAMI_3D, batch, 4))
    elapsed = time.perf_counter() - t0
    ref = batch.velocity(traj.times[-1], sol.disc.coords())
    num = sol.disc.integrate((traj.velocity[-1] - ref) ** 2).sum(-1)
    den = sol.disc.integrate(ref**2).sum(-1)
    return traj, np.sqrt(num / den), elapsed


def test_c06_beltrami_accuracy(beltrami_run, record_criterion):
    _, err, elapsed = beltrami_run
    ok = err.max() <= BELT_ACC_TOL and elapsed < 600
    record_criterion(6, ok, f"Rel.L2_x(T=1) max over 4 samples={err.max():.2e} t={elapsed:.1f}s")
    assert ok


def _small_run(bc, dim, n, family):
    cfg = SolverConfig(dt=0.01, steps=20, nu=0.1, n=n, bc=bc, dim=dim)
    sol = PressureCorrectionSolver(cfg)
    spec = RandomInputSpec(family, 5.0, seed=7, count=2)
    return sol.run(flow_inputs(family, generate(spec), 2)).div_ratio.max()


def test_c07_projection_property(beltrami_run, record_criterion):
    traj, _, _ = beltrami_run
    ratios = {
        "3d-beltrami": traj.div_ratio.max(),
        "2d-forcing": _small_run("dirichlet", 2, 22, Family.FORCING_2D),
        "2d-initial": _small_run("periodic", 2, 32, Family.INITIAL_2D),
        "2d-boundary": _small_run("dirichlet", 2, 30, Family.BOUNDARY_2D),
        "3d-forcing": _small_run("dirichlet", 3, 10, Family.FORCING_3D),
    }
    worst = max(ratios.values())
    ok = worst <= PROJ_TOL
    record_criterion(7, ok, "max weak div ratio " + " ".join(f"{k}={v:.1e}" for k, v in ratios.items()))
    assert ok


# ---------------------------------------------------------------------------
# 8: gradients
# ---------------------------------------------------------------------------


def _toy_case(bc, phase, seed):
    family = Family.FORCING_2D
    cfg = SolverConfig(dt=0.01, steps=2, nu=0.1, n=6, bc=bc, dim=2)
    sol = PressureCorrectionSolver(cfg)
    batch = gen_forcing_2d(RandomInputSpec(family, 5.0, seed=seed, count=2))
    inputs = flow_inputs(family, batch, 2)
    ni = network_inputs(sol, inputs, "forcing")
    tr = SequentialTrainer(sol, inputs, ni, NetConfig(2, 3, 2, 3), TrainSchedule(2, 2), seed)
    st = sol.initial_state(inputs)
    u_prev = sol.stokes_startup(st, sol.forcing_at(inputs, 0.0))
    rng = np.random.default_rng(seed)
    prob, lift = tr._velocity_problem(st.u, u_prev, st.p, 0)
    net = init_convhead(rng, prob.x.shape[1], prob.x.shape[2:], 3, 2, tr.omap_u.size, 2, input_rms(prob.x))
    if phase == "u":
        return net, 1, prob
    ut = tr._velocity(net, 0, prob, lift)
    prob_phi = tr._phi_problem(ut)
    net_phi = init_convhead(rng, 1, prob_phi.x.shape[2:], 3, 2, tr.omap_phi.size, 1, input_rms(prob_phi.x))
    return net_phi, 0, prob_phi


def _fd_check(net, head, prob, rng):
    _, g = loss_and_grad(net, head, prob, True)
    targets = [("kernel", net.kernel, g["kernel"]), ("bias", net.bias, g["bias"])]
    picks = []
    for name, arr, ga in targets:
        picks += [(arr, ga, i) for i in range(arr.size)]
    W, gW = net.heads[head], g["heads"]
    for i in rng.choice(W.size, 20, replace=False):
        picks.append((W, gW, int(i)))
    ana, fd = [], []
    for arr, ga, i in picks:
        flat = arr.reshape(-1)
        old = flat[i]
        flat[i] = old + FD_EPS
        fp, _ = loss_and_grad(net, head, prob, False)
        flat[i] = old - FD_EPS
        fm, _ = loss_and_grad(net, head, prob, False)
        flat[i] = old
        ana.append(ga.reshape(-1)[i])
        fd.append((fp - fm) / (2 * FD_EPS))
    ana, fd = np.array(ana), np.array(fd)
    worst = np.abs(ana - fd).max() / np.abs(fd).max()
    return worst


def test_c08_gradients(record_criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    cases = [(bc, phase) for bc in ("dirichlet", "periodic") for phase in ("u", "phi")]
    worst = {}
    points = 50
    for i in range(points):
        bc, phase = cases[i % len(cases)]
        net, head, prob = _toy_case(bc, phase, i + 1)
        key = f"{bc}/{phase}"
        worst[key] = max(worst.get(key, 0.0), _fd_check(net, head, prob, rng))
    dt = time.perf_counter() - t0
    w = max(worst.values())
    ok = w <= GRAD_TOL and dt < 120
    record_criterion(8, ok, f"{points} points max rel diff={w:.1e} "
                     + " ".join(f"{k}={v:.1e}" for k, v in worst.items()) + f" t={dt:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 9-13: training, generalization, ensembles, scaling, determinism
# ---------------------------------------------------------------------------


def _train_setup(sigma=TRAIN_SIGMA, seed=TRAIN_SEED, count=TRAIN_S):
    cfg = SolverConfig(dt=TRAIN_DT, steps=TRAIN_STEPS, nu=TRAIN_NU, n=TRAIN_N, bc="periodic", dim=2)
    sol = PressureCorrectionSolver(cfg)
    batch = gen_initial_2d(RandomInputSpec(Family.INITIAL_2D, sigma, seed=seed, count=count))
    inputs = flow_inputs(Family.INITIAL_2D, batch, count)
    return sol, inputs, network_inputs(sol, inputs, "initial")


def run_training(out_dir):
    """Train the desk-scale model; write log and error CSVs into ``out_dir``."""
    sol, inputs, ni = _train_setup()
    sch = TrainSchedule(block_size=TRAIN_K, total_steps=TRAIN_STEPS)
    t0 = time.perf_counter()
    res = SequentialTrainer(sol, inputs, ni, NetConfig(3, 9, 3, 9), sch, TRAIN_SEED).train()
    elapsed = time.perf_counter() - t0
    ref = sol.run(inputs)
    rep = rel_errors(sol.disc, ref.times, res.trajectory.velocity, ref.velocity)
    write_csv(out_dir / "training_log.csv", LOG_COLUMNS, res.log)
    write_csv(out_dir / "train_errors.csv", ("time", "rel_l2_x_mean"),
              [(float(t), float(e.mean())) for t, e in zip(rep.times, rep.rel_l2_x)])
    return res, rep, elapsed, sol


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train_a")
    res, rep, elapsed, sol = run_training(out)
    return dict(res=res, rep=rep, elapsed=elapsed, sol=sol, out=out)


def test_c09_desk_scale_training(trained, record_criterion):
    rep, elapsed = trained["rep"], trained["elapsed"]
    e02, e10 = rep.mean_at(0.2), rep.mean_at(1.0)
    ok = rep.mean_rel_l2_tx <= TRAIN_TOL and e10 >= e02 and elapsed <= 1800
    record_criterion(9, ok, f"mean Rel.L2_tx={rep.mean_rel_l2_tx:.2e} Rel.L2_x(0.2)={e02:.2e} "
                     f"Rel.L2_x(1.0)={e10:.2e} train time={elapsed:.0f}s")
    assert ok


def _unseen_error(model, sigma):
    sol, inputs, ni = _train_setup(sigma, TRAIN_SEED + TEST_SEED_OFFSET, TRAIN_S)
    traj = infer(model, sol, inputs, ni)
    ref = sol.run(inputs)
    return rel_errors(sol.disc, ref.times, traj.velocity, ref.velocity).mean_rel_l2_tx


def test_c10_generalization_direction(trained, record_criterion):
    t0 = time.perf_counter()
    model = trained["res"].model
    e5, e9 = _unseen_error(model, 5.0), _unseen_error(model, 9.0)
    dt = time.perf_counter() - t0
    e_train = trained["rep"].mean_rel_l2_tx
    ok = e9 <= GEN_RATIO * e5 and dt <= 300
    record_criterion(10, ok, f"unseen sigma=5: {e5:.2e} unseen sigma=9: {e9:.2e} ratio={e9 / e5:.2f} "
                     f"(sigma=9 / training error = {e9 / e_train:.1e}) t={dt:.0f}s")
    assert ok


ENS_N, ENS_NU, ENS_SIGMA, ENS_COUNT, ENS_SEEDS = 16, 0.1, 1.0, 1000, 5


def run_ensembles(out_dir):
    """Oracle ensembles of the periodic 2D forcing family; CSVs into ``out_dir``."""
    cfg = SolverConfig(dt=0.01, steps=100, nu=ENS_NU, n=ENS_N, bc="periodic", dim=2)
    sol = PressureCorrectionSolver(cfg)
    reports = []
    for seed in range(ENS_SEEDS):
        spec = RandomInputSpec(Family.FORCING_2D, ENS_SIGMA, seed=seed, count=ENS_COUNT)
        traj = sol.run(flow_inputs(Family.FORCING_2D, gen_forcing_2d(spec), ENS_COUNT), record_every=100)
        reports.append(ensemble_stats(sol.disc, traj.velocity[-1]))
    rows = []
    for seed, r in enumerate(reports):
        rows += [(seed, int(s), float(e), r.slope) for s, e in zip(r.conv_sizes, r.conv_errors)]
    write_csv(out_dir / "ensemble_convergence.csv", ("seed", "size", "mean_error", "slope"), rows)
    write_csv(out_dir / "ensemble_moments.csv", ("seed", "size", "skewness", "kurtosis"),
              [(seed, s, r.skewness[s], r.kurtosis[s]) for seed, r in enumerate(reports) for s in r.hist_sizes])
    return reports


@pytest.fixture(scope="module")
def ensembles(tmp_path_factory):
    out = tmp_path_factory.mktemp("ens_a")
    t0 = time.perf_counter()
    reps = run_ensembles(out)
    return dict(reports=reps, out=out, elapsed=time.perf_counter() - t0)


def test_c11_ensemble_statistics(ensembles, record_criterion):
    reps = ensembles["reports"]
    slope = reps[0].slope
    sk100 = float(np.mean([abs(r.skewness[100]) for r in reps]))
    sk1000 = float(np.mean([abs(r.skewness[1000]) for r in reps]))
    degenerate = any(r.degenerate for r in reps)
    ok = (not degenerate and SLOPE_RANGE[0] <= slope <= SLOPE_RANGE[1] and sk1000 < sk100
          and ensembles["elapsed"] <= 1200)
    record_criterion(11, ok, f"oracle periodic forcing: slope={slope:.3f} mean|skew| S=100: {sk100:.3f} "
                     f"S=1000: {sk1000:.3f} t={ensembles['elapsed']:.0f}s")
    assert ok


def test_c12_inference_scaling(trained, record_criterion):
    model = trained["res"].model

    def timed(count, use_model):
        sol, inputs, ni = _train_setup(TRAIN_SIGMA, TRAIN_SEED + TEST_SEED_OFFSET, count)
        t0 = time.perf_counter()
        if use_model:
            infer(model, sol, inputs, ni, record_every=TRAIN_STEPS)
        else:
            sol.run(inputs, record_every=TRAIN_STEPS)
        return time.perf_counter() - t0

    timed(10, True)  # warm caches
    per100 = min(timed(100, True) for _ in range(2)) / 100
    per1000 = min(timed(1000, True) for _ in range(2)) / 1000
    oracle1000 = timed(1000, False) / 1000
    ratio = per1000 / per100
    ok = 1.0 / SCALING_RATIO <= ratio <= SCALING_RATIO
    record_criterion(12, ok, f"per-sample inference S=100: {per100 * 1e3:.2f}ms S=1000: {per1000 * 1e3:.2f}ms "
                     f"ratio={ratio:.2f}; oracle/inference speedup at S=1000 = {oracle1000 / per1000:.2f} (reported)")
    assert ok


def _csv_without(path, drop):
    head, rows = read_csv(path)
    keep = [i for i, h in enumerate(head) if h not in drop]
    return [[head[i] for i in keep]] + [[r[i] for i in keep] for r in rows]


def test_c13_determinism(trained, ensembles, tmp_path_factory, record_criterion):
    out_t = tmp_path_factory.mktemp("train_b")
    run_training(out_t)
    out_e = tmp_path_factory.mktemp("ens_b")
    run_ensembles(out_e)
    same = {}
    for name in ("training_log.csv", "train_errors.csv"):
        same[name] = _csv_without(trained["out"] / name, {"wall_time_ms"}) == _csv_without(out_t / name,
                                                                                             {"wall_time_ms"})
    for name in ("ensemble_convergence.csv", "ensemble_moments.csv"):
        same[name] = (ensembles["out"] / name).read_bytes() == (out_e / name).read_bytes()
    ok = all(same.values())
    record_criterion(13, ok, "identical: " + " ".join(f"{k}={v}" for k, v in same.items())
                     + " (wall_time_ms column excluded)")
    assert ok
