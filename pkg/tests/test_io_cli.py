import numpy as np
import pytest

from speconet.basis import BasisKind
from speconet.cli import main
from speconet.config import ConfigError, RunConfig, parse_text
from speconet.io import (
    DataIntegrityError,
    FieldFile,
    read_checkpoint,
    read_csv,
    read_field,
    write_checkpoint,
    write_csv,
    write_field,
)
from speconet.network import init_convhead
from speconet.trainer import BlockParams, NetConfig, SpecONetModel

SMALL = ["--set", "solver.n=8", "--set", "solver.steps=2", "--set", "problem.count=2",
         "--set", "problem.test_count=2", "--set", "train.block_size=2",
         "--set", "net.kernel_u=3", "--set", "net.kernel_phi=3",
         "--set", "train.lbfgs.max_iter=20"]


@pytest.mark.parametrize("dtype", [float, complex])
def test_field_round_trip_is_bitwise(tmp_path, dtype):
    rng = np.random.default_rng(0)
    data = rng.standard_normal((2, 4, 5)).astype(dtype)
    if dtype is complex:
        data += 1j * rng.standard_normal(data.shape)
    kinds = (BasisKind.FOURIER, BasisKind.LEGENDRE_DIRICHLET)
    write_field(tmp_path / "f.spfd", FieldFile(kinds, data, 0.25))
    back = read_field(tmp_path / "f.spfd")
    assert back.kinds == kinds and back.time == 0.25
    assert back.data.dtype == data.dtype
    assert back.data.tobytes() == data.tobytes()


def test_truncated_or_foreign_field_file(tmp_path):
    p = tmp_path / "f.spfd"
    write_field(p, FieldFile((BasisKind.FOURIER,), np.ones((1, 4))))
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(DataIntegrityError):
        read_field(p)
    p.write_bytes(b"JUNKJUNKJUNK")
    with pytest.raises(DataIntegrityError):
        read_field(p)


def _model():
    rng = np.random.default_rng(1)
    net_u = init_convhead(rng, 2, (6, 6), 3, 2, 12, 2, 0.5)
    phi = [init_convhead(rng, 1, (6, 6), 3, 2, 7, 1, 0.25) for _ in range(2)]
    return SpecONetModel(NetConfig(2, 3, 2, 3), [BlockParams([0, 1], net_u, phi)], 5, {"note": "x"})


def test_checkpoint_round_trip(tmp_path):
    m = _model()
    write_checkpoint(tmp_path / "m.spon", m, {"solver.n": 8}, "prng-name")
    back, header = read_checkpoint(tmp_path / "m.spon")
    assert header["config"] == {"solver.n": 8} and header["prng"] == "prng-name"
    assert back.net == m.net and back.seed == 5 and back.meta == m.meta
    a, b = m.blocks[0], back.blocks[0]
    assert b.steps == a.steps and b.net_u.input_scale == 0.5
    for x, y in [(a.net_u.kernel, b.net_u.kernel), (a.net_u.heads, b.net_u.heads),
                 (a.net_phi[1].heads, b.net_phi[1].heads)]:
        assert x.tobytes() == y.tobytes()


def test_checkpoint_corruption_detected(tmp_path):
    p = tmp_path / "m.spon"
    write_checkpoint(p, _model())
    raw = bytearray(p.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(DataIntegrityError, match="checksum"):
        read_checkpoint(p)


def test_csv_format(tmp_path):
    write_csv(tmp_path / "t.csv", ("a", "b"), [(1, 0.1), (np.int64(2), np.float64(1e-20))])
    raw = (tmp_path / "t.csv").read_bytes()
    assert raw == b"a,b\n1,0.1\n2,1e-20\n"
    assert read_csv(tmp_path / "t.csv") == (["a", "b"], [["1", "0.1"], ["2", "1e-20"]])


def test_config_parsing_and_validation():
    vals = parse_text("# comment\nsolver.n = 12  # trailing\nsolver.dealias=yes\nensemble.sizes=10,20\n")
    assert vals == {"solver.n": 12, "solver.dealias": True, "ensemble.sizes": [10, 20]}
    with pytest.raises(ConfigError, match="solver.bogus"):
        parse_text("solver.bogus=1")
    with pytest.raises(ConfigError, match="solver.n"):
        parse_text("solver.n=abc")
    with pytest.raises(ConfigError):
        RunConfig.build("2d-initial", {"solver.bc": "dirichlet"})
    with pytest.raises(ConfigError):
        RunConfig.build("2d-initial", {"solver.n": 9})
    cfg = RunConfig.build("3d-beltrami", {"seed": "4"})
    assert cfg["seed"] == 4 and cfg["solver.dim"] == 3 and cfg.net_input_kind == "initial"


def test_cli_bad_key_exit_2(tmp_path, capsys):
    assert main(["solve", "--out", str(tmp_path), "--set", "solver.nope=1"]) == 2
    assert "solver.nope" in capsys.readouterr().err


def test_cli_config_file(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("preset=3d-beltrami\nsolver.n=6\nsolver.steps=2\nproblem.count=1\n")
    assert main(["solve", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    head, rows = read_csv(tmp_path / "o" / "diagnostics.csv")
    assert head[:2] == ["time", "div_ratio"] and len(rows) == 3
    assert main(["solve", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path)]) == 2


def test_cli_missing_checkpoint_exit_2(tmp_path):
    assert main(["infer", "--out", str(tmp_path), "--set", f"paths.checkpoint={tmp_path / 'none.spon'}"]) == 2


def test_cli_train_infer_and_corrupt_checkpoint(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--preset", "2d-initial", "--out", str(out), *SMALL]) == 0
    head, rows = read_csv(out / "training_log.csv")
    assert head == ["block", "step", "phase", "iteration", "loss", "grad_norm", "wall_time_ms"] and rows
    ckpt = out / "model.spon"
    # the checkpoint carries the discretization; a conflicting override is ignored
    assert main(["infer", "--out", str(out), "--set", f"paths.checkpoint={ckpt}",
                 "--set", "solver.n=16"]) == 0
    _, rows = read_csv(out / "prediction" / "manifest.csv")
    assert len(rows) == 8 * 3  # default test_count, steps 0..2
    f = read_field(out / rows[0][3])
    assert f.data.shape == (2, 8, 8)
    raw = bytearray(ckpt.read_bytes())
    raw[-20] ^= 1
    ckpt.write_bytes(bytes(raw))
    assert main(["infer", "--out", str(out), "--set", f"paths.checkpoint={ckpt}"]) == 3


def test_cli_ensemble_sizes_sorted(tmp_path):
    args = ["ensemble", "--preset", "2d-forcing", "--out", str(tmp_path),
            "--set", "solver.n=6", "--set", "solver.steps=2", "--set", "ensemble.count=40",
            "--set", "ensemble.sizes=20,5,10", "--set", "ensemble.hist_sizes=40,20",
            "--set", "ensemble.timing_sizes=4"]
    assert main(args) == 0
    _, rows = read_csv(tmp_path / "ensemble_convergence.csv")
    assert [r[0] for r in rows] == ["5", "10", "20"]
    _, rows = read_csv(tmp_path / "ensemble_moments.csv")
    assert [r[0] for r in rows] == ["20", "40"]


def test_cli_ensemble_too_few_samples(tmp_path):
    assert main(["ensemble", "--out", str(tmp_path), "--set", "ensemble.count=50"]) == 2


def test_cli_convergence_header(tmp_path):
    args = ["convergence", "--out", str(tmp_path), "--set", "convergence.dts=0.1,0.05",
            "--set", "convergence.ns=6,8", "--set", "convergence.final_time=0.2"]
    assert main(args) == 0
    head, rows = read_csv(tmp_path / "convergence_time.csv")
    assert head == ["dt", "rel_l2_error", "observed_order"] and len(rows) == 2
    head, rows = read_csv(tmp_path / "convergence_space.csv")
    assert head == ["n", "max_error"] and [r[0] for r in rows] == ["6", "8"]
