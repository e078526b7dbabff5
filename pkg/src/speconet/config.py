"""
Run configuration: a flat table of dotted keys with typed defaults.

Config files are plain ``key=value`` lines; ``#`` starts a comment. Keys
not in :data:`SCHEMA` are errors. Presets fill in the per-problem values and
the file, then command-line flags, override them.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .lbfgs import LbfgsOptions
from .problems import Family, RandomInputSpec
from .solver import SolverConfig
from .trainer import NetConfig, TrainSchedule


class ConfigError(ValueError):
    """Unknown key, bad value or inconsistent configuration."""


def _bool(s):
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s):
    if isinstance(s, (list, tuple)):
        return [int(v) for v in s]
    return [int(v) for v in str(s).split(",") if v.strip()]


def _floats(s):
    if isinstance(s, (list, tuple)):
        return [float(v) for v in s]
    return [float(v) for v in str(s).split(",") if v.strip()]


# key -> (parser, default)
SCHEMA = {
    "preset": (str, "2d-initial"),
    "seed": (int, 0),
    "threads": (int, 1),
    "problem.family": (str, "initial2d"),
    "problem.sigma": (float, 5.0),
    "problem.mean": (float, 0.0),
    "problem.truncate": (_bool, False),
    "problem.count": (int, 8),
    "problem.test_sigma": (float, 9.0),
    "problem.test_count": (int, 8),
    "solver.dim": (int, 2),
    "solver.n": (int, 32),
    "solver.bc": (str, "periodic"),
    "solver.nu": (float, 0.01),
    "solver.dt": (float, 0.01),
    "solver.steps": (int, 100),
    "solver.dealias": (_bool, False),
    "net.filters_u": (int, 3),
    "net.kernel_u": (int, 9),
    "net.filters_phi": (int, 3),
    "net.kernel_phi": (int, 9),
    "net.share_phi_conv": (_bool, False),
    "train.block_size": (int, 10),
    "train.freeze_conv_after_first": (_bool, True),
    "train.divergence_factor": (float, 10.0),
    "train.lbfgs.history_size": (int, 10),
    "train.lbfgs.max_iter": (int, 500),
    "train.lbfgs.grad_tol": (float, 1e-8),
    "train.lbfgs.plateau_tol": (float, 1e-6),
    "train.lbfgs.plateau_window": (int, 20),
    "train.lbfgs.c1": (float, 1e-4),
    "train.lbfgs.c2": (float, 0.9),
    "train.lbfgs.max_bracket": (int, 25),
    "ensemble.source": (str, "oracle"),
    "ensemble.count": (int, 1000),
    "ensemble.sigma": (float, 1.0),
    "ensemble.sizes": (_ints, [10, 20, 50, 100, 200]),
    "ensemble.hist_sizes": (_ints, [100, 500, 1000]),
    "ensemble.timing_sizes": (_ints, [100, 1000]),
    "convergence.dts": (_floats, [0.04, 0.02, 0.01, 0.005]),
    "convergence.ns": (_ints, [8, 12, 16, 20, 24]),
    "convergence.final_time": (float, 0.5),
    "paths.out": (str, "out"),
    "paths.checkpoint": (str, ""),
}

_COMMON = {"solver.dt": 0.01, "solver.steps": 100}

PRESETS = {
    "2d-forcing": {
        "problem.family": "forcing2d", "problem.sigma": 5.0, "problem.test_sigma": 10.0,
        "solver.dim": 2, "solver.n": 22, "solver.bc": "dirichlet", "solver.nu": 0.1,
        "net.filters_u": 10, "net.kernel_u": 9, "net.filters_phi": 10, "net.kernel_phi": 9,
        "ensemble.sigma": 1.0,
    },
    "2d-initial": {
        "problem.family": "initial2d", "problem.sigma": 5.0, "problem.test_sigma": 9.0,
        "solver.dim": 2, "solver.n": 32, "solver.bc": "periodic", "solver.nu": 0.01,
        "net.filters_u": 3, "net.kernel_u": 9, "net.filters_phi": 3, "net.kernel_phi": 9,
    },
    "2d-boundary": {
        "problem.family": "boundary2d", "problem.sigma": 5.0, "problem.test_sigma": 10.0,
        "solver.dim": 2, "solver.n": 62, "solver.bc": "dirichlet", "solver.nu": 0.5,
        "net.filters_u": 30, "net.kernel_u": 15, "net.filters_phi": 3, "net.kernel_phi": 15,
    },
    "3d-beltrami": {
        "problem.family": "beltrami3d", "problem.sigma": 10.0, "problem.mean": 60.0,
        "problem.truncate": True, "problem.test_sigma": 20.0,
        "solver.dim": 3, "solver.n": 24, "solver.bc": "periodic", "solver.nu": 0.1,
        "net.filters_u": 2, "net.kernel_u": 19, "net.filters_phi": 2, "net.kernel_phi": 19,
    },
    "3d-forcing": {
        "problem.family": "forcing3d", "problem.sigma": 5.0, "problem.test_sigma": 10.0,
        "solver.dim": 3, "solver.n": 18, "solver.bc": "dirichlet", "solver.nu": 1.0,
        "net.filters_u": 3, "net.kernel_u": 9, "net.filters_phi": 3, "net.kernel_phi": 9,
    },
}

# which network input each family feeds the velocity network
NET_INPUT_KIND = {
    Family.FORCING_2D: "forcing",
    Family.PERTURBED_FORCING_2D: "forcing",
    Family.FORCING_3D: "forcing",
    Family.INITIAL_2D: "initial",
    Family.BELTRAMI_3D: "initial",
    Family.BOUNDARY_2D: "boundary",
}


def parse_value(key: str, raw):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key: {key}")
    parser = SCHEMA[key][0]
    try:
        return parser(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc


def parse_text(text: str) -> dict:
    """Parse key=value lines into a dict of typed values."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        out[key] = parse_value(key, raw)
    return out


def load_file(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_text(text)


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    @classmethod
    def build(cls, preset: str | None = None, overrides: dict | None = None) -> "RunConfig":
        """Defaults, then the preset, then ``overrides``; validated."""
        overrides = dict(overrides or {})
        for k, v in overrides.items():
            overrides[k] = parse_value(k, v)
        name = preset or overrides.get("preset") or SCHEMA["preset"][1]
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
        vals = {k: d for k, (_, d) in SCHEMA.items()}
        vals.update(_COMMON)
        vals.update(PRESETS[name])
        vals["preset"] = name
        vals.update({k: v for k, v in overrides.items() if k != "preset"})
        cfg = cls(vals)
        cfg.validate()
        return cfg

    def __getitem__(self, key):
        return self.values[key]

    def validate(self):
        v = self.values
        try:
            self.family
        except ValueError as exc:
            raise ConfigError(f"bad value for problem.family: {v['problem.family']!r}") from exc
        if v["solver.bc"] not in ("dirichlet", "periodic"):
            raise ConfigError(f"bad value for solver.bc: {v['solver.bc']!r}")
        if v["solver.dim"] not in (2, 3):
            raise ConfigError("solver.dim must be 2 or 3")
        if v["solver.bc"] == "periodic" and v["solver.n"] % 2:
            raise ConfigError("solver.n must be even for periodic runs")
        if v["solver.dealias"] and v["solver.bc"] != "periodic":
            raise ConfigError("solver.dealias requires solver.bc=periodic")
        for k in ("solver.n", "solver.steps", "problem.count", "train.block_size", "threads",
                  "train.lbfgs.max_iter", "net.filters_u", "net.filters_phi"):
            if v[k] < 1:
                raise ConfigError(f"{k} must be positive")
        for k in ("solver.dt", "problem.sigma", "problem.test_sigma", "ensemble.sigma"):
            if v[k] <= 0:
                raise ConfigError(f"{k} must be positive")
        if v["solver.nu"] <= 0:
            raise ConfigError("solver.nu must be positive")
        if v["ensemble.source"] not in ("oracle", "model"):
            raise ConfigError("ensemble.source must be oracle or model")
        if not 0 < v["train.lbfgs.c1"] < v["train.lbfgs.c2"] < 1:
            raise ConfigError("need 0 < train.lbfgs.c1 < train.lbfgs.c2 < 1")
        fam = self.family
        want = {Family.BELTRAMI_3D: (3, "periodic"), Family.INITIAL_2D: (2, "periodic"),
                Family.FORCING_3D: (3, None), Family.BOUNDARY_2D: (2, "dirichlet"),
                Family.FORCING_2D: (2, None), Family.PERTURBED_FORCING_2D: (2, None)}[fam]
        if v["solver.dim"] != want[0] or (want[1] and v["solver.bc"] != want[1]):
            raise ConfigError(f"problem.family={fam.value} needs dim={want[0]}"
                              + (f" and bc={want[1]}" if want[1] else ""))

    # -- typed views -------------------------------------------------------
    @property
    def family(self) -> Family:
        return Family(self.values["problem.family"])

    @property
    def net_input_kind(self) -> str:
        return NET_INPUT_KIND[self.family]

    def solver_config(self, **kw) -> SolverConfig:
        v = self.values
        args = dict(dt=v["solver.dt"], steps=v["solver.steps"], nu=v["solver.nu"], n=v["solver.n"],
                    bc=v["solver.bc"], dim=v["solver.dim"], dealias=v["solver.dealias"])
        args.update(kw)
        return SolverConfig(**args)

    def input_spec(self, sigma: float | None = None, count: int | None = None,
                   seed: int | None = None) -> RandomInputSpec:
        v = self.values
        return RandomInputSpec(self.family, v["problem.sigma"] if sigma is None else sigma,
                               v["seed"] if seed is None else seed,
                               v["problem.count"] if count is None else count,
                               v["problem.mean"], v["problem.truncate"])

    def lbfgs(self) -> LbfgsOptions:
        v = self.values
        return LbfgsOptions(
            history_size=v["train.lbfgs.history_size"], max_iterations=v["train.lbfgs.max_iter"],
            gradient_tolerance=v["train.lbfgs.grad_tol"], plateau_tolerance=v["train.lbfgs.plateau_tol"],
            plateau_window=v["train.lbfgs.plateau_window"], c1=v["train.lbfgs.c1"], c2=v["train.lbfgs.c2"],
            max_bracket=v["train.lbfgs.max_bracket"],
        )

    def schedule(self) -> TrainSchedule:
        v = self.values
        return TrainSchedule(block_size=v["train.block_size"], total_steps=v["solver.steps"],
                             freeze_conv_after_first=v["train.freeze_conv_after_first"],
                             lbfgs=self.lbfgs(), divergence_factor=v["train.divergence_factor"])

    def net(self) -> NetConfig:
        v = self.values
        return NetConfig(v["net.filters_u"], v["net.kernel_u"], v["net.filters_phi"], v["net.kernel_phi"],
                         v["net.share_phi_conv"])

    def echo(self) -> dict:
        """JSON-friendly copy for file headers."""
        return {k: (list(x) if isinstance(x, (list, tuple)) else x) for k, x in sorted(self.values.items())}
