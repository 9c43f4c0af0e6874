"""Run configuration: layered resolution of defaults, presets, files and flags."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .field_sampler import CovarianceSpec
from .mlmc_estimator import EstimatorConfig
from .optimizer import OptimizerConfig
from .problem import FULL_CONTROL, PRESETS, FieldFunction, ProblemSpec, Reaction

OUT_ENV = "MLMCOPT_OUT"
FULL_SCALE = ("problem1", "problem2", "problem3")


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class RunConfig:
    # problem
    alpha: float = 1e-6
    gamma: float = 1.0
    sigma2: float = 0.1
    corr_length: float = 0.3
    n_kl: int = 500
    m0: int = 8
    L_bar: int = 3
    dim: int = 2
    reaction: str = "none"
    target_value: float = 1.0
    target_lo: float = 0.25
    target_hi: float = 0.75
    transfer_boundary: str = "dirichlet"
    # optimizer
    method: str = "ncg"
    tau: float = 1e-3
    q: float = 1.0
    eta: float = 0.2
    eps0: float = 1e-2
    k_max: int = 200
    s_init: float = 1.0
    # estimator
    n_init: int = 20
    theta_split: float = 0.5
    variance_floor: float = 0.5
    sampler: str = "chain"
    stopping: str = "inf"
    cost_model: str = "dof"
    truncation: str = "tensor"
    # harness
    seed: int = 0
    workers: int = 1
    out: str = "mlmcopt-out"
    post_eps: float = 1e-2
    post_max: int = 4000
    timing: bool = True
    preset: str = ""

    def problem(self) -> ProblemSpec:
        cov = None
        if self.sigma2 > 0:
            cov = CovarianceSpec(self.sigma2, self.corr_length, self.dim, self.n_kl)
        target = FieldFunction("box", self.target_value, self.target_lo, self.target_hi, 0.0)
        return ProblemSpec(
            alpha=self.alpha,
            gamma=self.gamma,
            target=target,
            beta=FULL_CONTROL,
            covariance=cov,
            m0=self.m0,
            L_bar=self.L_bar,
            reaction=Reaction() if self.reaction == "exp" else None,
            dim=self.dim,
            transfer_boundary=self.transfer_boundary,
        )

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(tau=self.tau, q=self.q, eta=self.eta, eps0=self.eps0, k_max=self.k_max,
                               s_init=self.s_init)

    def estimator(self) -> EstimatorConfig:
        return EstimatorConfig(n_init=self.n_init, theta_split=self.theta_split,
                               variance_floor=self.variance_floor, sampler=self.sampler,
                               stopping=self.stopping, cost_model=self.cost_model,
                               truncation=self.truncation)

    def to_dict(self) -> dict:
        return asdict(self)

    def header(self) -> dict:
        """Entries written as comment lines at the top of every output CSV."""
        return {"preset": self.preset or "none", "method": self.method, "seed": self.seed,
                "tau": repr(self.tau), "config": json.dumps(self.to_dict(), sort_keys=True)}


KEYS = {f.name: f.type for f in fields(RunConfig)}
CHOICES = {
    "reaction": ("none", "exp"),
    "method": ("ncg", "newton"),
    "sampler": ("chain", "twoset"),
    "stopping": ("inf", "split"),
    "cost_model": ("dof", "measured"),
    "truncation": ("tensor", "certified"),
    "transfer_boundary": ("constant", "dirichlet"),
}
# (lower, upper, lower inclusive)
RANGES = {
    "alpha": (0.0, math.inf, False),
    "gamma": (0.0, math.inf, True),
    "sigma2": (0.0, math.inf, True),
    "corr_length": (0.0, math.inf, False),
    "n_kl": (1, math.inf, True),
    "m0": (1, math.inf, True),
    "L_bar": (0, 12, True),
    "dim": (1, 2, True),
    "target_lo": (0.0, 1.0, True),
    "target_hi": (0.0, 1.0, True),
    "tau": (0.0, math.inf, False),
    "q": (0.0, math.inf, False),
    "eta": (0.0, 1.0, False),
    "eps0": (0.0, math.inf, False),
    "k_max": (1, math.inf, True),
    "s_init": (0.0, math.inf, False),
    "n_init": (2, math.inf, True),
    "theta_split": (0.0, 1.0, False),
    "variance_floor": (0.0, 1.0, True),
    "seed": (0, 2**63 - 1, True),
    "workers": (1, 4096, True),
    "post_eps": (0.0, math.inf, False),
    "post_max": (2, math.inf, True),
}


def preset_values(name: str) -> dict:
    """Flat RunConfig entries for a named preset."""
    if name not in PRESETS:
        raise ConfigError("preset", f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    p = PRESETS[name]
    pb = p.problem
    cov = pb.covariance
    out = {
        "alpha": pb.alpha,
        "gamma": pb.gamma,
        "sigma2": cov.sigma2 if cov else 0.0,
        "m0": pb.m0,
        "L_bar": pb.L_bar,
        "dim": pb.dim,
        "reaction": "exp" if pb.reaction else "none",
        "target_value": pb.target.value,
        "target_lo": pb.target.lo,
        "target_hi": pb.target.hi,
        "transfer_boundary": pb.transfer_boundary,
        "tau": p.tau,
        "preset": name,
    }
    if cov:
        out.update(corr_length=cov.lam, n_kl=cov.n_kl)
    return out


def load_file(path) -> dict:
    """Read a JSON or TOML config file into a flat dict."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError("config", f"no such file {str(path)!r}")
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".toml":
        import tomli

        try:
            data = tomli.loads(text)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError("config", f"cannot parse {path}: {exc}") from None
    else:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"cannot parse {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config", "top level must be a table of key/value pairs")
    return data


def _coerce(key: str, value):
    if key not in KEYS:
        raise ConfigError(key, "unknown key")
    kind = KEYS[key]
    try:
        if kind == "bool":
            if isinstance(value, str):
                low = value.strip().lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return low in ("true", "1", "yes")
            return bool(value)
        if kind == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            if isinstance(value, bool):
                raise ValueError(value)
            return int(value)
        if kind == "float":
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(key, f"expected {kind}, got {value!r}") from None


def _check(cfg: RunConfig) -> None:
    for key, allowed in CHOICES.items():
        if getattr(cfg, key) not in allowed:
            raise ConfigError(key, f"must be one of {allowed}, got {getattr(cfg, key)!r}")
    for key, (lo, hi, closed) in RANGES.items():
        v = getattr(cfg, key)
        ok = (v >= lo if closed else v > lo) and v <= hi and not (isinstance(v, float) and math.isnan(v))
        if not ok:
            bracket = "[" if closed else "("
            raise ConfigError(key, f"value {v!r} outside {bracket}{lo}, {hi}]")
    if cfg.target_lo > cfg.target_hi:
        raise ConfigError("target_lo", "must not exceed target_hi")
    if not cfg.out:
        raise ConfigError("out", "empty output directory")


def parse_config(preset: str | None = None, path=None, overrides: dict | None = None,
                 env: dict | None = None) -> RunConfig:
    """Resolve ``defaults <- preset <- file <- overrides``.

    The output directory default comes from ``MLMCOPT_OUT`` when set. A file
    may itself name a ``preset``; an explicit ``preset`` argument wins.
    """
    env = os.environ if env is None else env
    values: dict = {}
    if env.get(OUT_ENV):
        values["out"] = env[OUT_ENV]
    file_values = {k: _coerce(k, v) for k, v in load_file(path).items()} if path else {}
    name = preset or file_values.get("preset") or (overrides or {}).get("preset")
    if name:
        values.update(preset_values(name))
    values.update(file_values)
    values.update({k: _coerce(k, v) for k, v in (overrides or {}).items()})
    if name:
        values["preset"] = name
    cfg = replace(RunConfig(), **values)
    _check(cfg)
    return cfg


def parse_assignment(text: str) -> tuple:
    """``key=value`` from the command line."""
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(text, "expected key=value")
    return key.strip(), value.strip()
