"""Run configuration: a flat TOML table with validated keys.

Every key has a default, so an empty file is a valid configuration for the
desk-scale PCA experiment.  ``"auto"`` and ``"estimate"`` placeholders are
resolved by the harness before the run and echoed into the output header.
"""

from __future__ import annotations

import enum
import sys
from dataclasses import dataclass, field, fields, replace
from typing import Any

from . import compressors as C

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

AUTO = "auto"
ESTIMATE = "estimate"


class ConfigError(ValueError):
    pass


class Experiment(str, enum.Enum):
    PCA_DETERMINISTIC = "pca_deterministic"
    PCA_STOCHASTIC = "pca_stochastic"
    BLOCK_TOY = "block_toy"
    COUNTEREXAMPLE = "counterexample"
    UNCONSTRAINED_BASELINE = "unconstrained_baseline"


class Algorithm(str, enum.Enum):
    EF_LANDING = "ef_landing"
    VANILLA_LANDING = "vanilla_landing"
    QR_RETRACTION = "qr_retraction"
    PENALTY = "penalty"


@dataclass(frozen=True)
class RunConfig:
    experiment: Experiment = Experiment.PCA_DETERMINISTIC
    algorithm: Algorithm = Algorithm.EF_LANDING
    # compressor
    compressor: C.Kind = C.Kind.TOPK
    compression_ratio: float | None = 0.1
    compress_k: int | None = None
    qsgd_levels: int = 1
    seed_policy: C.SeedPolicy = C.SeedPolicy.TRANSMIT_INDICES
    error_feedback: bool = True
    # schedule
    gamma: float | str = AUTO
    eta: float | str = AUTO
    lam: float = 1.0
    epsilon: float = 0.5
    grad_bound: float | str = ESTIMATE
    merit_smooth: float | str = ESTIMATE
    mu: float | str = AUTO
    decay: tuple[tuple[int, float], ...] = ()
    theory_mode: bool = False
    penalty_lambda: float = 8.0
    # problem
    n: int = 100
    p: int = 5
    l: int = 200
    N: int = 4
    sigma_data: float = 0.1
    sigma_noise: float = 0.0
    noise: str = "additive_gaussian"
    batch_size: int | None = None
    blocks: tuple[tuple[int, int], ...] = ((30, 3), (30, 3))
    free_dim: int = 10
    data_seed: int = 0
    # run
    K: int = 600
    seed: int = 0
    metrics_every: int = 1
    extended_metrics: bool = False
    output: str = "metrics.csv"
    threads: int = 1

    def problem_dim(self) -> int:
        """Entries of one uplink vector, used to turn a ratio into a count."""
        if self.experiment is Experiment.BLOCK_TOY:
            return sum(n * p for n, p in self.blocks) + self.free_dim
        if self.experiment is Experiment.COUNTEREXAMPLE:
            return 2
        if self.experiment is Experiment.UNCONSTRAINED_BASELINE:
            return self.n
        return self.n * self.p

    def compressor_spec(self) -> C.CompressorSpec:
        kind = self.compressor
        if kind is C.Kind.IDENTITY:
            return C.IDENTITY
        if kind in (C.Kind.QSGD, C.Kind.QSGD_SCALED):
            return C.qsgd(self.qsgd_levels, scaled=kind is C.Kind.QSGD_SCALED)
        k = self.compress_k if self.compress_k is not None else C.k_from_ratio(self.compression_ratio, self.problem_dim())
        if kind is C.Kind.TOPK:
            return C.topk(k)
        return C.randk(k, self.seed_policy)

    def echo(self) -> list[tuple[str, Any]]:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append((f.name, v.value if isinstance(v, enum.Enum) else v))
        return out


_FIELDS = {f.name: f for f in fields(RunConfig)}
_ENUMS = {"experiment": Experiment, "algorithm": Algorithm, "compressor": C.Kind, "seed_policy": C.SeedPolicy}
_PLACEHOLDER = {"gamma": AUTO, "eta": AUTO, "mu": AUTO, "grad_bound": ESTIMATE, "merit_smooth": ESTIMATE}
_INTS = {"compress_k", "qsgd_levels", "n", "p", "l", "N", "batch_size", "free_dim", "data_seed", "K", "seed", "metrics_every", "threads"}
_FLOATS = {"compression_ratio", "lam", "epsilon", "penalty_lambda", "sigma_data", "sigma_noise"}
_BOOLS = {"error_feedback", "theory_mode", "extended_metrics"}
_OPTIONAL = {"compression_ratio", "compress_k", "batch_size"}


def _coerce(key: str, value: Any) -> Any:
    if key in _ENUMS:
        try:
            return _ENUMS[key](value)
        except ValueError:
            choices = ", ".join(e.value for e in _ENUMS[key])
            raise ConfigError(f"key '{key}': {value!r} is not one of {choices}") from None
    if key in _OPTIONAL and value in ("none", None):
        return None
    if key in _PLACEHOLDER:
        if value == _PLACEHOLDER[key]:
            return value
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"key '{key}': expected a number or \"{_PLACEHOLDER[key]}\", got {value!r}")
        return float(value)
    if key in _BOOLS:
        if not isinstance(value, bool):
            raise ConfigError(f"key '{key}': expected true or false, got {value!r}")
        return value
    if key in _INTS:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"key '{key}': expected an integer, got {value!r}")
        return value
    if key in _FLOATS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"key '{key}': expected a number, got {value!r}")
        return float(value)
    if key == "decay":
        try:
            return tuple((int(s), float(g)) for s, g in value)
        except (TypeError, ValueError):
            raise ConfigError("key 'decay': expected a list of [step, gamma] pairs") from None
    if key == "blocks":
        try:
            return tuple((int(a), int(b)) for a, b in value)
        except (TypeError, ValueError):
            raise ConfigError("key 'blocks': expected a list of [n, p] pairs") from None
    if not isinstance(value, str):
        raise ConfigError(f"key '{key}': expected a string, got {value!r}")
    return value


def _validate(cfg: RunConfig) -> None:
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    need(cfg.lam > 0, "lam must be positive")
    need(0 < cfg.epsilon < 0.75, "epsilon must lie in (0, 0.75)")
    need(cfg.K >= 0, "K must be >= 0")
    need(cfg.metrics_every >= 1, "metrics_every must be >= 1")
    need(cfg.threads >= 1, "threads must be >= 1")
    need(cfg.n >= 1 and 1 <= cfg.p <= cfg.n, "need 1 <= p <= n")
    need(cfg.l >= 1 and cfg.N >= 1, "l and N must be positive")
    need(cfg.sigma_data >= 0 and cfg.sigma_noise >= 0, "noise levels must be nonnegative")
    need(cfg.penalty_lambda >= 0, "penalty_lambda must be nonnegative")
    need(cfg.noise in ("additive_gaussian", "minibatch"), "noise must be additive_gaussian or minibatch")
    need(cfg.noise != "minibatch" or (cfg.batch_size or 0) >= 1, "minibatch noise needs batch_size >= 1")
    need(cfg.free_dim >= 0, "free_dim must be >= 0")
    for n, p in cfg.blocks:
        need(1 <= p <= n, f"block ({n}, {p}) must satisfy 1 <= p <= n")
    for name in ("gamma", "eta", "mu", "grad_bound", "merit_smooth"):
        v = getattr(cfg, name)
        need(isinstance(v, str) or v > 0, f"{name} must be positive")
    need(isinstance(cfg.eta, str) or cfg.eta <= 1.0, "eta must lie in (0, 1]")
    for step, g in cfg.decay:
        need(step >= 0 and g > 0, "decay entries need step >= 0 and gamma > 0")
    if cfg.compressor in (C.Kind.TOPK, C.Kind.RANDK):
        d = cfg.problem_dim()
        if cfg.compress_k is not None:
            need(1 <= cfg.compress_k <= d, f"compress_k={cfg.compress_k} must lie in [1, {d}] (entries of the uplink vector)")
        else:
            need(cfg.compression_ratio is not None, "set compression_ratio or compress_k")
            need(0 < cfg.compression_ratio <= 1, "compression_ratio must lie in (0, 1]")
    if cfg.compressor in (C.Kind.QSGD, C.Kind.QSGD_SCALED):
        need(cfg.qsgd_levels >= 1, "qsgd_levels must be >= 1")
    if cfg.experiment is Experiment.PCA_STOCHASTIC:
        need(cfg.algorithm is Algorithm.EF_LANDING, "pca_stochastic runs ef_landing only")
    if cfg.experiment in (Experiment.BLOCK_TOY, Experiment.COUNTEREXAMPLE):
        need(cfg.algorithm is Algorithm.EF_LANDING, f"{cfg.experiment.value} runs ef_landing only")
    auto_ok = cfg.experiment in (Experiment.PCA_DETERMINISTIC, Experiment.PCA_STOCHASTIC) and cfg.algorithm in (
        Algorithm.EF_LANDING,
        Algorithm.VANILLA_LANDING,
    )
    need(auto_ok or cfg.gamma != AUTO, f"gamma = \"auto\" is not available for {cfg.experiment.value}/{cfg.algorithm.value}; give a number")
    try:
        cfg.compressor_spec().validate_for(cfg.problem_dim())
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def build_config(values: dict[str, Any], base: RunConfig | None = None) -> RunConfig:
    """Apply ``values`` on top of ``base`` (defaults when omitted) and validate."""
    updates = {}
    for key, value in values.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown key '{key}'")
        updates[key] = _coerce(key, value)
    cfg = replace(base or RunConfig(), **updates)
    _validate(cfg)
    return cfg


def parse_config(text: str) -> RunConfig:
    try:
        table = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error: {exc}") from None
    for key, value in table.items():
        if isinstance(value, dict):
            raise ConfigError(f"key '{key}': nested tables are not allowed; the config is flat")
    return build_config(table)


def load_config(path: str) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def config_keys() -> list[str]:
    return list(_FIELDS)


@dataclass
class Resolved:
    """Values derived before a run; echoed after the config keys."""

    entries: dict[str, Any] = field(default_factory=dict)

    def set(self, key: str, value: Any) -> None:
        self.entries[key] = value
