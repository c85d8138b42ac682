"""Experiment orchestration: build the problem, resolve the schedule, run,
and write the metrics CSV."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import compressors as C
from .baselines import Baseline, BaselineKind, quadratic_oracle, run_baseline, unconstrained_vanilla_compression
from .config import AUTO, ESTIMATE, Algorithm, ConfigError, Experiment, RunConfig
from .diagnostics import BASE_COLUMNS, EXTRA_COLUMNS, MetricsRecord
from .engine import TAG_INIT, RunResult, initial_point, run_blockwise, run_ef_landing, stream
from .manifold import (
    SafeRegionParams,
    estimate_merit_smoothness,
    make_merit_params,
    merit_value,
    mu_lower_bound,
)
from .problems import (
    NoisyOracle,
    PcaProblem,
    counterexample_problem,
    gen_block_toy,
    gen_pca_data,
    load_dataset,
    read_dataset_header,
    save_dataset,
)
from .schedules import (
    LyapunovSetup,
    Mode,
    ScheduleParams,
    schedule_deterministic,
    schedule_stochastic_two_pass,
    lyapunov_case,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_DIVERGED = 3
# stream tag for the merit-smoothness estimator, disjoint from the run tags
TAG_ESTIMATE = 4


@dataclass
class Prepared:
    """Everything a run needs once placeholders are resolved."""

    config: RunConfig
    problem: Any
    spec: C.CompressorSpec
    schedule: ScheduleParams | None
    grad_bound: float
    resolved: dict[str, Any] = field(default_factory=dict)
    oracle: Any = None
    X0: Any = None
    safe: SafeRegionParams | None = None
    lyapunov: LyapunovSetup | None = None
    cc_reference: np.ndarray | None = None


def build_problem(cfg: RunConfig, dataset: str | Path | None = None):
    if cfg.experiment in (Experiment.PCA_DETERMINISTIC, Experiment.PCA_STOCHASTIC):
        if dataset is not None:
            check_dataset(dataset, cfg)
            return load_dataset(dataset)
        return gen_pca_data(cfg.n, cfg.l, cfg.p, cfg.sigma_data, cfg.N, cfg.data_seed)
    if dataset is not None:
        raise ConfigError(f"{cfg.experiment.value} does not read a dataset file")
    if cfg.experiment is Experiment.BLOCK_TOY:
        return gen_block_toy(len(cfg.blocks), list(cfg.blocks), cfg.data_seed, cfg.free_dim, cfg.N)
    if cfg.experiment is Experiment.COUNTEREXAMPLE:
        return counterexample_problem()
    return None


def check_dataset(path: str | Path, cfg: RunConfig) -> None:
    hdr = read_dataset_header(path)
    want = {"n": cfg.n, "p": cfg.p, "N": cfg.N, "l_total": cfg.l * cfg.N, "seed": cfg.data_seed}
    bad = [f"{k}: file has {hdr[k]}, config has {v}" for k, v in want.items() if hdr[k] != v]
    if bad:
        raise ConfigError(f"dataset header does not match the config ({'; '.join(bad)})")


def pca_constants(problem: PcaProblem, cfg: RunConfig, grad_bound: float, need_Lm: bool) -> dict[str, float]:
    """Smoothness constants, mu and (optionally) the merit smoothness."""
    L, Lt = problem.smoothness()
    out = {"L": L, "L_tilde": Lt}
    out["mu"] = mu_lower_bound(L, grad_bound, cfg.lam, cfg.epsilon) if cfg.mu == AUTO else cfg.mu
    if cfg.merit_smooth != ESTIMATE:
        out["merit_smooth"] = cfg.merit_smooth
    elif need_Lm:
        rng = stream(cfg.data_seed, TAG_ESTIMATE)
        out["merit_smooth"] = estimate_merit_smoothness(
            cfg.n, cfg.p, cfg.epsilon, problem.gradient, problem.hess_vec, out["mu"], rng
        )
    return out


def prepare(cfg: RunConfig, dataset: str | Path | None = None) -> Prepared:
    problem = build_problem(cfg, dataset)
    spec = cfg.compressor_spec()
    if cfg.experiment in (Experiment.PCA_DETERMINISTIC, Experiment.PCA_STOCHASTIC):
        return _prepare_pca(cfg, problem, spec)
    if cfg.experiment is Experiment.BLOCK_TOY:
        gb = math.inf if cfg.grad_bound == ESTIMATE else cfg.grad_bound
        sched = ScheduleParams(cfg.gamma, _eta(cfg), cfg.lam, decay=cfg.decay, **_case(spec, cfg, cfg.problem_dim()))
        return Prepared(cfg, problem, spec, sched, gb, {"grad_bound": gb})
    if cfg.experiment is Experiment.COUNTEREXAMPLE:
        gb = float(np.linalg.norm(problem.c)) if cfg.grad_bound == ESTIMATE else cfg.grad_bound
        sched = ScheduleParams(cfg.gamma, _eta(cfg), cfg.lam, decay=cfg.decay, **_case(spec, cfg, 2))
        X0 = np.array([[1.0], [0.0]])
        return Prepared(cfg, problem, spec, sched, gb, {"grad_bound": gb}, X0=X0, cc_reference=problem.X_star)
    return Prepared(cfg, None, spec, None, math.inf, {"alpha": C.contractive_factor(spec, (cfg.n,))})


def _eta(cfg: RunConfig) -> float:
    return 1.0 if cfg.eta == AUTO else cfg.eta


def _case(spec, cfg, d) -> dict[str, float]:
    alpha = C.contractive_factor(spec, (d,))
    theta, beta = C.theta_beta(alpha)
    sigma = cfg.sigma_noise if cfg.experiment is Experiment.PCA_STOCHASTIC else 0.0
    c1, c2 = lyapunov_case(alpha, _eta(cfg), sigma)
    return {"c1": c1, "c2": c2, "theta": theta, "beta": beta}


def _prepare_pca(cfg: RunConfig, problem: PcaProblem, spec: C.CompressorSpec) -> Prepared:
    stochastic = cfg.experiment is Experiment.PCA_STOCHASTIC and cfg.sigma_noise > 0
    oracle = None
    bound_source = problem
    if cfg.experiment is Experiment.PCA_STOCHASTIC:
        orc = NoisyOracle(problem, cfg.sigma_noise, cfg.noise, cfg.batch_size)
        oracle, bound_source = orc.sample, orc
    gb = bound_source.gradient_bound(cfg.epsilon) if cfg.grad_bound == ESTIMATE else cfg.grad_bound

    if cfg.algorithm is Algorithm.EF_LANDING:
        alpha = C.contractive_factor(spec, problem.shape)
    else:
        alpha = 1.0
    theta, beta = C.theta_beta(alpha)
    need_Lm = (cfg.gamma == AUTO) or (stochastic and cfg.eta == AUTO) or cfg.extended_metrics
    consts = pca_constants(problem, cfg, gb, need_Lm)
    resolved = {"grad_bound": gb, "alpha": alpha, "theta": theta, "beta": beta, **consts}

    safe = SafeRegionParams(cfg.epsilon, cfg.lam, gb)
    merit = None
    if "merit_smooth" in consts:
        try:
            merit = make_merit_params(safe, consts["L"], consts["L_tilde"], consts["merit_smooth"], consts["mu"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    X0 = initial_point(cfg.n, cfg.p, cfg.seed)

    schedule = None
    if cfg.algorithm in (Algorithm.EF_LANDING, Algorithm.VANILLA_LANDING):
        if stochastic and merit is not None:
            gap = merit_value(X0, problem.gradient(X0), problem.value(X0), merit.mu) - problem.f_star
            sq = [float(np.sum(problem.node_gradient(i, X0) ** 2)) for i in range(problem.num_nodes)]
            auto, L0 = schedule_stochastic_two_pass(
                safe, merit, theta, beta, problem.num_nodes, max(cfg.K, 1), cfg.sigma_noise, gap, float(np.mean(sq))
            )
            resolved["lyapunov_initial"] = L0
        elif merit is not None:
            auto = schedule_deterministic(safe, merit, theta, beta)
        else:
            auto = None
        gamma = auto.gamma if cfg.gamma == AUTO else cfg.gamma
        eta = (auto.eta if auto is not None else 1.0) if cfg.eta == AUTO else cfg.eta
        c1, c2 = lyapunov_case(alpha, eta, cfg.sigma_noise if stochastic else 0.0)
        mode = Mode.STOCHASTIC if stochastic else Mode.DETERMINISTIC
        schedule = ScheduleParams(gamma, eta, cfg.lam, mode, c1, c2, theta, beta, cfg.decay)
        resolved.update(gamma=gamma, eta=eta, c1=c1, c2=c2)
    else:
        resolved["gamma"] = cfg.gamma

    lyap = None
    if cfg.extended_metrics and cfg.algorithm is Algorithm.EF_LANDING:
        lyap = LyapunovSetup(merit, problem.f_star)
    return Prepared(cfg, problem, spec, schedule, gb, resolved, oracle, X0, safe, lyap, problem.X_star)


def execute(prep: Prepared) -> RunResult:
    cfg = prep.config
    cc = prep.cc_reference if cfg.extended_metrics else None
    if cfg.experiment is Experiment.UNCONSTRAINED_BASELINE:
        return _run_unconstrained(cfg, prep.spec)
    if cfg.experiment is Experiment.BLOCK_TOY:
        return run_blockwise(
            prep.problem, prep.spec, prep.schedule, cfg.K, cfg.seed, grad_bound=prep.grad_bound,
            error_feedback=cfg.error_feedback, metrics_every=cfg.metrics_every, threads=cfg.threads,
        )
    if cfg.algorithm is Algorithm.EF_LANDING:
        return run_ef_landing(
            prep.problem, prep.spec, prep.schedule, cfg.K, cfg.seed, grad_bound=prep.grad_bound,
            oracle=prep.oracle, X0=prep.X0, error_feedback=cfg.error_feedback, safe=prep.safe,
            theory_mode=cfg.theory_mode, metrics_every=cfg.metrics_every, cc_reference=cc,
            lyapunov=prep.lyapunov, threads=cfg.threads,
        )
    kind = {
        Algorithm.VANILLA_LANDING: BaselineKind.VANILLA_LANDING,
        Algorithm.QR_RETRACTION: BaselineKind.QR_RETRACTION,
        Algorithm.PENALTY: BaselineKind.PENALTY,
    }[cfg.algorithm]
    baseline = Baseline(kind, cfg.penalty_lambda if kind is BaselineKind.PENALTY else None)
    gamma = prep.schedule.gamma if prep.schedule is not None else cfg.gamma
    return run_baseline(
        prep.problem, baseline, gamma, cfg.K, cfg.seed, lam=cfg.lam, grad_bound=prep.grad_bound,
        X0=prep.X0, decay=cfg.decay, metrics_every=cfg.metrics_every, cc_reference=cc,
    )


def _run_unconstrained(cfg: RunConfig, spec: C.CompressorSpec) -> RunResult:
    """Compressed descent on ``1/2 ||x||^2`` from a seeded point with f(x0) = 1."""
    start = time.perf_counter()
    x0 = stream(cfg.seed, TAG_INIT).standard_normal(cfg.n)
    x0 *= math.sqrt(2.0) / np.linalg.norm(x0)
    trace = unconstrained_vanilla_compression(quadratic_oracle, x0, spec, cfg.gamma, cfg.K, cfg.seed)
    per_msg = C.message_bytes(spec, cfg.n)
    records = []
    for k, x in enumerate(trace.xs):
        if k % cfg.metrics_every and k != cfg.K:
            continue
        fx = 0.5 * float(x @ x)
        wall = (time.perf_counter() - start) * 1e3
        records.append(MetricsRecord(k, fx, 0.0, 2.0 * fx, per_msg * (k + 1), wall))
    diverged = not all(math.isfinite(r.loss_gap) for r in records)
    return RunResult(records, trace.xs[-1], diverged)


def _fmt(v) -> str:
    if v is None:
        return "nan"
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return str(v)


def _echo_value(v) -> str:
    if isinstance(v, tuple):
        return "[" + ", ".join(_echo_value(x) for x in v) + "]"
    if isinstance(v, str):
        return f'"{v}"'
    return _fmt(v)


def write_metrics(path: str | Path, prep: Prepared, result: RunResult, extra_header=()) -> None:
    cols = BASE_COLUMNS + (EXTRA_COLUMNS if prep.config.extended_metrics else ())
    lines = ["# eflanding metrics"]
    lines += [f"# {k} = {_echo_value(v)}" for k, v in prep.config.echo()]
    lines += [f"# resolved.{k} = {_echo_value(v)}" for k, v in prep.resolved.items()]
    lines += [f"# {h}" for h in extra_header]
    lines.append(f"# diverged = {_fmt(result.diverged)}")
    lines.append(",".join(cols))
    for r in result.records:
        lines.append(",".join(_fmt(v) for v in r.values(prep.config.extended_metrics)))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def run(cfg: RunConfig, dataset: str | Path | None = None, output: str | Path | None = None) -> int:
    """Run one configuration and write its CSV; returns the process exit status."""
    prep = prepare(cfg, dataset)
    if cfg.K == 0:
        result = RunResult([], prep.X0, False)
    else:
        result = execute(prep)
    extra = [f"dataset = {Path(dataset).name}"] if dataset is not None else []
    write_metrics(output or cfg.output, prep, result, extra)
    if result.diverged:
        log.error("run diverged; metrics written to %s", output or cfg.output)
        return EXIT_DIVERGED
    return EXIT_OK


def replay(dataset: str | Path, cfg: RunConfig, output: str | Path | None = None) -> int:
    """Re-run a configuration on a saved PCA dataset."""
    if cfg.experiment not in (Experiment.PCA_DETERMINISTIC, Experiment.PCA_STOCHASTIC):
        raise ConfigError("replay needs a PCA experiment")
    return run(cfg, dataset=dataset, output=output)


def gen_data(cfg: RunConfig, path: str | Path) -> PcaProblem:
    problem = gen_pca_data(cfg.n, cfg.l, cfg.p, cfg.sigma_data, cfg.N, cfg.data_seed)
    save_dataset(problem, path)
    return problem


def estimate(cfg: RunConfig, dataset: str | Path | None = None) -> dict[str, float]:
    """Gradient bound, smoothness constants, mu and merit smoothness for a PCA config."""
    if cfg.experiment not in (Experiment.PCA_DETERMINISTIC, Experiment.PCA_STOCHASTIC):
        raise ConfigError("estimate supports the PCA experiments")
    problem = build_problem(cfg, dataset)
    source = problem
    if cfg.experiment is Experiment.PCA_STOCHASTIC:
        source = NoisyOracle(problem, cfg.sigma_noise, cfg.noise, cfg.batch_size)
    gb = source.gradient_bound(cfg.epsilon) if cfg.grad_bound == ESTIMATE else cfg.grad_bound
    out = {"grad_bound": gb}
    out.update(pca_constants(problem, replace(cfg, merit_smooth=ESTIMATE), gb, need_Lm=True))
    return out


def seed_output(path: str, seed: int) -> str:
    p = Path(path)
    return str(p.with_name(f"{p.stem}.seed{seed}{p.suffix}"))


def read_metrics(path: str | Path) -> tuple[list[str], list[str], list[list[str]]]:
    """(header comments, column names, rows as strings) of a metrics CSV."""
    comments, cols, rows = [], [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("#"):
            comments.append(line)
        elif not cols:
            cols = line.split(",")
        else:
            rows.append(line.split(","))
    return comments, cols, rows
