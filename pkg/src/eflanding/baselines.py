"""Comparison methods: vanilla Landing, QR retraction, penalty descent, and
single-node compressed gradient descent without constraints.

Distributed baselines send the full local gradient every round (8 bytes per
entry per node) and aggregate in ascending node order.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import compressors as C
from .engine import TAG_COMPRESS, Divergence, Recorder, RunResult, _diverged_record, initial_point, stream
from .manifold import clip_gradient, landing_direction, penalty_gradient, relative_gradient
from .problems import mean_in_order


class BaselineKind(str, enum.Enum):
    VANILLA_LANDING = "vanilla_landing"
    QR_RETRACTION = "qr_retraction"
    PENALTY = "penalty"
    UNCONSTRAINED_VANILLA_COMPRESSION = "unconstrained_vanilla_compression"


@dataclass(frozen=True)
class Baseline:
    kind: BaselineKind
    penalty_lambda: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", BaselineKind(self.kind))
        is_pen = self.kind is BaselineKind.PENALTY
        if is_pen != (self.penalty_lambda is not None):
            raise ValueError("penalty_lambda is set exactly for the penalty baseline")
        if is_pen and self.penalty_lambda < 0:
            raise ValueError("penalty_lambda must be nonnegative")


def qf(M: np.ndarray) -> np.ndarray:
    """Thin-QR Q factor with a positive diagonal in R."""
    Q, R = np.linalg.qr(M)
    d = np.diag(R)
    scale = max(1.0, float(np.abs(R).max()))
    if np.min(np.abs(d)) <= 1e-14 * scale:
        raise np.linalg.LinAlgError("rank-deficient argument to QR")
    return Q * np.sign(d)


def qr_retraction_step(X: np.ndarray, grad_f: np.ndarray, gamma: float) -> np.ndarray:
    return qf(X - gamma * relative_gradient(X, grad_f))


def penalty_step(X: np.ndarray, grad_f: np.ndarray, lambda_pen: float, gamma: float) -> np.ndarray:
    return X - gamma * (grad_f + lambda_pen * penalty_gradient(X))


def vanilla_landing_step(X, grad_f, gamma, lam, grad_bound):
    return X - gamma * landing_direction(X, clip_gradient(grad_f, grad_bound), lam)


def _mean_gradient(problem, X):
    return mean_in_order([problem.node_gradient(i, X) for i in range(problem.num_nodes)])


def run_baseline(
    problem,
    baseline: Baseline | BaselineKind | str,
    gamma: float,
    K: int,
    seed: int,
    *,
    lam: float = 1.0,
    grad_bound: float = 1e8,
    X0=None,
    decay=(),
    metrics_every: int = 1,
    cc_reference=None,
    keep_iterates: bool = False,
) -> RunResult:
    """Run a distributed baseline for K iterations with exact gradients."""
    if not isinstance(baseline, Baseline):
        kind = BaselineKind(baseline)
        baseline = Baseline(kind, 8.0 if kind is BaselineKind.PENALTY else None)
    if X0 is None:
        X0 = initial_point(*problem.shape, seed)
    X = X0.copy()
    d = X.size
    rec = Recorder(problem, metrics_every, cc_reference)
    iterates = [X.copy()] if keep_iterates else None
    decay = sorted(decay)

    def step_size(k):
        g = gamma
        for start, val in decay:
            if k >= start:
                g = val
        return g

    round_bytes = 8 * d * problem.num_nodes
    bytes_up = round_bytes
    rec.record(0, X, bytes_up)
    diverged = False
    k = 0
    try:
        for k in range(K):
            G = _mean_gradient(problem, X)
            g = step_size(k)
            if baseline.kind is BaselineKind.VANILLA_LANDING:
                X = vanilla_landing_step(X, G, g, lam, grad_bound)
            elif baseline.kind is BaselineKind.QR_RETRACTION:
                X = qr_retraction_step(X, G, g)
            elif baseline.kind is BaselineKind.PENALTY:
                X = penalty_step(X, G, baseline.penalty_lambda, g)
            else:
                raise ValueError(f"{baseline.kind.value} is not a distributed manifold baseline")
            if not np.all(np.isfinite(X)):
                raise Divergence("non-finite iterate")
            bytes_up += round_bytes
            if keep_iterates:
                iterates.append(X.copy())
            if rec.due(k + 1, K):
                r = rec.record(k + 1, X, bytes_up)
                if rec.diverging(r):
                    r.diverged = diverged = True
                    break
    except (Divergence, np.linalg.LinAlgError, FloatingPointError):
        diverged = True
        rec.records.append(_diverged_record(k, bytes_up, rec))
    return RunResult(rec.records, X, diverged, iterates=iterates)


@dataclass
class UnconstrainedTrace:
    xs: list[np.ndarray]
    grad_sq: np.ndarray
    values: np.ndarray


def unconstrained_vanilla_compression(f_oracle, x0, spec: C.CompressorSpec, gamma: float, K: int, seed: int = 0):
    """``x <- x - gamma * C(grad f(x))`` on a single node.

    ``f_oracle(x)`` returns ``(f(x), grad f(x))``.  The trace holds
    ``||grad f(x^k)||^2`` and ``f(x^k)`` for k = 0..K-1 plus the final point.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    xs, gsq, vals = [x.copy()], [], []
    for k in range(K):
        fx, g = f_oracle(x)
        vals.append(fx)
        gsq.append(float(np.sum(g * g)))
        c = C.compress(spec, g, stream(seed, TAG_COMPRESS, 0, k)).logical
        x = x - gamma * c
        xs.append(x.copy())
    return UnconstrainedTrace(xs, np.array(gsq), np.array(vals))


def compressed_gd_bound(f0_gap: float, gamma: float, alpha: float, K: int) -> float:
    """Upper bound on the mean squared gradient norm of compressed descent."""
    return 2.0 * f0_gap / (gamma * alpha * K)


def quadratic_oracle(x):
    return 0.5 * float(x @ x), x.copy()


def divergence_detected(result: RunResult) -> bool:
    return result.diverged or any(not math.isfinite(r.loss_gap) for r in result.records)
