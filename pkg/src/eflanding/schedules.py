"""Step-size and momentum rules, and the Lyapunov diagnostic."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .diagnostics import error_terms
from .manifold import MeritParams, SafeRegionParams, merit_value, safe_step_size

VALID_CASES = {(1.0, 0.0), (0.0, 1.0), (2.0, 2.0)}


class Mode(str, enum.Enum):
    DETERMINISTIC = "deterministic"
    STOCHASTIC = "stochastic"


@dataclass(frozen=True)
class ScheduleParams:
    gamma: float
    eta: float = 1.0
    lam: float = 1.0
    mode: Mode = Mode.DETERMINISTIC
    c1: float = 1.0
    c2: float = 0.0
    theta: float = 1.0
    beta: float = 0.0
    decay: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "decay", tuple(sorted((int(s), float(g)) for s, g in self.decay)))
        if self.gamma <= 0:
            raise ValueError("step size must be positive")
        if not 0.0 < self.eta <= 1.0:
            raise ValueError("momentum eta must lie in (0, 1]")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if (float(self.c1), float(self.c2)) not in VALID_CASES:
            raise ValueError(f"(c1, c2) = ({self.c1}, {self.c2}) is not one of {sorted(VALID_CASES)}")
        for _, g in self.decay:
            if g <= 0:
                raise ValueError("decayed step sizes must be positive")

    def gamma_at(self, k: int) -> float:
        """Piecewise-constant step: the last decay entry with ``step <= k`` wins."""
        gamma = self.gamma
        for start, g in self.decay:
            if k >= start:
                gamma = g
        return gamma


def lyapunov_case(alpha: float, eta: float, sigma: float) -> tuple[float, float]:
    """Lyapunov weights (c1, c2): no noise or momentum, no compression, or the general case."""
    if eta == 1.0 and sigma == 0.0:
        return 1.0, 0.0
    if alpha == 1.0:
        return 0.0, 1.0
    return 2.0, 2.0


def schedule_deterministic(
    safe: SafeRegionParams, merit: MeritParams, theta: float, beta: float
) -> ScheduleParams:
    """Constant step for eta = 1, sigma = 0: ``min(gamma_s, gamma_1, gamma_2)``."""
    lam, eps = safe.lam, safe.epsilon
    mu, Lt, Lm = merit.mu, merit.avg_smooth_L, merit.merit_smooth_Lm
    a = 2 * beta * Lt**2 / theta
    k = lam**2 * (1 + eps)
    g1 = 1.0 / (2 * math.sqrt(a) + 2 * Lm)
    g2 = 1.0 / (2 * math.sqrt(2 * k * a / mu) + 4 * k * Lm / mu)
    gamma = min(safe_step_size(safe), g1, g2)
    return ScheduleParams(gamma, 1.0, lam, Mode.DETERMINISTIC, 1.0, 0.0, theta, beta)


def alpha_from_theta(theta: float) -> float:
    return 1.0 - (1.0 - theta) ** 2


@dataclass(frozen=True)
class StochasticConstants:
    c1: float
    c2: float
    C1_gamma: float
    C2_gamma: float


def stochastic_constants(
    safe: SafeRegionParams, merit: MeritParams, theta: float, beta: float
) -> StochasticConstants:
    lam, eps = safe.lam, safe.epsilon
    mu, L, Lt, Lm = merit.mu, merit.smooth_L, merit.avg_smooth_L, merit.merit_smooth_Lm
    k = lam**2 * (1 + eps)
    base = 1.0 / safe_step_size(safe) + 6 * Lm + 12 * k * Lm / mu
    if theta == 1.0:
        # exact compression: c1 = 0, c2 = 1
        return StochasticConstants(0.0, 1.0, base, 6 * math.sqrt(2) * L + 12 * L * math.sqrt(k / mu))
    C1 = base + 12 * Lt * math.sqrt(beta / theta) + 12 * Lt * math.sqrt(2 * k * beta / (mu * theta))
    C2 = 12 * L + 12 * L * math.sqrt(2 * k / mu)
    return StochasticConstants(2.0, 2.0, C1, C2)


def stochastic_eta(
    consts: StochasticConstants, theta: float, beta: float, N: int, K: int, sigma: float, L0: float
) -> float:
    alpha = alpha_from_theta(theta)
    s2 = sigma**2
    C2 = consts.C2_gamma
    if consts.c1 == 0.0:
        return min(1.0, math.sqrt(C2 * N * L0 / (s2 * K)))
    terms = [math.sqrt(C2 * N * L0 / (2 * s2 * K)), 1.0]
    if alpha < 1.0:
        terms.append((theta * C2 * L0 / (2 * (1 - alpha) * s2 * K)) ** (1 / 3))
    if beta > 0.0:
        terms.append((theta * C2 * L0 / (4 * beta * s2 * K)) ** 0.25)
    return min(terms)


def stochastic_gamma_terms(
    safe: SafeRegionParams, merit: MeritParams, theta: float, beta: float, eta: float, c1: float, c2: float
) -> list[float]:
    """The seven candidates of the momentum step-size rule (inf where a term drops out)."""
    lam, eps = safe.lam, safe.epsilon
    mu, L, Lt, Lm = merit.mu, merit.smooth_L, merit.avg_smooth_L, merit.merit_smooth_Lm
    k = lam**2 * (1 + eps)
    inf = math.inf

    def guarded(num_ok, value):
        return value() if num_ok else inf

    return [
        safe_step_size(safe),
        guarded(c1 > 0 and beta > 0, lambda: math.sqrt(theta / (2 * c1 * beta)) / (6 * Lt)),
        guarded(c2 > 0, lambda: eta / (6 * L * math.sqrt(2 * c2))),
        1.0 / (6 * Lm),
        guarded(c1 > 0 and beta > 0, lambda: math.sqrt(mu * theta / (c1 * k * beta)) / (12 * Lt)),
        guarded(c2 > 0, lambda: eta / (12 * L) * math.sqrt(mu / (c2 * k))),
        mu / (12 * k * Lm),
    ]


def schedule_stochastic(
    safe: SafeRegionParams,
    merit: MeritParams,
    theta: float,
    beta: float,
    N: int,
    K: int,
    sigma: float,
    L0: float,
    eta: float | None = None,
) -> ScheduleParams:
    """Momentum schedule for noisy gradients.

    ``eta`` is derived from the constants unless given; the step size is the
    minimum of :func:`stochastic_gamma_terms` at that ``eta``.
    """
    if sigma <= 0:
        raise ValueError("stochastic schedule needs sigma > 0; use schedule_deterministic")
    if K < 1 or N < 1:
        raise ValueError("need K >= 1 and N >= 1")
    consts = stochastic_constants(safe, merit, theta, beta)
    if eta is None:
        eta = stochastic_eta(consts, theta, beta, N, K, sigma, max(L0, 0.0))
        eta = max(eta, np.finfo(float).tiny)
    gamma = min(stochastic_gamma_terms(safe, merit, theta, beta, eta, consts.c1, consts.c2))
    return ScheduleParams(gamma, eta, safe.lam, Mode.STOCHASTIC, consts.c1, consts.c2, theta, beta)


@dataclass(frozen=True)
class LyapunovSetup:
    merit: MeritParams
    m_star: float


def lyapunov_value(
    node_states, X, exact_grads, setup: LyapunovSetup, schedule: ScheduleParams, *, f_at_X: float, grad_f_at_X
) -> float:
    """Merit gap plus weighted compression and momentum errors."""
    if schedule.eta == 0:
        raise ValueError("eta must be nonzero")
    G_t, P_t, P = error_terms(node_states, exact_grads)
    if hasattr(X, "blocks"):
        m = _block_merit(X, grad_f_at_X, f_at_X, setup.merit.mu)
    else:
        m = merit_value(X, grad_f_at_X, f_at_X, setup.merit.mu)
    s = schedule
    g = s.gamma
    value = m - setup.m_star
    if s.c1:
        value += s.c1 * g / s.theta * G_t + 2 * s.c1 * g * s.eta * s.beta / s.theta * P_t
    if s.c2:
        value += s.c2 * g / s.eta * P
    return value


def _block_merit(P, G, f_val, mu):
    total = f_val
    for X, g in zip(P.blocks, G.blocks):
        total += merit_value(X, g, 0.0, mu)
    return total


def initial_lyapunov_estimate(
    merit_gap: float, schedule: ScheduleParams, alpha: float, mean_sq_grad: float, sigma: float, N: int
) -> float:
    """Expected Lyapunov value at the first iterate.

    At the start ``v_i`` is one noisy gradient, so ``P_tilde = sigma^2``,
    ``P = sigma^2 / N`` and the compression error is at most
    ``(1 - alpha) E||v_i||^2``.
    """
    s = schedule
    g_err = (1.0 - alpha) * (mean_sq_grad + sigma**2)
    value = merit_gap
    if s.c1:
        value += s.c1 * s.gamma / s.theta * g_err + 2 * s.c1 * s.gamma * s.eta * s.beta / s.theta * sigma**2
    if s.c2:
        value += s.c2 * s.gamma / s.eta * sigma**2 / N
    return value


def schedule_stochastic_two_pass(
    safe: SafeRegionParams,
    merit: MeritParams,
    theta: float,
    beta: float,
    N: int,
    K: int,
    sigma: float,
    merit_gap: float,
    mean_sq_grad: float,
) -> tuple[ScheduleParams, float]:
    """Resolve the Lyapunov start value and the schedule together.

    The first pass uses the merit gap alone; the second adds the error terms
    weighted by the first-pass step and momentum.  Returns (schedule, L0).
    """
    first = schedule_stochastic(safe, merit, theta, beta, N, K, sigma, merit_gap)
    L0 = initial_lyapunov_estimate(merit_gap, first, alpha_from_theta(theta), mean_sq_grad, sigma, N)
    return schedule_stochastic(safe, merit, theta, beta, N, K, sigma, L0), L0
