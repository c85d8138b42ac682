"""Dense Stiefel geometry used by the landing iterations.

All functions accept a single ``(n, p)`` matrix or a stack ``(..., n, p)``;
transposes act on the last two axes so batched trajectories can share the
same code path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np


def _t(M: np.ndarray) -> np.ndarray:
    return np.swapaxes(M, -1, -2)


def _check_square(M: np.ndarray) -> None:
    if M.ndim < 2 or M.shape[-1] != M.shape[-2]:
        raise ValueError(f"expected a square matrix, got shape {M.shape}")


def _check_same_shape(X: np.ndarray, g: np.ndarray) -> None:
    if X.shape != g.shape:
        raise ValueError(f"shape mismatch: X{X.shape} vs g{g.shape}")


def sym(M: np.ndarray) -> np.ndarray:
    _check_square(M)
    return 0.5 * (M + _t(M))


def skew(M: np.ndarray) -> np.ndarray:
    _check_square(M)
    return 0.5 * (M - _t(M))


def gram_deviation(X: np.ndarray) -> np.ndarray:
    """``X^T X - I_p`` (batched)."""
    p = X.shape[-1]
    return _t(X) @ X - np.eye(p)


def penalty_value(X: np.ndarray) -> float:
    """Quarter squared Frobenius distance of the Gram matrix to the identity."""
    D = gram_deviation(X)
    return 0.25 * float(np.sum(D * D))


def penalty_gradient(X: np.ndarray) -> np.ndarray:
    return X @ gram_deviation(X)


def relative_gradient(X: np.ndarray, g: np.ndarray) -> np.ndarray:
    """``skew(g X^T) X``; the canonical-metric Riemannian gradient when g = grad f.

    Evaluated as ``(g (X^T X) - X (g^T X)) / 2`` so no n-by-n product is formed.
    """
    _check_same_shape(X, g)
    return 0.5 * (g @ (_t(X) @ X) - X @ (_t(g) @ X))


def landing_direction(X: np.ndarray, g: np.ndarray, lam: float) -> np.ndarray:
    if lam <= 0:
        raise ValueError("lambda must be positive")
    return relative_gradient(X, g) + lam * penalty_gradient(X)


def gram_spectral_norm(X: np.ndarray) -> np.ndarray | float:
    """Spectral norm of ``X^T X - I``; an array for stacked input."""
    ev = np.linalg.eigvalsh(gram_deviation(X))
    out = np.max(np.abs(ev), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def in_safe_region(X: np.ndarray, epsilon: float, slack: float = 0.0) -> bool:
    """True when the Gram deviation has spectral norm at most ``epsilon``.

    ``slack`` widens the test for round-off only; it defaults to zero.
    """
    if not 0.0 < epsilon < 0.75:
        raise ValueError("epsilon must lie in (0, 3/4)")
    return bool(np.all(gram_spectral_norm(X) <= epsilon + slack))


def singular_value_bounds(X: np.ndarray) -> tuple[float, float]:
    s = np.linalg.svd(X, compute_uv=False)
    return float(s.min()), float(s.max())


@dataclass(frozen=True)
class SafeRegionParams:
    epsilon: float
    lam: float
    grad_bound: float

    def __post_init__(self):
        if not 0.0 < self.epsilon < 0.75:
            raise ValueError(f"epsilon must lie in (0, 3/4), got {self.epsilon}")
        if self.lam <= 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if self.grad_bound <= 0:
            raise ValueError(f"gradient bound L' must be positive, got {self.grad_bound}")


def safe_step_size(params: SafeRegionParams) -> float:
    """Largest constant step keeping every landing update inside the safe region."""
    eps, lam, Lp = params.epsilon, params.lam, params.grad_bound
    a2 = (1 + eps) ** 2 * Lp**2
    t1 = lam * (1 - eps) * eps / (a2 + lam**2 * (1 + eps) * eps**2)
    t2 = math.sqrt(eps / (2 * a2))
    t3 = 1.0 / (2 * lam)
    return min(t1, t2, t3)


def mu_lower_bound(L: float, L_prime: float, lam: float, epsilon: float) -> float:
    if epsilon >= 0.75:
        raise ValueError("epsilon must be < 3/4")
    L_hat = max(L, L_prime)
    inner = L * (1 - epsilon) + 3 * math.sqrt(1 + epsilon) * L_prime + 2 * L_hat**2 * (1 + epsilon) / lam
    return 2.0 / (3 - 4 * epsilon) * inner


@dataclass(frozen=True)
class MeritParams:
    mu: float
    smooth_L: float
    avg_smooth_L: float
    merit_smooth_Lm: float

    def __post_init__(self):
        for name in ("mu", "smooth_L", "avg_smooth_L", "merit_smooth_Lm"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def check_against(self, safe: SafeRegionParams) -> None:
        """Raise if ``mu`` is below the bound required for the descent inequality."""
        bound = mu_lower_bound(self.smooth_L, safe.grad_bound, safe.lam, safe.epsilon)
        if self.mu < bound:
            raise ValueError(f"mu={self.mu} is below the required lower bound {bound}")


def make_merit_params(
    safe: SafeRegionParams,
    smooth_L: float,
    avg_smooth_L: float,
    merit_smooth_Lm: float,
    mu: float | None = None,
) -> MeritParams:
    """Build validated merit parameters; ``mu`` defaults to its lower bound."""
    if mu is None:
        mu = mu_lower_bound(smooth_L, safe.grad_bound, safe.lam, safe.epsilon)
    merit = MeritParams(mu, smooth_L, avg_smooth_L, merit_smooth_Lm)
    merit.check_against(safe)
    return merit


def merit_value(X: np.ndarray, grad_f_at_X: np.ndarray, f_at_X: float, mu: float) -> float:
    D = gram_deviation(X)
    h = 0.5 * float(np.sum(sym(_t(X) @ grad_f_at_X) * D))
    return f_at_X - h + mu * 0.25 * float(np.sum(D * D))


def merit_gradient(
    X: np.ndarray,
    grad_f_at_X: np.ndarray,
    hess_vec: Callable[[np.ndarray], np.ndarray],
    mu: float,
) -> np.ndarray:
    """Closed-form gradient of the merit function.

    ``hess_vec(Z)`` must return the Hessian of f at X applied to Z.
    """
    D = gram_deviation(X)
    G = grad_f_at_X
    jac_adj = hess_vec(X @ D) + G @ D
    return G - 0.5 * jac_adj - X @ sym(_t(X) @ G) + mu * (X @ D)


def clip_gradient(g: np.ndarray, L_prime: float) -> np.ndarray:
    if L_prime <= 0:
        raise ValueError("L' must be positive")
    nrm = float(np.linalg.norm(g))
    if nrm <= L_prime:
        return g
    return (L_prime / nrm) * g


def random_safe_point(
    n: int, p: int, epsilon: float, rng: np.random.Generator, size: tuple[int, ...] = ()
) -> np.ndarray:
    """Random matrix whose singular values are uniform in [sqrt(1-eps), sqrt(1+eps)]."""
    U, _ = np.linalg.qr(rng.standard_normal(size + (n, p)))
    V, _ = np.linalg.qr(rng.standard_normal(size + (p, p)))
    s = np.sqrt(rng.uniform(1 - epsilon, 1 + epsilon, size=size + (p,)))
    return (U * s[..., None, :]) @ _t(V)


def estimate_merit_smoothness(
    n: int,
    p: int,
    epsilon: float,
    grad_f: Callable[[np.ndarray], np.ndarray],
    hess_vec: Callable[[np.ndarray, np.ndarray], np.ndarray],
    mu: float,
    rng: np.random.Generator,
    pairs: int = 1000,
) -> float:
    """Empirical Lipschitz constant of the merit gradient over the safe region.

    Half of the pairs are independent draws, half are close neighbours; the
    latter probe the local constant that independent pairs tend to miss.
    """

    def mgrad(X):
        return merit_gradient(X, grad_f(X), lambda Z: hess_vec(X, Z), mu)

    best = 0.0
    for k in range(pairs):
        X = random_safe_point(n, p, epsilon, rng)
        if k % 2 == 0:
            Y = random_safe_point(n, p, epsilon, rng)
        else:
            Y = X + 1e-3 * rng.standard_normal((n, p))
            if gram_spectral_norm(Y) > epsilon:
                continue
        dist = np.linalg.norm(X - Y)
        if dist == 0:
            continue
        best = max(best, float(np.linalg.norm(mgrad(X) - mgrad(Y)) / dist))
    return best
