"""Per-iteration metrics."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .blocks import BlockPoint, block_penalties, block_rgrad_norms_sq
from .manifold import penalty_value, relative_gradient

BASE_COLUMNS = ("iter", "loss_gap", "constraint_violation", "rgrad_norm_sq", "bytes_up_cum", "wall_ms")
EXTRA_COLUMNS = ("lyapunov", "err_G", "err_P_tilde", "err_P", "cc_dist")


@dataclass
class MetricsRecord:
    iter: int
    loss_gap: float
    constraint_violation: float
    rgrad_norm_sq: float
    bytes_up_cum: int
    wall_ms: float
    lyapunov: float | None = None
    err_G: float | None = None
    err_P_tilde: float | None = None
    err_P: float | None = None
    cc_dist: float | None = None
    diverged: bool = False

    def values(self, extended: bool) -> list:
        cols = BASE_COLUMNS + (EXTRA_COLUMNS if extended else ())
        return [getattr(self, c) for c in cols]


def record_fields() -> list[str]:
    return [f.name for f in fields(MetricsRecord)]


def constraint_violation(X) -> float:
    if isinstance(X, BlockPoint):
        return float(sum(block_penalties(X)))
    return penalty_value(X)


def rgrad_norm_sq(X, exact_grad) -> float:
    """Squared Riemannian gradient norm; composite points add the free-block gradient."""
    if isinstance(X, BlockPoint):
        return float(sum(block_rgrad_norms_sq(X, exact_grad)) + exact_grad.free @ exact_grad.free)
    R = relative_gradient(X, exact_grad)
    return float(np.sum(R * R))


def _sqnorm(x) -> float:
    if isinstance(x, BlockPoint):
        r = x.ravel()
        return float(r @ r)
    return float(np.sum(x * x))


def error_terms(node_states, exact_grads) -> tuple[float, float, float]:
    """(G_tilde, P_tilde, P): compression error, per-node and averaged momentum error.

    ``exact_grads[i]`` is the exact local gradient at the current iterate.
    """
    N = len(node_states)
    G_t = sum(_sqnorm(s.g_local - s.v) for s in node_states) / N
    P_t = sum(_sqnorm(s.v - g) for s, g in zip(node_states, exact_grads)) / N
    v_bar = node_states[0].v.copy()
    f_bar = exact_grads[0].copy()
    for s, g in zip(node_states[1:], exact_grads[1:]):
        v_bar = v_bar + s.v
        f_bar = f_bar + g
    P = _sqnorm((v_bar - f_bar) / N)
    return G_t, P_t, P


def canonical_correlation_distance(X: np.ndarray, X_star: np.ndarray) -> float:
    """Chordal distance ``sqrt(p - sum cos^2(theta_j))`` between column spans.

    Evaluated as ``||(I - Q_* Q_*^T) Q_X||_F``, the same quantity without the
    cancellation that limits ``p - sum cos^2`` to about 1e-8.
    """
    if X.shape != X_star.shape or X.shape[1] > X.shape[0]:
        raise ValueError("both arguments must be tall matrices of equal shape")
    Qa, Ra = np.linalg.qr(X)
    Qb, Rb = np.linalg.qr(X_star)
    tol = 1e-12 * max(1.0, np.abs(Ra).max(), np.abs(Rb).max())
    if np.min(np.abs(np.diag(Ra))) <= tol or np.min(np.abs(np.diag(Rb))) <= tol:
        raise np.linalg.LinAlgError("rank-deficient argument")
    resid = Qa - Qb @ (Qb.T @ Qa)
    return float(np.linalg.norm(resid))
