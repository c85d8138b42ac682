"""EF-Landing: nodes with momentum and error feedback, a clipping master.

The same loop drives plain matrix variables and :class:`BlockPoint`
composites; both support ``+``, ``-`` and scalar ``*``.

One round at iterate ``X``:

* each node draws ``grad F(X; xi)``, updates its momentum ``v``, sends
  ``c = C(v - g_i)`` and sets ``g_i += c``;
* the master mirrors every ``g_i``, averages them in ascending node order,
  clips the average to norm ``L'`` and takes a landing step.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import compressors as C
from .blocks import BlockPoint, blockwise_landing_direction
from .diagnostics import (
    MetricsRecord,
    canonical_correlation_distance,
    constraint_violation,
    error_terms,
    rgrad_norm_sq,
)
from .manifold import SafeRegionParams, clip_gradient, landing_direction, safe_step_size
from .problems import mean_in_order
from .schedules import LyapunovSetup, ScheduleParams, lyapunov_value

log = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 1e6

# stream tags keep oracle noise, compressor randomness and init independent
TAG_INIT, TAG_ORACLE, TAG_COMPRESS = 1, 2, 3


class Divergence(RuntimeError):
    pass


def stream(seed: int, tag: int, node: int = 0, k: int = 0) -> np.random.Generator:
    """Counter-style generator for one (seed, purpose, node, iteration) tuple."""
    return np.random.default_rng([seed, tag, node, k])


def initial_point(n: int, p: int, seed: int) -> np.ndarray:
    """Orthonormal start: Q factor (positive R diagonal) of a seeded Gaussian."""
    Q, R = np.linalg.qr(stream(seed, TAG_INIT).standard_normal((n, p)))
    return Q * np.sign(np.diag(R))


def _norm(x) -> float:
    return x.norm() if isinstance(x, BlockPoint) else float(np.linalg.norm(x))


def clip(g, L_prime: float):
    if isinstance(g, BlockPoint):
        nrm = g.norm()
        return g if nrm <= L_prime else (L_prime / nrm) * g
    return clip_gradient(g, L_prime)


def direction(X, g, lam: float):
    if isinstance(X, BlockPoint):
        return blockwise_landing_direction(X, g, lam)
    return landing_direction(X, g, lam)


def _finite(x) -> bool:
    return x.isfinite() if isinstance(x, BlockPoint) else bool(np.all(np.isfinite(x)))


def _copy(x):
    return x.copy()


def compress_var(spec: C.CompressorSpec, x, rng) -> C.CompressedMessage:
    """Compress a matrix or composite point over its flattened entries."""
    if isinstance(x, BlockPoint):
        msg = C.compress(spec, x.ravel(), rng)
        msg.logical = x.unravel(msg.logical)
        return msg
    return C.compress(spec, x, rng)


@dataclass
class Message:
    """What a node puts on the wire in one round.

    ``absolute`` messages replace the receiver's mirror instead of being added
    to it: vanilla compression sends ``C(v)`` outright, and with the exact
    (identity) codec sending ``v`` costs the same as sending ``v - g`` while
    keeping the mirror bit-identical to ``v``.
    """

    node_id: int
    wire: C.CompressedMessage
    absolute: bool

    @property
    def logical(self):
        return self.wire.logical

    @property
    def bytes_on_wire(self) -> int:
        return self.wire.bytes_on_wire


def apply_message(g, msg: Message):
    return _copy(msg.logical) if msg.absolute else g + msg.logical


@dataclass
class NodeState:
    node_id: int
    oracle: Callable  # (node_id, X, rng) -> gradient
    seed: int = 0
    v: object = None
    g_local: object = None
    rounds: int = 0

    def sample_gradient(self, X):
        return self.oracle(self.node_id, X, stream(self.seed, TAG_ORACLE, self.node_id, self.rounds))


def node_step(
    state: NodeState,
    X_next,
    spec: C.CompressorSpec,
    eta: float,
    error_feedback: bool = True,
) -> Message:
    """One local round at ``X_next``; returns the uplink message."""
    if not 0.0 < eta <= 1.0:
        raise ValueError("momentum eta must lie in (0, 1]")
    grad = state.sample_gradient(X_next)
    if state.v is None or eta == 1.0:
        state.v = _copy(grad)
    else:
        state.v = (1.0 - eta) * state.v + eta * grad
    rng = stream(state.seed, TAG_COMPRESS, state.node_id, state.rounds) if spec.needs_rng else None

    exact = spec.kind is C.Kind.IDENTITY
    if not error_feedback or exact:
        wire = compress_var(spec, state.v, rng)
        msg = Message(state.node_id, wire, absolute=True)
    else:
        if state.g_local is None:
            state.g_local = state.v * 0.0
        wire = compress_var(spec, state.v - state.g_local, rng)
        msg = Message(state.node_id, wire, absolute=False)
    state.g_local = apply_message(state.g_local, msg)
    state.rounds += 1
    return msg


@dataclass
class MasterState:
    X: object
    schedule: ScheduleParams
    grad_bound: float
    num_nodes: int
    g_nodes: list = field(default_factory=list)
    g_agg: object = None
    step: int = 0

    def absorb(self, messages: list[Message]) -> None:
        if len(messages) != self.num_nodes:
            raise ValueError(f"expected {self.num_nodes} messages, got {len(messages)}")
        messages = sorted(messages, key=lambda m: m.node_id)
        if not self.g_nodes:
            self.g_nodes = [None] * self.num_nodes
        for m in messages:
            prev = self.g_nodes[m.node_id]
            if prev is None and not m.absolute:
                prev = m.logical * 0.0
            self.g_nodes[m.node_id] = apply_message(prev, m)
        self.g_agg = mean_in_order(self.g_nodes)
        if not _finite(self.g_agg):
            raise Divergence("non-finite aggregated gradient")


def master_step(master: MasterState, messages: list[Message]):
    """Absorb one round of messages, clip, and take the landing step."""
    master.absorb(messages)
    g_clipped = clip(master.g_agg, master.grad_bound)
    gamma = master.schedule.gamma_at(master.step)
    master.X = master.X - gamma * direction(master.X, g_clipped, master.schedule.lam)
    master.step += 1
    if not _finite(master.X):
        raise Divergence("non-finite iterate")
    return master.X


@dataclass
class RunResult:
    records: list[MetricsRecord]
    final: object
    diverged: bool = False
    resolved: dict = field(default_factory=dict)
    iterates: list | None = None


class Recorder:
    """Builds metrics rows and watches for divergence."""

    def __init__(self, problem, every: int = 1, cc_reference=None, lyapunov: LyapunovSetup | None = None):
        self.problem = problem
        self.every = max(1, int(every))
        self.cc_reference = cc_reference
        self.lyapunov = lyapunov
        self.start = time.perf_counter()
        self.records: list[MetricsRecord] = []
        self.initial_gap = None

    def due(self, k: int, K: int) -> bool:
        return k % self.every == 0 or k == K

    def record(self, k: int, X, bytes_up: int, nodes=None, schedule=None, force=False) -> MetricsRecord:
        problem = self.problem
        grad = problem.gradient(X)
        gap = problem.loss_gap(X)
        rec = MetricsRecord(
            iter=k,
            loss_gap=gap,
            constraint_violation=constraint_violation(X),
            rgrad_norm_sq=rgrad_norm_sq(X, grad),
            bytes_up_cum=int(bytes_up),
            wall_ms=(time.perf_counter() - self.start) * 1e3,
        )
        if self.cc_reference is not None and not isinstance(X, BlockPoint):
            rec.cc_dist = canonical_correlation_distance(X, self.cc_reference)
        if self.lyapunov is not None and nodes is not None:
            exact = [problem.node_gradient(i, X) for i in range(len(nodes))]
            rec.err_G, rec.err_P_tilde, rec.err_P = error_terms(nodes, exact)
            rec.lyapunov = lyapunov_value(
                nodes, X, exact, self.lyapunov, schedule, f_at_X=problem.value(X), grad_f_at_X=grad
            )
        if self.initial_gap is None:
            self.initial_gap = gap
        self.records.append(rec)
        return rec

    def diverging(self, rec: MetricsRecord) -> bool:
        if not math.isfinite(rec.loss_gap):
            return True
        ref = max(abs(self.initial_gap), 1e-12)
        return abs(rec.loss_gap) > DIVERGENCE_FACTOR * ref


def _check_step_size(schedule: ScheduleParams, safe: SafeRegionParams | None, theory_mode: bool) -> None:
    if safe is None:
        return
    gs = safe_step_size(safe)
    worst = max([schedule.gamma] + [g for _, g in schedule.decay])
    if worst > gs:
        msg = f"step size {worst:g} exceeds the safe step size {gs:g}; iterates may leave the safe region"
        if theory_mode:
            raise ValueError(msg)
        log.warning(msg)


def run_ef_landing(
    problem,
    spec: C.CompressorSpec,
    schedule: ScheduleParams,
    K: int,
    seed: int,
    *,
    grad_bound: float,
    N: int | None = None,
    oracle=None,
    X0=None,
    error_feedback: bool = True,
    safe: SafeRegionParams | None = None,
    theory_mode: bool = False,
    metrics_every: int = 1,
    cc_reference=None,
    lyapunov: LyapunovSetup | None = None,
    threads: int = 1,
    keep_iterates: bool = False,
) -> RunResult:
    """Run K iterations of EF-Landing and return the metrics trajectory.

    ``oracle(node_id, X, rng)`` supplies stochastic gradients; by default the
    problem's exact node gradients are used.  With ``error_feedback=False``
    nodes send ``C(v)`` directly (vanilla compression).
    """
    if N is not None and N != problem.num_nodes:
        if not hasattr(problem, "repartition"):
            raise ValueError(f"problem has {problem.num_nodes} nodes, asked for {N}")
        problem = problem.repartition(N)
    if K < 0:
        raise ValueError("K must be >= 0")
    _check_step_size(schedule, safe, theory_mode)
    N = problem.num_nodes
    if X0 is None:
        X0 = initial_point(*problem.shape, seed)
    if oracle is None:
        oracle = lambda i, X, rng: problem.node_gradient(i, X)  # noqa: E731

    nodes = [NodeState(i, oracle, seed) for i in range(N)]
    master = MasterState(_copy(X0), schedule, grad_bound, N)
    rec = Recorder(problem, metrics_every, cc_reference, lyapunov)
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    iterates = [_copy(X0)] if keep_iterates else None

    def node_round(X):
        if pool is None:
            return [node_step(s, X, spec, schedule.eta, error_feedback) for s in nodes]
        return list(pool.map(lambda s: node_step(s, X, spec, schedule.eta, error_feedback), nodes))

    bytes_up = 0
    diverged = False
    X = master.X
    try:
        msgs = node_round(X)
        bytes_up += sum(m.bytes_on_wire for m in msgs)
        rec.record(0, X, bytes_up, nodes, schedule)
        for k in range(K):
            X = master_step(master, msgs)
            msgs = node_round(X)
            bytes_up += sum(m.bytes_on_wire for m in msgs)
            if keep_iterates:
                iterates.append(_copy(X))
            if rec.due(k + 1, K):
                r = rec.record(k + 1, X, bytes_up, nodes, schedule)
                if rec.diverging(r):
                    r.diverged = diverged = True
                    break
    except Divergence:
        diverged = True
        rec.records.append(_diverged_record(master.step, bytes_up, rec))
    finally:
        if pool is not None:
            pool.shutdown()
    return RunResult(rec.records, master.X, diverged, iterates=iterates)


def _diverged_record(k: int, bytes_up: int, rec: Recorder) -> MetricsRecord:
    return MetricsRecord(k, math.inf, math.inf, math.inf, bytes_up, (time.perf_counter() - rec.start) * 1e3, diverged=True)


def run_blockwise(
    problem,
    spec: C.CompressorSpec,
    schedule: ScheduleParams,
    K: int,
    seed: int,
    *,
    grad_bound: float,
    X0: BlockPoint | None = None,
    **kwargs,
) -> RunResult:
    """Block-wise EF-Landing; clipping and compression act on the composite point."""
    if X0 is None:
        blocks = [initial_point(n, p, seed + 7919 * j) for j, (n, p) in enumerate(problem.block_shapes)]
        X0 = BlockPoint(blocks, np.zeros(problem.free_dim))
    return run_ef_landing(problem, spec, schedule, K, seed, grad_bound=grad_bound, X0=X0, **kwargs)

