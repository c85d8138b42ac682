"""Benchmark problems and gradient oracles.

Distributed PCA stores the stacked sample matrix ``data`` (rows scaled by
``1/sqrt(rows)``) and hands node ``i`` the block ``A_i = sqrt(N) * data_i``.
With that scaling ``f(X) = -1/(2N) sum_i ||A_i X||^2 = -1/2 ||data X||^2`` is
the same function for every partition of the rows, and each ``A_i^T A_i`` is
an estimate of the data covariance.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .blocks import BlockPoint

DATASET_MAGIC = b"EFLD"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIQ")


def haar_stiefel(n: int, p: int, rng: np.random.Generator) -> np.ndarray:
    Q, R = np.linalg.qr(rng.standard_normal((n, p)))
    return Q * np.sign(np.diag(R))


def top_right_singular(M: np.ndarray, p: int) -> np.ndarray:
    _, _, Vt = np.linalg.svd(M, full_matrices=False)
    return Vt[:p].T.copy()


def partition_rows(total: int, N: int) -> list[tuple[int, int]]:
    """Even split; the remainder goes to the last node."""
    if N < 1 or total < N:
        raise ValueError(f"cannot split {total} rows across {N} nodes")
    per = total // N
    bounds = [(i * per, (i + 1) * per) for i in range(N)]
    bounds[-1] = (bounds[-1][0], total)
    return bounds


@dataclass
class PcaProblem:
    data: np.ndarray
    p: int
    num_nodes: int
    seed: int = 0
    X_star: np.ndarray = field(init=False)
    f_star: float = field(init=False)

    def __post_init__(self):
        l_total, n = self.data.shape
        if not 1 <= self.p <= n:
            raise ValueError(f"need 1 <= p <= n, got p={self.p}, n={n}")
        scale = math.sqrt(self.num_nodes)
        self.blocks = [scale * self.data[a:b] for a, b in partition_rows(l_total, self.num_nodes)]
        self.X_star = top_right_singular(self.data, self.p)
        self.f_star = self.value(self.X_star)
        self._cov = None

    @property
    def n(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n, self.p)

    def repartition(self, N: int) -> "PcaProblem":
        return PcaProblem(self.data, self.p, N, self.seed)

    def value(self, X: np.ndarray) -> float:
        total = 0.0
        for A in self.blocks:
            AX = A @ X
            total += float(np.sum(AX * AX))
        return -total / (2 * self.num_nodes)

    def node_gradient(self, i: int, X: np.ndarray) -> np.ndarray:
        A = self.blocks[i]
        return -(A.T @ (A @ X))

    def gradient(self, X: np.ndarray) -> np.ndarray:
        return mean_in_order([self.node_gradient(i, X) for i in range(self.num_nodes)])

    @property
    def covariance(self) -> np.ndarray:
        if self._cov is None:
            self._cov = self.data.T @ self.data
        return self._cov

    def hess_vec(self, X: np.ndarray, Z: np.ndarray) -> np.ndarray:
        return -(self.covariance @ Z)

    def node_smoothness(self) -> np.ndarray:
        """Per-node Lipschitz constants ||A_i||_2^2 of the local gradients."""
        return np.array([np.linalg.norm(A, 2) ** 2 for A in self.blocks])

    def smoothness(self) -> tuple[float, float]:
        """(L, L_tilde): max and root-mean-square of the node constants."""
        Li = self.node_smoothness()
        return float(Li.max()), float(np.sqrt(np.mean(Li**2)))

    def gradient_bound(self, epsilon: float) -> float:
        """Bound on ||grad f_i(X)||_F over the safe region."""
        return float(self.node_smoothness().max() * math.sqrt(self.p * (1 + epsilon)))

    def loss_gap(self, X: np.ndarray) -> float:
        return self.value(X) - self.f_star


def mean_in_order(mats):
    """Mean with a fixed left-to-right summation order."""
    total = mats[0].copy()
    for M in mats[1:]:
        total = total + M
    return total / len(mats)


def gen_pca_data(n: int, l: int, p: int, sigma_data: float, N: int, seed: int) -> PcaProblem:
    """Synthetic PCA instance with ``l`` samples per node.

    Samples are ``U z + sqrt(sigma_data) w`` with U Haar on the Stiefel manifold,
    so their covariance is ``U U^T + sigma_data I``.
    """
    if not 1 <= p <= n or l < 1 or N < 1 or sigma_data < 0:
        raise ValueError("invalid PCA dimensions")
    rng = np.random.default_rng([seed, 0xD474])
    U = haar_stiefel(n, p, rng)
    l_total = l * N
    Z = rng.standard_normal((l_total, p))
    W = rng.standard_normal((l_total, n))
    raw = Z @ U.T + math.sqrt(sigma_data) * W
    prob = PcaProblem(raw / math.sqrt(l_total), p, N, seed)
    prob.U = U
    return prob


def save_dataset(problem: PcaProblem, path: str | Path) -> None:
    l_total, n = problem.data.shape
    header = _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, l_total, problem.num_nodes, problem.p, problem.seed)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(problem.data, dtype="<f8").tobytes())


def read_dataset_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    if len(raw) != _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, n, l_total, N, p, seed = _HEADER.unpack(raw)
    if magic != DATASET_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    return {"n": n, "l_total": l_total, "N": N, "p": p, "seed": seed}


def load_dataset(path: str | Path) -> PcaProblem:
    hdr = read_dataset_header(path)
    body = Path(path).read_bytes()[_HEADER.size :]
    expected = hdr["l_total"] * hdr["n"] * 8
    if len(body) != expected:
        raise ValueError(f"{path}: expected {expected} data bytes, found {len(body)}")
    data = np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(hdr["l_total"], hdr["n"])
    return PcaProblem(data, hdr["p"], hdr["N"], hdr["seed"])


class NoiseKind(str, enum.Enum):
    ADDITIVE_GAUSSIAN = "additive_gaussian"
    MINIBATCH = "minibatch"


@dataclass
class NoisyOracle:
    """Stochastic gradients ``grad F(X; xi)`` around an exact problem.

    Gaussian noise is scaled so ``E||noise||_F^2 = sigma^2`` and truncated at
    six standard deviations per entry, which keeps gradients bounded.
    """

    base: PcaProblem
    sigma: float = 0.0
    kind: NoiseKind = NoiseKind.ADDITIVE_GAUSSIAN
    batch_size: int | None = None

    def __post_init__(self):
        self.kind = NoiseKind(self.kind)
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.kind is NoiseKind.MINIBATCH and not self.batch_size:
            raise ValueError("minibatch oracle needs batch_size")

    @property
    def num_nodes(self) -> int:
        return self.base.num_nodes

    def gradient_bound(self, epsilon: float) -> float:
        extra = 6.0 * self.sigma if self.kind is NoiseKind.ADDITIVE_GAUSSIAN else 0.0
        if self.kind is NoiseKind.MINIBATCH:
            rows = min(A.shape[0] for A in self.base.blocks)
            return self.base.gradient_bound(epsilon) * rows / self.batch_size
        return self.base.gradient_bound(epsilon) + extra

    def sample(self, i: int, X: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.kind is NoiseKind.MINIBATCH:
            A = self.base.blocks[i]
            rows = A.shape[0]
            idx = rng.choice(rows, size=min(self.batch_size, rows), replace=False)
            B = A[idx]
            return -(rows / len(idx)) * (B.T @ (B @ X))
        grad = self.base.node_gradient(i, X)
        if self.sigma == 0:
            return grad
        n, p = X.shape
        z = np.clip(rng.standard_normal((n, p)), -6.0, 6.0)
        return grad + (self.sigma / math.sqrt(n * p)) * z


def noisy_gradient(oracle: NoisyOracle, node_id: int, X: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return oracle.sample(node_id, X, rng)


def pca_gradient(problem: PcaProblem, node_id: int, X: np.ndarray) -> np.ndarray:
    return problem.node_gradient(node_id, X)


def loss_gap(problem, X) -> float:
    return problem.loss_gap(X)


@dataclass
class BlockToyProblem:
    """Block-wise toy: ``f = sum_j -1/2 <X_j, S_j X_j> + 1/2 ||x - x_target||^2``.

    Node ``i`` owns its own ``S_j^i`` and ``x_target^i``; the global problem
    is their average.
    """

    node_S: list[list[np.ndarray]]
    node_targets: list[np.ndarray]
    ps: list[int]

    def __post_init__(self):
        N = len(self.node_S)
        self.S = [mean_in_order([self.node_S[i][j] for i in range(N)]) for j in range(len(self.ps))]
        self.x_target = mean_in_order(self.node_targets) if self.node_targets[0].size else self.node_targets[0]
        self.block_optima = []
        for S, p in zip(self.S, self.ps):
            w, V = np.linalg.eigh(S)
            self.block_optima.append(V[:, ::-1][:, :p].copy())
        self.f_star = self.value(BlockPoint(list(self.block_optima), self.x_target.copy()))

    @property
    def num_nodes(self) -> int:
        return len(self.node_S)

    @property
    def num_blocks(self) -> int:
        return len(self.ps)

    @property
    def block_shapes(self) -> list[tuple[int, int]]:
        return [(S.shape[0], p) for S, p in zip(self.S, self.ps)]

    @property
    def free_dim(self) -> int:
        return self.x_target.size

    def value(self, P: BlockPoint) -> float:
        total = 0.0
        for X, S in zip(P.blocks, self.S):
            total -= 0.5 * float(np.sum(X * (S @ X)))
        r = P.free - self.x_target
        return total + 0.5 * float(r @ r)

    def node_gradient(self, i: int, P: BlockPoint) -> BlockPoint:
        blocks = [-(S @ X) for S, X in zip(self.node_S[i], P.blocks)]
        return BlockPoint(blocks, P.free - self.node_targets[i])

    def gradient(self, P: BlockPoint) -> BlockPoint:
        return mean_in_order([self.node_gradient(i, P) for i in range(self.num_nodes)])

    def loss_gap(self, P: BlockPoint) -> float:
        return self.value(P) - self.f_star

    def node_smoothness(self) -> np.ndarray:
        return np.array([max([1.0] + [np.linalg.norm(S, 2) for S in Ss]) for Ss in self.node_S])


def gen_block_toy(
    J: int,
    dims: list[tuple[int, int]],
    seed: int,
    free_dim: int = 0,
    N: int = 1,
    samples: int | None = None,
) -> BlockToyProblem:
    """Random instance with PSD ``S_j = B^T B / m`` per node and Gaussian targets."""
    if J < 0 or len(dims) != J:
        raise ValueError("dims must list one (n_j, p_j) per block")
    if J == 0 and free_dim == 0:
        raise ValueError("problem has no variables")
    rng = np.random.default_rng([seed, 0xB10C])
    node_S, targets = [], []
    for _ in range(N):
        Ss = []
        for n_j, p_j in dims:
            if not 1 <= p_j <= n_j:
                raise ValueError(f"block ({n_j}, {p_j}) is not tall")
            m = samples or 2 * n_j
            B = rng.standard_normal((m, n_j))
            # spike the top directions so the optimal subspace is well separated
            B[:, :p_j] *= 2.0
            Ss.append(B.T @ B / m)
        node_S.append(Ss)
        targets.append(rng.standard_normal(free_dim))
    return BlockToyProblem(node_S, targets, [p for _, p in dims])


class SingleBlockProblem:
    """View of a matrix problem as a one-block composite problem."""

    def __init__(self, base):
        self.base = base
        self.f_star = base.f_star

    @property
    def num_nodes(self) -> int:
        return self.base.num_nodes

    @property
    def block_shapes(self) -> list[tuple[int, int]]:
        return [self.base.shape]

    free_dim = 0

    def value(self, P: BlockPoint) -> float:
        return self.base.value(P.blocks[0])

    def node_gradient(self, i: int, P: BlockPoint) -> BlockPoint:
        return BlockPoint([self.base.node_gradient(i, P.blocks[0])], P.free.copy())

    def gradient(self, P: BlockPoint) -> BlockPoint:
        return mean_in_order([self.node_gradient(i, P) for i in range(self.num_nodes)])

    def loss_gap(self, P: BlockPoint) -> float:
        return self.value(P) - self.f_star


@dataclass
class LinearProblem:
    """``f(X) = -<c, X>`` on a single node; the stagnation counterexample."""

    c: np.ndarray

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=np.float64)
        n, p = self.c.shape
        # minimiser on the Stiefel manifold: polar factor of c
        U, _, Vt = np.linalg.svd(self.c, full_matrices=False)
        self.X_star = U @ Vt
        self.f_star = self.value(self.X_star)

    num_nodes = 1

    @property
    def shape(self):
        return self.c.shape

    def value(self, X):
        return -float(np.sum(self.c * X))

    def node_gradient(self, i, X):
        return -self.c.copy()

    def gradient(self, X):
        return -self.c.copy()

    def hess_vec(self, X, Z):
        return np.zeros_like(Z)

    def loss_gap(self, X):
        return self.value(X) - self.f_star


def counterexample_problem() -> LinearProblem:
    """n=2, p=1 with f(X) = -(2, 1) . X, started from (1, 0)."""
    return LinearProblem(np.array([[2.0], [1.0]]))
