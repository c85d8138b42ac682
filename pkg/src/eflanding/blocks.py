"""Composite points: several Stiefel-constrained blocks plus a free vector."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .manifold import landing_direction, penalty_value, relative_gradient


@dataclass
class BlockPoint:
    """``(X_1, ..., X_J; x)`` with block-wise arithmetic and inner product.

    Supports ``+``, ``-`` and scalar ``*`` so update rules written for plain
    ndarrays apply unchanged.
    """

    blocks: list[np.ndarray]
    free: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.blocks = [np.asarray(b, dtype=np.float64) for b in self.blocks]
        self.free = np.asarray(self.free, dtype=np.float64).ravel()
        for b in self.blocks:
            if b.ndim != 2 or b.shape[1] > b.shape[0]:
                raise ValueError(f"constrained block must be tall, got shape {b.shape}")

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [b.shape for b in self.blocks]

    @property
    def size(self) -> int:
        return sum(b.size for b in self.blocks) + self.free.size

    def _check(self, other: "BlockPoint") -> None:
        if self.shapes != other.shapes or self.free.shape != other.free.shape:
            raise ValueError("block structure mismatch")

    def __add__(self, other):
        self._check(other)
        return BlockPoint([a + b for a, b in zip(self.blocks, other.blocks)], self.free + other.free)

    def __sub__(self, other):
        self._check(other)
        return BlockPoint([a - b for a, b in zip(self.blocks, other.blocks)], self.free - other.free)

    def __mul__(self, c):
        return BlockPoint([c * b for b in self.blocks], c * self.free)

    __rmul__ = __mul__

    def __truediv__(self, c):
        return BlockPoint([b / c for b in self.blocks], self.free / c)

    def copy(self) -> "BlockPoint":
        return BlockPoint([b.copy() for b in self.blocks], self.free.copy())

    def ravel(self) -> np.ndarray:
        return np.concatenate([b.ravel() for b in self.blocks] + [self.free])

    def unravel(self, flat: np.ndarray) -> "BlockPoint":
        flat = np.asarray(flat).ravel()
        if flat.size != self.size:
            raise ValueError("flat vector has the wrong length")
        out, at = [], 0
        for b in self.blocks:
            out.append(flat[at : at + b.size].reshape(b.shape))
            at += b.size
        return BlockPoint(out, flat[at:].copy())

    def inner(self, other: "BlockPoint") -> float:
        self._check(other)
        return sum(float(np.sum(a * b)) for a, b in zip(self.blocks, other.blocks)) + float(self.free @ other.free)

    def norm(self) -> float:
        return float(np.linalg.norm(self.ravel()))

    def zeros_like(self) -> "BlockPoint":
        return BlockPoint([np.zeros_like(b) for b in self.blocks], np.zeros_like(self.free))

    def isfinite(self) -> bool:
        return bool(np.all(np.isfinite(self.ravel())))


def blockwise_landing_direction(P: BlockPoint, G: BlockPoint, lam: float) -> BlockPoint:
    P._check(G)
    return BlockPoint([landing_direction(X, g, lam) for X, g in zip(P.blocks, G.blocks)], G.free.copy())


def block_penalties(P: BlockPoint) -> list[float]:
    return [penalty_value(X) for X in P.blocks]


def block_rgrad_norms_sq(P: BlockPoint, G: BlockPoint) -> list[float]:
    return [float(np.sum(relative_gradient(X, g) ** 2)) for X, g in zip(P.blocks, G.blocks)]
