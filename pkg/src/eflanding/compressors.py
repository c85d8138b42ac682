"""Contractive compression operators with byte-exact wire encodings.

Every codec produces a real byte payload; ``bytes_on_wire`` is its length and
``decompress`` rebuilds the logical value from the payload alone (plus the
shared random stream for seed-synchronised Rand-K).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np


class Kind(str, enum.Enum):
    IDENTITY = "identity"
    TOPK = "topk"
    RANDK = "randk"
    QSGD = "qsgd"
    QSGD_SCALED = "qsgd_scaled"


class SeedPolicy(str, enum.Enum):
    SHARED_SEED = "shared_seed"
    TRANSMIT_INDICES = "transmit_indices"


@dataclass(frozen=True)
class CompressorSpec:
    kind: Kind = Kind.IDENTITY
    k: int | None = None
    s: int | None = None
    seed_policy: SeedPolicy = SeedPolicy.TRANSMIT_INDICES
    alpha: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "seed_policy", SeedPolicy(self.seed_policy))
        if self.kind in (Kind.TOPK, Kind.RANDK):
            if self.k is None or self.k < 1:
                raise ValueError(f"{self.kind.value} needs a positive k")
        if self.kind in (Kind.QSGD, Kind.QSGD_SCALED):
            if self.s is None or self.s < 1:
                raise ValueError("QSGD needs a positive quantization level s")
        if self.alpha is not None and not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if self.kind is Kind.IDENTITY and self.alpha not in (None, 1.0):
            raise ValueError("identity compressor has alpha = 1")

    def validate_for(self, d: int) -> None:
        if self.k is not None and self.k > d and self.kind in (Kind.TOPK, Kind.RANDK):
            raise ValueError(f"k={self.k} exceeds the {d} entries of the target")

    @property
    def needs_rng(self) -> bool:
        return self.kind in (Kind.RANDK, Kind.QSGD, Kind.QSGD_SCALED)


def topk(k: int) -> CompressorSpec:
    return CompressorSpec(Kind.TOPK, k=k)


def randk(k: int, seed_policy: SeedPolicy | str = SeedPolicy.TRANSMIT_INDICES) -> CompressorSpec:
    return CompressorSpec(Kind.RANDK, k=k, seed_policy=SeedPolicy(seed_policy))


def qsgd(s: int, scaled: bool = False) -> CompressorSpec:
    return CompressorSpec(Kind.QSGD_SCALED if scaled else Kind.QSGD, s=s)


IDENTITY = CompressorSpec()


def k_from_ratio(ratio: float, d: int) -> int:
    """Entries kept for a retention ratio: floor(ratio * d), at least one."""
    if not 0.0 < ratio <= 1.0:
        raise ValueError("retention ratio must lie in (0, 1]")
    return max(1, min(d, int(math.floor(ratio * d))))


@dataclass
class CompressedMessage:
    kind: Kind
    shape: tuple[int, ...]
    payload: bytes
    logical: np.ndarray

    @property
    def bytes_on_wire(self) -> int:
        return len(self.payload)


def _qsgd_omega(d: int, s: int) -> float:
    return min(d / s**2, math.sqrt(d) / s)


def _level_bits(s: int) -> int:
    return max(1, math.ceil(math.log2(s + 1)))


def message_bytes(spec: CompressorSpec, d: int) -> int:
    """Uplink cost of one message over ``d`` entries."""
    if spec.kind is Kind.IDENTITY:
        return 8 * d
    if spec.kind is Kind.TOPK:
        return 12 * spec.k
    if spec.kind is Kind.RANDK:
        return 8 * spec.k if spec.seed_policy is SeedPolicy.SHARED_SEED else 12 * spec.k
    return 8 + math.ceil(d * (1 + _level_bits(spec.s)) / 8)


def contractive_factor(spec: CompressorSpec, dims: tuple[int, ...]) -> float:
    d = int(np.prod(dims))
    if spec.alpha is not None:
        return spec.alpha
    if spec.kind is Kind.IDENTITY:
        return 1.0
    if spec.kind in (Kind.TOPK, Kind.RANDK):
        return spec.k / d
    omega = _qsgd_omega(d, spec.s)
    if spec.kind is Kind.QSGD_SCALED:
        return 1.0 / (1.0 + omega)
    # raw QSGD is unbiased with variance omega*||x||^2; contractive only if omega < 1
    if omega >= 1.0:
        raise ValueError(f"raw QSGD with s={spec.s} on d={d} entries is not contractive (omega={omega:.3g})")
    return 1.0 - omega


def theta_beta(alpha: float) -> tuple[float, float]:
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    if alpha == 1.0:
        return 1.0, 0.0
    r = math.sqrt(1.0 - alpha)
    theta = 1.0 - r
    return theta, (1.0 - alpha) / theta


def _topk_indices(flat: np.ndarray, k: int) -> np.ndarray:
    # strictly larger magnitudes first, then ties at the threshold by lowest index
    a = np.abs(flat)
    if k >= a.size:
        return np.arange(a.size)
    thr = np.partition(a, a.size - k)[a.size - k]
    above = np.flatnonzero(a > thr)
    ties = np.flatnonzero(a == thr)[: k - above.size]
    return np.sort(np.concatenate([above, ties]))


def _randk_indices(d: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return np.sort(rng.choice(d, size=k, replace=False))


def compress(spec: CompressorSpec, M: np.ndarray, rng: np.random.Generator | None = None) -> CompressedMessage:
    M = np.asarray(M, dtype=np.float64)
    flat = M.ravel()
    d = flat.size
    spec.validate_for(d)
    if spec.needs_rng and rng is None:
        raise ValueError(f"{spec.kind.value} compression needs a random stream")

    idx = None
    if spec.kind is Kind.IDENTITY:
        payload = flat.astype("<f8").tobytes()
    elif spec.kind is Kind.TOPK:
        idx = _topk_indices(flat, spec.k)
        payload = flat[idx].astype("<f8").tobytes() + idx.astype("<u4").tobytes()
    elif spec.kind is Kind.RANDK:
        idx = _randk_indices(d, spec.k, rng)
        payload = flat[idx].astype("<f8").tobytes()
        if spec.seed_policy is SeedPolicy.TRANSMIT_INDICES:
            payload += idx.astype("<u4").tobytes()
    else:
        payload = _qsgd_encode(flat, spec.s, rng)

    msg = CompressedMessage(spec.kind, M.shape, payload, np.empty(0))
    msg.logical = decompress(spec, msg, indices=idx)
    return msg


def decompress(
    spec: CompressorSpec,
    msg: CompressedMessage,
    rng: np.random.Generator | None = None,
    indices: np.ndarray | None = None,
) -> np.ndarray:
    """Rebuild the logical matrix from ``msg.payload``.

    Shared-seed Rand-K payloads carry no indices; pass either ``indices`` or
    a generator positioned where the encoder's was.
    """
    shape = msg.shape
    d = int(np.prod(shape))
    buf = msg.payload
    if spec.kind is Kind.IDENTITY:
        return np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
    if spec.kind in (Kind.TOPK, Kind.RANDK):
        k = spec.k
        vals = np.frombuffer(buf[: 8 * k], dtype="<f8")
        if spec.kind is Kind.RANDK and spec.seed_policy is SeedPolicy.SHARED_SEED:
            if indices is None:
                if rng is None:
                    raise ValueError("shared-seed Rand-K decoding needs the shared stream or indices")
                indices = _randk_indices(d, k, rng)
            idx = np.asarray(indices)
        else:
            idx = np.frombuffer(buf[8 * k : 12 * k], dtype="<u4").astype(np.int64)
        out = np.zeros(d)
        out[idx] = vals
        return out.reshape(shape)
    out = _qsgd_decode(buf, d, spec.s)
    if spec.kind is Kind.QSGD_SCALED:
        out = out / (1.0 + _qsgd_omega(d, spec.s))
    return out.reshape(shape)


def _qsgd_encode(flat: np.ndarray, s: int, rng: np.random.Generator) -> bytes:
    d = flat.size
    bits = _level_bits(s)
    norm = float(np.linalg.norm(flat))
    if norm == 0.0:
        levels = np.zeros(d, dtype=np.int64)
    else:
        u = s * np.abs(flat) / norm
        low = np.floor(u)
        levels = (low + (rng.random(d) < (u - low))).astype(np.int64)
    signs = (flat < 0).astype(np.uint8)
    # per entry: sign bit then `bits` level bits, MSB first
    level_bits = (levels[:, None] >> np.arange(bits - 1, -1, -1)) & 1
    table = np.concatenate([signs[:, None], level_bits.astype(np.uint8)], axis=1)
    return np.array([norm], dtype="<f8").tobytes() + np.packbits(table.ravel()).tobytes()


def _qsgd_decode(buf: bytes, d: int, s: int) -> np.ndarray:
    bits = _level_bits(s)
    norm = float(np.frombuffer(buf[:8], dtype="<f8")[0])
    raw = np.unpackbits(np.frombuffer(buf[8:], dtype=np.uint8))[: d * (1 + bits)]
    table = raw.reshape(d, 1 + bits).astype(np.int64)
    sign = 1.0 - 2.0 * table[:, 0]
    levels = table[:, 1:] @ (1 << np.arange(bits - 1, -1, -1))
    return norm * sign * levels / s


def estimate_contraction(
    spec: CompressorSpec, dims: tuple[int, ...], trials: int, rng: np.random.Generator
) -> tuple[float, float]:
    """Monte Carlo mean and standard error of ||C(M) - M||^2 / ||M||^2 on Gaussian M."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    ratios = np.empty(trials)
    for t in range(trials):
        M = rng.standard_normal(dims)
        C = compress(spec, M, rng).logical
        ratios[t] = np.sum((C - M) ** 2) / np.sum(M * M)
    stderr = float(ratios.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    return float(ratios.mean()), stderr
