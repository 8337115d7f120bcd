"""Saturating signed fixed-point arithmetic and the xorshift32 generator.

Scalar types (:class:`QFormat`, :class:`QValue`, :class:`Prng`) describe the
datapath contracts; the ``*_array`` helpers apply the same rules elementwise
on ``int64`` numpy arrays and are what the engines use in their hot loops.

All rescaling truncates toward minus infinity (arithmetic right shift) and
then saturates. Nothing ever wraps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_VALID_WIDTHS = (8, 16, 24, 32)
_MASK32 = 0xFFFFFFFF


class FormatMismatch(ValueError):
    """Two operands with different Q formats were combined."""


@dataclass(frozen=True)
class QFormat:
    """Signed two's-complement Q format with ``frac_bits`` fractional bits."""

    total_bits: int
    frac_bits: int

    def __post_init__(self):
        if self.total_bits not in _VALID_WIDTHS:
            raise ValueError(f"total_bits must be one of {_VALID_WIDTHS}, got {self.total_bits}")
        if not 0 <= self.frac_bits < self.total_bits:
            raise ValueError(f"frac_bits must be in [0, {self.total_bits}), got {self.frac_bits}")

    @property
    def min_raw(self) -> int:
        return -(1 << (self.total_bits - 1))

    @property
    def max_raw(self) -> int:
        return (1 << (self.total_bits - 1)) - 1

    @property
    def lsb(self) -> float:
        return 2.0 ** -self.frac_bits

    def clamp(self, raw: int) -> int:
        return max(self.min_raw, min(self.max_raw, raw))

    def __str__(self):
        return f"Q({self.total_bits},{self.frac_bits})"


# Datapath formats.
WEIGHT = QFormat(8, 0)
MEMBRANE = QFormat(16, 8)
TRACE = QFormat(16, 8)
UPDATE_ACC = QFormat(24, 16)
TARGET = QFormat(16, 14)
DECAY_FRAC_BITS = 15

WEIGHT_MIN = -127
WEIGHT_MAX = 127


@dataclass(frozen=True)
class QValue:
    raw: int
    format: QFormat

    def __post_init__(self):
        if not self.format.min_raw <= self.raw <= self.format.max_raw:
            raise ValueError(f"raw {self.raw} out of range for {self.format}")

    @classmethod
    def from_float(cls, x: float, fmt: QFormat) -> "QValue":
        """Quantize ``x`` by truncation toward minus infinity, saturating."""
        raw = int(np.floor(x * (1 << fmt.frac_bits)))
        return cls(fmt.clamp(raw), fmt)

    def to_float(self) -> float:
        return self.raw / (1 << self.format.frac_bits)

    def __float__(self):
        return self.to_float()


def rescale_raw(raw: int, from_frac: int, to_frac: int) -> int:
    """Move ``raw`` between fractional positions, flooring when bits drop."""
    if to_frac >= from_frac:
        return raw << (to_frac - from_frac)
    return raw >> (from_frac - to_frac)


def q_add_sat(a: QValue, b: QValue) -> QValue:
    if a.format != b.format:
        raise FormatMismatch(f"cannot add {a.format} and {b.format}")
    return QValue(a.format.clamp(a.raw + b.raw), a.format)


def q_sub_sat(a: QValue, b: QValue) -> QValue:
    if a.format != b.format:
        raise FormatMismatch(f"cannot subtract {b.format} from {a.format}")
    return QValue(a.format.clamp(a.raw - b.raw), a.format)


def q_mul(a: QValue, b: QValue, out_format: QFormat) -> QValue:
    """Full-precision product, floored to ``out_format`` and saturated."""
    prod = a.raw * b.raw
    raw = rescale_raw(prod, a.format.frac_bits + b.format.frac_bits, out_format.frac_bits)
    return QValue(out_format.clamp(raw), out_format)


@dataclass(frozen=True)
class Prng:
    """xorshift32 state. ``state`` is never zero."""

    state: int
    seed: int

    @classmethod
    def from_seed(cls, seed: int) -> "Prng":
        return cls(seed_to_state(seed), seed)


def seed_to_state(seed: int) -> int:
    state = seed & _MASK32
    # xorshift32 has a fixed point at 0.
    return state if state else 0x9E3779B9


def xorshift32(x: int) -> int:
    x ^= (x << 13) & _MASK32
    x ^= x >> 17
    x ^= (x << 5) & _MASK32
    return x & _MASK32


def prng_next(prng: Prng) -> tuple[int, Prng]:
    nxt = xorshift32(prng.state)
    return nxt, Prng(nxt, prng.seed)


def stochastic_round(wide: QValue, target: QFormat, prng: Prng) -> tuple[QValue, Prng]:
    """Round ``wide`` onto ``target``'s grid, up with probability equal to the dropped fraction.

    The dropped fraction has ``d`` bits; it is compared against the top ``d``
    bits of one 32-bit draw, so ``P(round up) = frac / 2**d`` exactly.
    """
    d = wide.format.frac_bits - target.frac_bits
    if d <= 0:
        raise ValueError("stochastic_round needs a wider fractional part than the target")
    if d > 32:
        raise ValueError("at most 32 fractional bits can be dropped")
    word, prng = prng_next(prng)
    base = wide.raw >> d
    frac = wide.raw & ((1 << d) - 1)
    if frac and (word >> (32 - d)) < frac:
        base += 1
    return QValue(target.clamp(base), target), prng


# --- vectorized forms -----------------------------------------------------


def sat_array(x: np.ndarray, lo: int, hi: int) -> np.ndarray:
    return np.clip(x, lo, hi)


def sat_format(x: np.ndarray, fmt: QFormat) -> np.ndarray:
    return np.clip(x, fmt.min_raw, fmt.max_raw)


def decay_array(x: np.ndarray, alpha_raw) -> np.ndarray:
    """Multiply by a Q.15 decay factor, flooring. ``alpha_raw`` is in [0, 2**15]."""
    return (x * alpha_raw) >> DECAY_FRAC_BITS


def alpha_to_raw(alpha: float) -> int:
    """Quantize a decay factor in (0, 1] to Q.15; 1.0 maps to exactly 2**15."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"decay factor must lie in (0, 1], got {alpha}")
    return max(1, int(round(alpha * (1 << DECAY_FRAC_BITS))))


class XorshiftLanes:
    """An array of independent xorshift32 streams stepped in lockstep.

    Each lane is seeded from ``(seed, tag, lane index)`` so a lane's draws do
    not depend on how many other lanes exist or in which order they are used.
    """

    def __init__(self, shape, seed: int, tag: int = 0):
        n = int(np.prod(shape))
        idx = np.arange(n, dtype=np.uint64)
        mix = _splitmix32(np.uint64(seed & _MASK32) * np.uint64(0x100000001)
                          ^ np.uint64((tag & 0xFFFF) << 40) ^ idx)
        mix[mix == 0] = np.uint32(0x9E3779B9)
        self.state = mix.reshape(shape)

    def next(self) -> np.ndarray:
        """Advance every lane once and return the new uint32 words."""
        x = self.state
        x = x ^ (x << np.uint32(13))
        x = x ^ (x >> np.uint32(17))
        x = x ^ (x << np.uint32(5))
        self.state = x
        return x


def _splitmix64(z):
    with np.errstate(over="ignore"):
        z = np.asarray(z, dtype=np.uint64) + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def _splitmix32(z: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer folded to 32 bits; only used to decorrelate lane seeds.
    return (_splitmix64(z) & np.uint64(_MASK32)).astype(np.uint32)


def row_stream_seeds(seed: int, step: int, tag: int, rows: int) -> np.ndarray:
    """Initial xorshift32 state of each row's stream for one update step.

    Derived from ``(seed, step, tag, row)`` alone, so rows can be processed
    in any order or in parallel and nothing is stored between steps.
    """
    h = _splitmix64(np.uint64(seed & _MASK32))
    h = _splitmix64(h ^ ((np.uint64(step) << np.uint64(2)) | np.uint64(tag & 3)))
    h = _splitmix64(h ^ np.arange(rows, dtype=np.uint64))
    s = (h & np.uint64(_MASK32)).astype(np.uint32)
    s[s == 0] = np.uint32(0x9E3779B9)
    return s


def row_words(seed: int, step: int, tag: int, shape) -> np.ndarray:
    """``(rows, cols)`` draws: column ``i`` holds the ``i+1``-th xorshift32 output of each row stream."""
    rows, cols = shape
    x = row_stream_seeds(seed, step, tag, rows)
    out = np.empty((rows, cols), dtype=np.uint32)
    for i in range(cols):
        x = x ^ (x << np.uint32(13))
        x = x ^ (x >> np.uint32(17))
        x = x ^ (x << np.uint32(5))
        out[:, i] = x
    return out


def stochastic_round_array(wide: np.ndarray, drop_bits: int, words: np.ndarray) -> np.ndarray:
    """Vectorized :func:`stochastic_round` on raw integers.

    ``words`` are uint32 draws, one per element; the comparison uses their
    top ``drop_bits`` bits exactly like the scalar version.
    """
    base = wide >> drop_bits
    frac = wide & ((1 << drop_bits) - 1)
    draw = (words >> np.uint32(32 - drop_bits)).astype(np.int64)
    return base + (draw < frac)
