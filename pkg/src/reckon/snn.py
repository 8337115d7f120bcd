"""Time-stepped forward pass of the spiking RNN and its SRAM memory model.

Everything is integer. Membranes and readouts are Q(16,8) raw values held in
``int64`` arrays and saturated after each accumulation; weights are 8-bit
integers in [-127, 127] that land in the accumulators shifted left by
``weight_shift`` bits.

Per-timestep order for each hidden neuron::

    v_pre = sat(v + sum(w_in[:, in_map]) + sum(w_rec[:, rec_map]))   # integrate
    z     = v_pre >= theta                                         # fire
    v     = (v_pre - theta * z) * alpha                            # reset, then decay

Spikes produced at step ``t`` go into the recurrent map consumed at ``t + 1``;
input events are buffered the same way.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .fixedpoint import (
    MEMBRANE,
    TARGET,
    WEIGHT_MAX,
    WEIGHT_MIN,
    alpha_to_raw,
    decay_array,
    sat_format,
)

MAX_IN = 256
MAX_REC = 256
MAX_OUT = 16


class InputError(ValueError):
    """An event addressed a channel that does not exist."""


@dataclass
class NetworkConfig:
    """Static network parameters.

    ``tau_mem_ms`` and ``theta`` may be scalars or per-pair sequences of
    length ``ceil(n_rec / 2)``; neurons ``2p`` and ``2p + 1`` share entry ``p``.
    ``theta`` is in membrane value units (raw / 256).
    """

    n_in: int = 40
    n_rec: int = 128
    n_out: int = 2
    dt_ms: float = 1.0
    tau_mem_ms: object = 2000.0
    theta: object = 8.0
    tau_out_ms: float = 20.0
    hard_sigmoid: bool = True
    weight_shift: int = 4
    self_recurrence: bool = True

    def __post_init__(self):
        if not 1 <= self.n_in <= MAX_IN:
            raise ValueError(f"n_in must be in [1, {MAX_IN}]")
        if not 1 <= self.n_rec <= MAX_REC:
            raise ValueError(f"n_rec must be in [1, {MAX_REC}]")
        if not 1 <= self.n_out <= MAX_OUT:
            raise ValueError(f"n_out must be in [1, {MAX_OUT}]")
        if self.dt_ms <= 0:
            raise ValueError("dt_ms must be positive")
        if not 0 <= self.weight_shift <= 8:
            raise ValueError("weight_shift must be in [0, 8]")
        for tau in np.atleast_1d(self.tau_mem_ms):
            if tau <= 0:
                raise ValueError("membrane time constants must be positive")
        for th in np.atleast_1d(self.theta):
            if th <= 0:
                raise ValueError("thresholds must be positive")

    @property
    def n_pairs(self) -> int:
        return (self.n_rec + 1) // 2

    def _per_neuron(self, values) -> np.ndarray:
        arr = np.atleast_1d(np.asarray(values, dtype=float))
        if arr.size == 1:
            arr = np.full(self.n_pairs, arr[0])
        if arr.size != self.n_pairs:
            raise ValueError(f"per-pair parameter needs {self.n_pairs} entries, got {arr.size}")
        return np.repeat(arr, 2)[: self.n_rec]

    def alpha_raw(self) -> np.ndarray:
        """Per-neuron Q.15 membrane decay, ``exp(-dt / tau)``."""
        taus = self._per_neuron(self.tau_mem_ms)
        return np.array([alpha_to_raw(math.exp(-self.dt_ms / t)) for t in taus], dtype=np.int64)

    def theta_raw(self) -> np.ndarray:
        th = self._per_neuron(self.theta)
        raw = np.floor(th * (1 << MEMBRANE.frac_bits)).astype(np.int64)
        return np.clip(raw, 1, MEMBRANE.max_raw)

    def alpha_out_raw(self) -> int:
        return alpha_to_raw(math.exp(-self.dt_ms / self.tau_out_ms))


@dataclass
class Weights:
    """Synaptic weights as 8-bit integers (stored in ``int64`` for arithmetic)."""

    w_in: np.ndarray
    w_rec: np.ndarray
    w_out: np.ndarray

    WORD = 16  # weights per 128-bit SRAM word

    @classmethod
    def zeros(cls, cfg: NetworkConfig) -> "Weights":
        return cls(
            np.zeros((cfg.n_rec, cfg.n_in), dtype=np.int64),
            np.zeros((cfg.n_rec, cfg.n_rec), dtype=np.int64),
            np.zeros((cfg.n_out, cfg.n_rec), dtype=np.int64),
        )

    @classmethod
    def random(cls, cfg: NetworkConfig, seed: int, w0: int = 16) -> "Weights":
        """Uniform integer init in ``[-w0, w0]``."""
        rng = np.random.Generator(np.random.PCG64(seed))
        w = cls(
            rng.integers(-w0, w0 + 1, size=(cfg.n_rec, cfg.n_in)).astype(np.int64),
            rng.integers(-w0, w0 + 1, size=(cfg.n_rec, cfg.n_rec)).astype(np.int64),
            rng.integers(-w0, w0 + 1, size=(cfg.n_out, cfg.n_rec)).astype(np.int64),
        )
        if not cfg.self_recurrence:
            np.fill_diagonal(w.w_rec, 0)
        return w

    def copy(self) -> "Weights":
        return Weights(self.w_in.copy(), self.w_rec.copy(), self.w_out.copy())

    def check(self):
        for name in ("w_in", "w_rec", "w_out"):
            w = getattr(self, name)
            if w.min(initial=0) < WEIGHT_MIN or w.max(initial=0) > WEIGHT_MAX:
                raise ValueError(f"{name} has entries outside [{WEIGHT_MIN}, {WEIGHT_MAX}]")


@dataclass
class LifState:
    v: np.ndarray
    alpha: np.ndarray
    theta: np.ndarray
    v_pre: np.ndarray = None

    @classmethod
    def initial(cls, cfg: NetworkConfig) -> "LifState":
        v = np.zeros(cfg.n_rec, dtype=np.int64)
        return cls(v, cfg.alpha_raw(), cfg.theta_raw(), v.copy())


@dataclass
class LiReadout:
    y: np.ndarray
    alpha: int
    hard_sigmoid: bool = True

    @classmethod
    def initial(cls, cfg: NetworkConfig) -> "LiReadout":
        return cls(np.zeros(cfg.n_out, dtype=np.int64), cfg.alpha_out_raw(), cfg.hard_sigmoid)

    def exposed(self) -> np.ndarray:
        """Readout in Q(16,14) raw: hard-sigmoid of ``y`` or ``y`` itself."""
        if self.hard_sigmoid:
            return hard_sigmoid(self.y)
        return sat_format(self.y << (TARGET.frac_bits - MEMBRANE.frac_bits), TARGET)


def empty_map(n: int) -> np.ndarray:
    return np.zeros(n, dtype=bool)


def buffer_events(map_next: np.ndarray, channels) -> np.ndarray:
    """OR channel ids into the map consumed at the next timestep."""
    out = map_next.copy()
    ch = np.asarray(channels, dtype=np.int64)
    if ch.size:
        if ch.min() < 0 or ch.max() >= out.size:
            raise InputError(f"channel id out of range [0, {out.size})")
        out[ch] = True
    return out


def integrate(v: np.ndarray, w_in, w_rec, in_map, rec_map, weight_shift: int):
    """Add weighted input and recurrent activity; returns (v_pre, sop)."""
    in_idx = np.flatnonzero(in_map)
    rec_idx = np.flatnonzero(rec_map)
    acc = v.copy()
    if in_idx.size:
        acc += w_in[:, in_idx].sum(axis=1) << weight_shift
    if rec_idx.size:
        acc += w_rec[:, rec_idx].sum(axis=1) << weight_shift
    sop = (in_idx.size + rec_idx.size) * v.size
    return sat_format(acc, MEMBRANE), sop


def fire(v_pre: np.ndarray, theta: np.ndarray):
    """Threshold test and reset by subtraction; returns (v_reset, spikes)."""
    z = v_pre >= theta
    return v_pre - np.where(z, theta, 0), z


def decay(v: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    return sat_format(decay_array(v, alpha), MEMBRANE)


def step_lif(state: LifState, w_in, w_rec, in_map, rec_map, weight_shift: int = 4):
    """One LIF timestep. Returns (new_state, new_rec_map, sop_count)."""
    v_pre, sop = integrate(state.v, w_in, w_rec, in_map, rec_map, weight_shift)
    v_reset, z = fire(v_pre, state.theta)
    v = decay(v_reset, state.alpha)
    return replace(state, v=v, v_pre=v_pre), z, sop


def step_li(readout: LiReadout, w_out, rec_map, weight_shift: int = 4) -> LiReadout:
    """Leaky-integrator readout: integrate then decay, no spike or reset."""
    idx = np.flatnonzero(rec_map)
    acc = readout.y.copy()
    if idx.size:
        acc += w_out[:, idx].sum(axis=1) << weight_shift
    y = sat_format(decay_array(sat_format(acc, MEMBRANE), readout.alpha), MEMBRANE)
    return replace(readout, y=y)


def hard_sigmoid(y: np.ndarray) -> np.ndarray:
    """``clamp(y / 4 + 1/2, 0, 1)`` from Q(16,8) raw to Q(16,14) raw (exact)."""
    one = 1 << TARGET.frac_bits
    scale = 1 << (TARGET.frac_bits - MEMBRANE.frac_bits - 2)
    return np.clip(np.asarray(y, dtype=np.int64) * scale + one // 2, 0, one)


def hard_sigmoid_gate(y: np.ndarray) -> np.ndarray:
    """1 where the hard-sigmoid is on its linear part, else 0."""
    h = hard_sigmoid(y)
    return ((h > 0) & (h < (1 << TARGET.frac_bits))).astype(np.int64)


class Network:
    """Weights plus forward state, advanced one timestep at a time."""

    def __init__(self, cfg: NetworkConfig, weights: Weights):
        weights.check()
        self.cfg = cfg
        self.weights = weights
        self.reset()

    def reset(self):
        self.lif = LifState.initial(self.cfg)
        self.readout = LiReadout.initial(self.cfg)
        self.in_map = empty_map(self.cfg.n_in)
        self.rec_map = empty_map(self.cfg.n_rec)
        self.sop_count = 0

    def step(self, events_next=()):
        """Consume the buffered maps, then buffer ``events_next`` for the next step.

        Returns the pair of maps that were consumed, which is what the
        eligibility traces need.
        """
        w = self.weights
        in_map, rec_map = self.in_map, self.rec_map
        self.lif, z, sop = step_lif(self.lif, w.w_in, w.w_rec, in_map, rec_map, self.cfg.weight_shift)
        self.readout = step_li(self.readout, w.w_out, rec_map, self.cfg.weight_shift)
        self.sop_count += sop + int(rec_map.sum()) * self.cfg.n_out
        self.rec_map = z
        self.in_map = buffer_events(empty_map(self.cfg.n_in), events_next)
        return in_map, rec_map


@dataclass
class MemoryModel:
    """SRAM footprint in bytes, by region."""

    w_in: int
    w_rec: int
    w_out: int
    neuron_state: int
    readout_state: int
    et: int
    details: dict = field(default_factory=dict)

    @property
    def inference_bytes(self) -> int:
        return self.w_in + self.w_rec + self.w_out + self.neuron_state + self.readout_state

    @property
    def total_bytes(self) -> int:
        return self.inference_bytes + self.et

    @property
    def overhead_ratio(self) -> float:
        return self.et / self.inference_bytes

    def as_dict(self) -> dict:
        return {
            "w_in": self.w_in,
            "w_rec": self.w_rec,
            "w_out": self.w_out,
            "neuron_state": self.neuron_state,
            "readout_state": self.readout_state,
            "et": self.et,
            "inference_bytes": self.inference_bytes,
            "total_bytes": self.total_bytes,
            "overhead_ratio": self.overhead_ratio,
        }


def memory_report(cfg: NetworkConfig, weight_bits: int = 8, et_bits: int = 16,
                  learning: bool = True) -> MemoryModel:
    """Bytes per storage region.

    Neuron state is packed two neurons per 128-bit word (two membranes plus
    their shared decay and threshold); each readout holds one 16-bit state.
    The eligibility traces, one per input channel and per hidden neuron, are
    the only learning-specific storage and are zero when ``learning`` is off.
    """
    w_in = cfg.n_in * cfg.n_rec * weight_bits // 8
    w_rec = cfg.n_rec * cfg.n_rec * weight_bits // 8
    w_out = cfg.n_out * cfg.n_rec * weight_bits // 8
    neuron_state = cfg.n_pairs * 16
    readout_state = cfg.n_out * 2
    et = (cfg.n_in + cfg.n_rec) * et_bits // 8 if learning else 0
    return MemoryModel(w_in, w_rec, w_out, neuron_state, readout_state, et,
                       details={"weight_bits": weight_bits, "et_bits": et_bits})
