"""Modified e-prop weight updates on the integer datapath.

The learning state is per neuron, never per synapse: one eligibility trace
per input channel and per hidden neuron, plus the buffered post-synaptic
terms (STE value and learning signal) of the current step. A weight update is

    dW[j, i] = -eta * LS[j] * STE(v_j) * trace[i]

for input and recurrent weights, and ``-eta * err[k] * trace_rec[j]`` for the
readout. Pre-rounding updates live in Q(24,16) weight-LSB units and are
stochastically rounded onto the 8-bit grid.

Fixed-point positions used below:

* traces: Q(16,8), a spike adds 1.0
* errors and learning signals: 14 fractional bits
* STE outputs: 5-bit signed integers, read as multiples of 1/16
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fixedpoint import (
    TARGET,
    TRACE,
    UPDATE_ACC,
    WEIGHT_MAX,
    WEIGHT_MIN,
    row_words,
    alpha_to_raw,
    decay_array,
    sat_format,
    stochastic_round_array,
)

STE_FRAC_BITS = 4
LS_FRAC_BITS = TARGET.frac_bits
WORD = 16


class UndefinedRate(ValueError):
    """A rate was requested over zero candidates."""


# --- eligibility traces ---------------------------------------------------


@dataclass
class EligibilityTraces:
    et_in: np.ndarray
    et_rec: np.ndarray
    alpha: int

    @classmethod
    def zeros(cls, n_in: int, n_rec: int, alpha_raw: int) -> "EligibilityTraces":
        return cls(np.zeros(n_in, dtype=np.int64), np.zeros(n_rec, dtype=np.int64), alpha_raw)

    @classmethod
    def for_tau(cls, n_in: int, n_rec: int, tau_ms: float, dt_ms: float = 1.0):
        return cls.zeros(n_in, n_rec, alpha_to_raw(math.exp(-dt_ms / tau_ms)))

    @property
    def n_values(self) -> int:
        return self.et_in.size + self.et_rec.size


def update_traces(traces: EligibilityTraces, in_map, rec_map) -> EligibilityTraces:
    """Decay each trace, then add its neuron's binary spike."""
    one = 1 << TRACE.frac_bits
    et_in = sat_format(decay_array(traces.et_in, traces.alpha) + np.where(in_map, one, 0), TRACE)
    et_rec = sat_format(decay_array(traces.et_rec, traces.alpha) + np.where(rec_map, one, 0), TRACE)
    return EligibilityTraces(et_in, et_rec, traces.alpha)


# --- straight-through estimator -------------------------------------------


@dataclass(frozen=True)
class SteLut:
    """5-segment piecewise-constant pseudo-derivative over ``v - theta``.

    ``bounds`` are four strictly increasing membrane offsets in Q(16,8) raw
    units; segment ``s`` covers ``[bounds[s-1], bounds[s])``. ``values`` are
    5-bit signed.
    """

    bounds: tuple
    values: tuple

    def __post_init__(self):
        if len(self.bounds) != 4 or len(self.values) != 5:
            raise ValueError("an STE LUT has 4 boundaries and 5 values")
        if any(b >= c for b, c in zip(self.bounds, self.bounds[1:])):
            raise ValueError("LUT boundaries must be strictly increasing")
        if any(not -16 <= v <= 15 for v in self.values):
            raise ValueError("LUT values must fit 5-bit signed [-16, 15]")

    @classmethod
    def triangular(cls, theta_raw: int, width: float = 1.0) -> "SteLut":
        """Quantize ``max(0, 1 - |x| / (width * theta))`` to 5 steps.

        Inner boundaries sit at +-1/3 of the half-width, so the three inner
        segments are sampled at their midpoints (1/3, 1, 1/3 of the peak).
        """
        h = max(3, int(round(width * theta_raw)))
        third = max(1, h // 3)
        bounds = (-h, -third, third, h)
        side = int(round(16 * triangular(-2 * h / 3, h)))
        return cls(bounds, (0, side, 15, side, 0))

    def as_float(self) -> tuple:
        return tuple(v / (1 << STE_FRAC_BITS) for v in self.values)


def triangular(x, half_width):
    """Continuous pseudo-derivative that the default LUT quantizes."""
    return np.maximum(0.0, 1.0 - np.abs(x) / half_width)


def ste_eval(lut: SteLut, v, theta):
    """Look up the 5-bit STE value of ``v - theta`` (scalars or arrays)."""
    seg = np.searchsorted(np.asarray(lut.bounds), np.asarray(v) - np.asarray(theta), side="right")
    return np.asarray(lut.values, dtype=np.int64)[seg]


# --- learning context -----------------------------------------------------


@dataclass
class LearningContext:
    """Hyperparameters of the update rule.

    ``lr_shift`` gives ``eta = 2 ** -lr_shift``. ``feedback`` is either
    ``"symmetric"`` (B is the current readout matrix, transposed) or
    ``"random-fixed"`` (B drawn once from ``feedback_seed``).
    """

    lr_shift: int = 4
    lr_out_shift: int = None
    reg: float = 0.0
    f_target: float = 0.0
    skip_threshold: float = 2.0 ** -6
    feedback: str = "symmetric"
    feedback_seed: int = 0
    feedback_scale: int = 16
    gate_readout: bool = True
    frozen: bool = False  # eta = 0: updates are computed and counted, never applied

    def __post_init__(self):
        if self.lr_out_shift is None:
            self.lr_out_shift = self.lr_shift
        if self.feedback not in ("symmetric", "random-fixed"):
            raise ValueError(f"unknown feedback mode {self.feedback!r}")

    @property
    def eta(self) -> float:
        return 2.0 ** -self.lr_shift

    @property
    def reg_raw(self) -> int:
        return int(math.floor(self.reg * (1 << LS_FRAC_BITS)))

    @property
    def f_target_raw(self) -> int:
        return int(math.floor(self.f_target * (1 << TRACE.frac_bits)))

    @property
    def skip_threshold_raw(self) -> float:
        if math.isinf(self.skip_threshold):
            return math.inf
        return self.skip_threshold * (1 << TRACE.frac_bits)

    def feedback_matrix(self, w_out: np.ndarray) -> np.ndarray:
        if self.feedback == "symmetric":
            return w_out.T
        if not hasattr(self, "_b_fixed") or self._b_fixed.shape != w_out.T.shape:
            rng = np.random.Generator(np.random.PCG64(self.feedback_seed))
            s = self.feedback_scale
            self._b_fixed = rng.integers(-s, s + 1, size=w_out.T.shape).astype(np.int64)
        return self._b_fixed


@dataclass
class UpdateStats:
    """Update counters. ``applied + skipped_et + skipped_ste == candidates``."""

    candidates: int = 0
    applied: int = 0
    skipped_et: int = 0
    skipped_ste: int = 0
    word_candidates: int = 0
    word_skipped: int = 0
    nonzero_deltas: int = 0
    update_steps: int = 0

    def merge(self, other: "UpdateStats"):
        for k in self.__dataclass_fields__:
            setattr(self, k, getattr(self, k) + getattr(other, k))

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def skip_rate(stats: UpdateStats) -> float:
    if stats.candidates == 0:
        raise UndefinedRate("skip rate is undefined with zero candidate updates")
    return (stats.skipped_et + stats.skipped_ste) / stats.candidates


def gated_error(err: np.ndarray, gate: np.ndarray | None) -> np.ndarray:
    return err if gate is None else err * gate


def learning_signals(ctx: LearningContext, err: np.ndarray, w_out: np.ndarray,
                     traces: EligibilityTraces) -> np.ndarray:
    """``LS_j = sum_k B[j, k] err_k + reg * (trace_rec_j - f_target)``, 14 fractional bits.

    ``err`` is the (gated) output error in Q(16,14) raw.
    """
    ls = ctx.feedback_matrix(w_out) @ err
    if ctx.reg_raw:
        ls = ls + ((ctx.reg_raw * (traces.et_rec - ctx.f_target_raw)) >> TRACE.frac_bits)
    return ls


# --- weight application ---------------------------------------------------


def _to_update_acc(prod: np.ndarray, frac_bits: int, shift: int) -> np.ndarray:
    """Negate, move ``prod`` from ``frac_bits`` to Q(24,16) with eta = 2**-shift, floor, saturate."""
    k = frac_bits - UPDATE_ACC.frac_bits + shift
    neg = -prod
    out = neg >> k if k >= 0 else neg << -k
    return sat_format(out, UPDATE_ACC)


def _apply(w: np.ndarray, delta_acc: np.ndarray, words: np.ndarray) -> np.ndarray:
    d = stochastic_round_array(delta_acc, UPDATE_ACC.frac_bits, words)
    return np.clip(w + d, WEIGHT_MIN, WEIGHT_MAX)


def _count_words(active: np.ndarray) -> tuple[int, int]:
    """(words, fully skipped words) for a row-major candidate mask."""
    rows, cols = active.shape
    pad = (-cols) % WORD
    if pad:
        active = np.concatenate([active, np.zeros((rows, pad), dtype=bool)], axis=1)
    per_word = active.reshape(rows, -1, WORD).any(axis=2)
    return per_word.size, int(per_word.size - per_word.sum())


@dataclass
class PostTerms:
    """Phase-1 buffer: per-neuron STE and learning signal."""

    ste: np.ndarray
    ls: np.ndarray


def phase1_output_updates(w_out: np.ndarray, ctx: LearningContext, traces: EligibilityTraces,
                          err: np.ndarray, ste: np.ndarray, words: np.ndarray | None = None,
                          dense: dict | None = None):
    """Update readout weights and buffer the hidden neurons' post-synaptic terms.

    ``err`` is the gated output error (Q(16,14) raw); ``ste`` the STE values
    of the hidden neurons at this step. Returns ``(w_out', post, stats)``.
    ``post.ls`` is computed from the readout weights *before* this update.
    """
    stats = UpdateStats(update_steps=1)
    ls = learning_signals(ctx, err, w_out, traces)
    post = PostTerms(ste=ste, ls=ls)

    n_out, n_rec = w_out.shape
    row_live = err != 0
    col_live = np.abs(traces.et_rec) >= ctx.skip_threshold_raw
    active = row_live[:, None] & col_live[None, :]
    stats.candidates = n_out * n_rec
    stats.skipped_ste = int((~row_live).sum()) * n_rec
    stats.skipped_et = int(row_live.sum()) * int((~col_live).sum())
    stats.applied = int(active.sum())
    stats.word_candidates, stats.word_skipped = _count_words(active)

    delta = _to_update_acc(np.outer(err, traces.et_rec), TARGET.frac_bits + TRACE.frac_bits,
                           ctx.lr_out_shift)
    delta = np.where(active, delta, 0)
    if dense is not None:
        dense["w_out"] = delta
    if words is None:
        words = np.zeros(delta.shape, dtype=np.uint32)
    new = _apply(w_out, delta, words)
    stats.nonzero_deltas = int((new != w_out).sum())
    return new, post, stats


def phase2_hidden_updates(w_in: np.ndarray, w_rec: np.ndarray, post: PostTerms,
                          traces: EligibilityTraces, ctx: LearningContext,
                          words_in: np.ndarray | None = None,
                          words_rec: np.ndarray | None = None,
                          dense: dict | None = None):
    """Input and recurrent updates from buffered post terms times presynaptic traces.

    A row is skipped when its STE value is zero; a column is skipped when its
    trace magnitude is below ``ctx.skip_threshold``. Returns ``(w_in', w_rec', stats)``.
    """
    stats = UpdateStats()
    n_rec = post.ste.size
    post_term = post.ls * post.ste  # LS_FRAC_BITS + STE_FRAC_BITS fractional bits
    row_live = post.ste != 0
    frac = LS_FRAC_BITS + STE_FRAC_BITS + TRACE.frac_bits
    out = []
    for w, et, words, key in ((w_in, traces.et_in, words_in, "w_in"),
                              (w_rec, traces.et_rec, words_rec, "w_rec")):
        col_live = np.abs(et) >= ctx.skip_threshold_raw
        active = row_live[:, None] & col_live[None, :]
        n_cols = et.size
        stats.candidates += n_rec * n_cols
        stats.skipped_ste += int((~row_live).sum()) * n_cols
        stats.skipped_et += int(row_live.sum()) * int((~col_live).sum())
        stats.applied += int(active.sum())
        wc, ws = _count_words(active)
        stats.word_candidates += wc
        stats.word_skipped += ws
        delta = _to_update_acc(np.outer(post_term, et), frac, ctx.lr_shift)
        delta = np.where(active, delta, 0)
        if dense is not None:
            dense[key] = delta
        if words is None:
            words = np.zeros(delta.shape, dtype=np.uint32)
        new = _apply(w, delta, words)
        stats.nonzero_deltas += int((new != w).sum())
        out.append(new)
    return out[0], out[1], stats


def acc_to_float(delta_acc: np.ndarray) -> np.ndarray:
    """Q(24,16) raw update to weight-LSB units."""
    return delta_acc / float(1 << UPDATE_ACC.frac_bits)


TAG_OUT, TAG_IN, TAG_REC = 0, 1, 2


@dataclass
class Learner:
    """Per-run learning state: traces, STE LUT, context and counters.

    Stochastic rounding draws come from per-row xorshift32 streams seeded
    from ``(seed, update step, matrix tag, row)``; no per-synapse state is kept.
    """

    ctx: LearningContext
    lut: SteLut
    traces: EligibilityTraces
    seed: int = 0
    stats: UpdateStats = field(default_factory=UpdateStats)

    def reset_traces(self):
        self.traces = EligibilityTraces.zeros(self.traces.et_in.size, self.traces.et_rec.size,
                                              self.traces.alpha)

    def observe(self, in_map, rec_map):
        self.traces = update_traces(self.traces, in_map, rec_map)

    def words(self, step: int, weights):
        return (row_words(self.seed, step, TAG_OUT, weights.w_out.shape),
                row_words(self.seed, step, TAG_IN, weights.w_in.shape),
                row_words(self.seed, step, TAG_REC, weights.w_rec.shape))

    def update(self, weights, err: np.ndarray, v_pre: np.ndarray, theta: np.ndarray,
               gate: np.ndarray | None = None, dense: dict | None = None) -> UpdateStats:
        """Run phase 1 then phase 2 for one supervised timestep, in place on ``weights``."""
        words_out, words_in, words_rec = self.words(self.stats.update_steps, weights)
        err = gated_error(err, gate if self.ctx.gate_readout else None)
        ste = ste_eval(self.lut, v_pre, theta)
        w_out, post, s1 = phase1_output_updates(weights.w_out, self.ctx, self.traces, err, ste,
                                                words_out, dense)
        w_in, w_rec, s2 = phase2_hidden_updates(weights.w_in, weights.w_rec, post, self.traces,
                                                self.ctx, words_in, words_rec, dense)
        s1.merge(s2)
        if self.ctx.frozen:
            s1.nonzero_deltas = 0  # nothing is written
        else:
            weights.w_out, weights.w_in, weights.w_rec = w_out, w_in, w_rec
        self.stats.merge(s1)
        return s1
