"""Address-event streams, the delayed-cue navigation generator and readout decoding."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .fixedpoint import TARGET

ONE = 1 << TARGET.frac_bits


class ConfigError(ValueError):
    pass


class ContractError(ValueError):
    pass


@dataclass
class EventStream:
    """Address events as parallel ``timestep`` (uint32) / ``channel`` (uint16) arrays.

    Events are sorted by timestep; order within a timestep is preserved.
    """

    t: np.ndarray
    ch: np.ndarray
    n_channels: int
    n_steps: int
    dt_us: int = 1000

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.uint32)
        self.ch = np.asarray(self.ch, dtype=np.uint16)
        if self.t.shape != self.ch.shape:
            raise ValueError("timestep and channel arrays differ in length")
        if self.t.size:
            if np.any(np.diff(self.t.astype(np.int64)) < 0):
                raise ValueError("events are not sorted by timestep")
            if int(self.t[-1]) >= self.n_steps:
                raise ValueError("event timestep beyond n_steps")
            if int(self.ch.max()) >= self.n_channels:
                raise ValueError("event channel beyond n_channels")
        self._starts = None

    @property
    def dt(self) -> float:
        return self.dt_us * 1e-6

    def __len__(self):
        return int(self.t.size)

    def __eq__(self, other):
        if not isinstance(other, EventStream):
            return NotImplemented
        return (self.n_channels == other.n_channels and self.n_steps == other.n_steps
                and self.dt_us == other.dt_us and np.array_equal(self.t, other.t)
                and np.array_equal(self.ch, other.ch))

    def channels_at(self, step: int) -> np.ndarray:
        if self._starts is None:
            self._starts = np.searchsorted(self.t, np.arange(self.n_steps + 1), side="left")
        return self.ch[self._starts[step]:self._starts[step + 1]]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.array([self.n_channels, self.n_steps, self.dt_us], dtype=np.int64).tobytes())
        h.update(self.t.tobytes())
        h.update(self.ch.tobytes())
        return h.hexdigest()


def bin_events(stream: EventStream, step: int) -> np.ndarray:
    """Binary map of the channels with at least one event at ``step``."""
    if not 0 <= step < stream.n_steps:
        raise ContractError(f"step {step} outside [0, {stream.n_steps})")
    m = np.zeros(stream.n_channels, dtype=bool)
    m[stream.channels_at(step)] = True
    return m


def bin_timestamps(times_us, channels, dt_us: int, n_channels: int, n_steps: int | None = None):
    """Convert microsecond-timestamped events into a timestep stream."""
    times = np.asarray(times_us, dtype=np.int64)
    steps = times // int(dt_us)
    order = np.argsort(steps, kind="stable")
    steps = steps[order]
    ch = np.asarray(channels, dtype=np.int64)[order]
    if n_steps is None:
        n_steps = int(steps[-1]) + 1 if steps.size else 0
    keep = steps < n_steps
    return EventStream(steps[keep], ch[keep], n_channels, n_steps, int(dt_us))


@dataclass
class NavTrialParams:
    """Delayed-cue navigation layout. Channels: left, right, recall, noise groups."""

    n_cues: int = 7
    cue_steps: int = 100
    gap_steps: int = 50
    delay_steps: int = 1050
    recall_steps: int = 150
    group_size: int = 10
    cue_rate: float = 0.04
    noise_rate: float = 0.01
    recall_rate: float = 0.04
    dt_us: int = 1000

    def __post_init__(self):
        for name in ("cue_steps", "recall_steps", "group_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("n_cues", "gap_steps", "delay_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("cue_rate", "noise_rate", "recall_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be a probability")
        if self.n_cues % 2 == 0:
            raise ConfigError("n_cues must be odd so the majority is never tied")
        if 4 * self.group_size > 256:
            raise ConfigError("channel groups exceed the 256-channel address space")

    @property
    def n_channels(self) -> int:
        return 4 * self.group_size

    @property
    def n_steps(self) -> int:
        return self.n_cues * (self.cue_steps + self.gap_steps) + self.delay_steps + self.recall_steps

    @property
    def recall_start(self) -> int:
        return self.n_steps - self.recall_steps

    def group(self, name: str) -> np.ndarray:
        i = ("left", "right", "recall", "noise").index(name)
        return np.arange(i * self.group_size, (i + 1) * self.group_size)


@dataclass
class SupervisedTrial:
    stream: EventStream
    targets: np.ndarray  # (n_steps, n_out) Q(16,14) raw
    mask: np.ndarray  # (n_steps,) bool
    label: int
    cues: list = field(default_factory=list)

    @property
    def window(self) -> np.ndarray:
        return np.flatnonzero(self.mask)


def gen_navigation_trial(params: NavTrialParams, seed: int, cues=None) -> SupervisedTrial:
    """One trial, fully determined by ``(params, seed)``.

    ``cues`` optionally forces the cue sides (0 = left, 1 = right).
    Label 0 means the left side had the majority of cues.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    n_steps = params.n_steps
    if cues is None:
        cues = rng.integers(0, 2, size=params.n_cues)
    else:
        cues = np.asarray(cues, dtype=np.int64)
        if cues.size != params.n_cues:
            raise ConfigError(f"expected {params.n_cues} cues, got {cues.size}")
        rng.integers(0, 2, size=params.n_cues)  # keep the stream aligned with the random case
    label = int(cues.sum() * 2 > params.n_cues)

    rate = np.zeros((n_steps, params.n_channels))
    rate[:, params.group("noise")] = params.noise_rate
    period = params.cue_steps + params.gap_steps
    for c, side in enumerate(cues):
        start = c * period
        chans = params.group("left" if side == 0 else "right")
        rate[start:start + params.cue_steps, chans[0]:chans[-1] + 1] = params.cue_rate
    rs = params.recall_start
    rec = params.group("recall")
    rate[rs:, rec[0]:rec[-1] + 1] = params.recall_rate

    spikes = rng.random((n_steps, params.n_channels)) < rate
    t, ch = np.nonzero(spikes)  # row-major: sorted by step, then channel
    stream = EventStream(t, ch, params.n_channels, n_steps, params.dt_us)

    targets = np.zeros((n_steps, 2), dtype=np.int64)
    mask = np.zeros(n_steps, dtype=bool)
    mask[rs:] = True
    targets[rs:, label] = ONE
    return SupervisedTrial(stream, targets, mask, label, [int(c) for c in cues])


def error_at_step(y_exposed: np.ndarray, trial: SupervisedTrial, step: int):
    """Masked output error ``y - y*`` in Q(16,14) raw, and whether ``step`` is supervised."""
    if not 0 <= step < trial.mask.size:
        raise ContractError(f"step {step} outside the trial")
    if not trial.mask[step]:
        return np.zeros_like(np.asarray(y_exposed, dtype=np.int64)), False
    return np.asarray(y_exposed, dtype=np.int64) - trial.targets[step], True


def decide(readouts) -> int:
    """Argmax of the per-output mean over the window; ties go to the lowest index."""
    r = np.asarray(readouts)
    if r.ndim != 2 or r.shape[0] == 0:
        raise ContractError("decide needs at least one readout sample")
    # Integer sums keep the comparison exact; equal means give equal sums.
    return int(np.argmax(r.sum(axis=0)))
