"""Running one trial through the network, optionally learning online."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .eprop import Learner, UpdateStats
from .snn import Network, hard_sigmoid_gate
from .task import SupervisedTrial, decide, error_at_step


@dataclass
class TrialResult:
    decision: int
    label: int
    readouts: np.ndarray  # exposed readout over the decision window, Q(16,14) raw
    loss: float
    sop: int
    spikes: int

    @property
    def correct(self) -> bool:
        return self.decision == self.label


def _window_end(trial: SupervisedTrial, decision_window: float) -> int:
    window = trial.window
    if not window.size:
        return -1
    n_keep = max(1, int(np.ceil(decision_window * window.size)))
    return int(window[min(n_keep, window.size) - 1])


def run_trial(net: Network, trial: SupervisedTrial, learner: Learner | None = None,
              decision_window: float = 1.0, engine: str = "kernel", record=None,
              dense_step: int = -1, dense: dict | None = None,
              shadow: bool = False) -> TrialResult:
    """Simulate ``trial`` from a reset state.

    Events at step ``t`` are buffered during ``t`` and integrated at ``t + 1``.
    With a ``learner``, weights are updated in place at every supervised
    step. ``decision_window`` keeps only the leading fraction of the
    supervised window for the decision. ``engine`` picks the compiled kernel
    or the step-by-step reference path; both give identical results.

    ``dense`` receives the pre-rounding Q(24,16) updates: those of step
    ``dense_step``, or with ``shadow`` the sum over all supervised steps
    while the weights stay frozen (kernel only).
    """
    if shadow and (dense is None or engine != "kernel"):
        raise ValueError("shadow mode needs the kernel engine and a dense dict")
    if engine == "kernel" and record is None:
        return _run_kernel(net, trial, learner, decision_window, dense_step, dense, shadow)
    if engine not in ("kernel", "reference"):
        raise ValueError(f"unknown engine {engine!r}")
    return _run_reference(net, trial, learner, decision_window, record, dense_step, dense)


def _run_reference(net, trial, learner, decision_window, record, dense_step, dense):
    net.reset()
    if learner is not None:
        learner.reset_traces()
    stream = trial.stream
    n_steps = stream.n_steps
    keep_until = _window_end(trial, decision_window)
    samples = []
    sq = 0.0
    spikes = 0
    pending = stream.channels_at(0) if n_steps else ()
    for t in range(n_steps):
        in_map, rec_map = net.step(pending)
        pending = stream.channels_at(t + 1) if t + 1 < n_steps else ()
        spikes += int(rec_map.sum())
        if learner is not None:
            learner.observe(in_map, rec_map)
        y = net.readout.exposed()
        if trial.mask[t]:
            if t <= keep_until:
                samples.append(y)
            err, _ = error_at_step(y, trial, t)
            sq += float(np.sum((err / 16384.0) ** 2))
            if learner is not None:
                gate = hard_sigmoid_gate(net.readout.y) if net.cfg.hard_sigmoid else None
                learner.update(net.weights, err, net.lif.v_pre, net.lif.theta, gate,
                               dense=dense if t == dense_step else None)
                if not net.cfg.self_recurrence:
                    np.fill_diagonal(net.weights.w_rec, 0)
        if record is not None:
            record.setdefault("in_map", []).append(in_map)
            record.setdefault("rec_map", []).append(rec_map)
            record.setdefault("v_pre", []).append(net.lif.v_pre.copy())
            record.setdefault("y", []).append(net.readout.y.copy())
            if learner is not None:
                record.setdefault("et_in", []).append(learner.traces.et_in.copy())
                record.setdefault("et_rec", []).append(learner.traces.et_rec.copy())
    readouts = np.array(samples, dtype=np.int64).reshape(-1, net.cfg.n_out)
    decision = decide(readouts) if readouts.size else 0
    return TrialResult(decision, trial.label, readouts, sq / max(1, trial.window.size),
                       net.sop_count, spikes)


def _run_kernel(net, trial, learner, decision_window, dense_step, dense, shadow=False):
    from .kernel import N_STATS, run_trial_kernel

    cfg = net.cfg
    w = net.weights
    stream = trial.stream
    n_steps = stream.n_steps
    starts = np.searchsorted(stream.t, np.arange(n_steps + 2), side="left").astype(np.int64)
    chans = stream.ch.astype(np.int64)
    keep_until = _window_end(trial, decision_window)
    readouts = np.zeros((max(1, int(trial.mask.sum())), cfg.n_out), dtype=np.int64)
    stats = np.zeros(N_STATS, dtype=np.int64)
    net.reset()
    lif = net.lif
    learn = learner is not None
    if learn:
        ctx = learner.ctx
        lut = learner.lut
        seed, step0 = learner.seed & 0xFFFFFFFF, learner.stats.update_steps
        b_fixed = (ctx.feedback_matrix(w.w_out).astype(np.int64) if ctx.feedback == "random-fixed"
                   else np.zeros((cfg.n_rec, cfg.n_out), dtype=np.int64))
        args = (learner.traces.alpha, np.asarray(lut.bounds, dtype=np.int64),
                np.asarray(lut.values, dtype=np.int64), ctx.lr_shift, ctx.lr_out_shift,
                ctx.reg_raw, ctx.f_target_raw, float(ctx.skip_threshold_raw),
                ctx.feedback == "random-fixed", b_fixed, ctx.gate_readout)
    else:
        seed, step0 = 0, 0
        args = (1, np.zeros(4, np.int64), np.zeros(5, np.int64), 0, 0, 0, 0, 0.0, False,
                np.zeros((cfg.n_rec, cfg.n_out), np.int64), False)
    if learn and learner.ctx.frozen and not shadow:
        # shadow mode never touches the weights; the captured sums are discarded
        shadow, dense, dense_step = True, None, -1
    if dense is not None or shadow:
        d_in = np.zeros(w.w_in.shape, np.int64)
        d_rec = np.zeros(w.w_rec.shape, np.int64)
        d_out = np.zeros(w.w_out.shape, np.int64)
    else:
        d_in = d_rec = d_out = np.zeros((1, 1), np.int64)
    n_samples, sq, sop, spikes = run_trial_kernel(
        starts, chans, n_steps, w.w_in, w.w_rec, w.w_out, lif.alpha, lif.theta,
        net.readout.alpha, cfg.weight_shift, cfg.hard_sigmoid, learn, *args,
        not cfg.self_recurrence, seed, step0,
        trial.targets.astype(np.int64), trial.mask, keep_until, readouts, stats,
        d_in, d_rec, d_out, dense_step, shadow)
    net.sop_count = int(sop)
    if learn:
        s = UpdateStats(*(int(x) for x in stats))
        learner.stats.merge(s)
    if dense is not None and (dense_step >= 0 or shadow):
        dense.update(w_in=d_in, w_rec=d_rec, w_out=d_out)
    readouts = readouts[:n_samples]
    decision = decide(readouts) if n_samples else 0
    return TrialResult(decision, trial.label, readouts, sq / max(1, trial.window.size),
                       int(sop), int(spikes))
