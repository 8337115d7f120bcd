"""Training, evaluation and dataset generation.

Everything written under the output directory except ``timing.json`` is a
pure function of the resolved config, so two runs with the same config and
seed produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import aev
from .config import RunConfig
from .eprop import EligibilityTraces, Learner, LearningContext, SteLut, UpdateStats, skip_rate
from .loop import run_trial
from .snn import Network, NetworkConfig, Weights, memory_report
from .task import ConfigError, NavTrialParams, SupervisedTrial, decide, gen_navigation_trial

METRICS_VERSION = 1
CONVERGED_EPOCHS = 10

# seed streams
TRAIN, HELDOUT, GEN, LANES, INIT = range(5)


class HarnessIOError(OSError):
    """A file could not be read or written, or a checkpoint is malformed."""


def derive_seed(*words: int) -> int:
    return int(np.random.SeedSequence([int(w) for w in words]).generate_state(1, np.uint32)[0])


# --- checkpoints ------------------------------------------------------------

CKPT_MAGIC = b"RKCK"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sHHHH32s")


def encode_checkpoint(weights: Weights, net_hash: str) -> bytes:
    n_rec, n_in = weights.w_in.shape
    n_out = weights.w_out.shape[0]
    weights.check()
    head = _CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, n_in, n_rec, n_out, bytes.fromhex(net_hash))
    body = b"".join(getattr(weights, k).astype(np.int8).tobytes() for k in ("w_in", "w_rec", "w_out"))
    return head + body


def decode_checkpoint(data: bytes) -> tuple[Weights, str]:
    if len(data) < _CKPT_HEADER.size:
        raise HarnessIOError("checkpoint truncated")
    magic, version, n_in, n_rec, n_out, digest = _CKPT_HEADER.unpack_from(data)
    if magic != CKPT_MAGIC:
        raise HarnessIOError(f"not a checkpoint (magic {magic!r})")
    if version != CKPT_VERSION:
        raise HarnessIOError(f"unsupported checkpoint version {version}")
    sizes = (n_rec * n_in, n_rec * n_rec, n_out * n_rec)
    if len(data) != _CKPT_HEADER.size + sum(sizes):
        raise HarnessIOError("checkpoint size does not match its header")
    flat = np.frombuffer(data, dtype=np.int8, offset=_CKPT_HEADER.size).astype(np.int64)
    a, b = sizes[0], sizes[0] + sizes[1]
    w = Weights(flat[:a].reshape(n_rec, n_in), flat[a:b].reshape(n_rec, n_rec),
                flat[b:].reshape(n_out, n_rec))
    return w, digest.hex()


def save_checkpoint(path, weights: Weights, net_hash: str):
    _write_bytes(path, encode_checkpoint(weights, net_hash))


def load_checkpoint(path) -> tuple[Weights, str]:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise HarnessIOError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(data)


def _write_bytes(path, data: bytes):
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise HarnessIOError(f"cannot write {path}: {exc}") from exc


def _write_text(path, text: str):
    _write_bytes(path, text.encode("utf-8"))


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# --- building blocks from a config -------------------------------------------


def nav_params(cfg: RunConfig) -> NavTrialParams:
    return NavTrialParams(
        n_cues=cfg.n_cues, cue_steps=cfg.cue_steps, gap_steps=cfg.gap_steps,
        delay_steps=cfg.delay_steps, recall_steps=cfg.recall_steps, group_size=cfg.group_size,
        cue_rate=cfg.cue_rate, noise_rate=cfg.noise_rate, recall_rate=cfg.recall_rate,
        dt_us=cfg.dt_us)


def network_config(cfg: RunConfig, n_in: int) -> NetworkConfig:
    taus = cfg.float_list("tau_mem_ms")
    thetas = cfg.float_list("theta")
    try:
        net = NetworkConfig(
            n_in=n_in, n_rec=cfg.n_rec, n_out=cfg.n_out, dt_ms=cfg.dt_us / 1000.0,
            tau_mem_ms=taus[0] if len(taus) == 1 else taus,
            theta=thetas[0] if len(thetas) == 1 else thetas,
            tau_out_ms=cfg.tau_out_ms, hard_sigmoid=cfg.hard_sigmoid,
            weight_shift=cfg.weight_shift, self_recurrence=cfg.self_recurrence)
        net.alpha_raw()
        net.theta_raw()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return net


def make_learner(cfg: RunConfig, net: NetworkConfig) -> Learner:
    ctx = LearningContext(
        lr_shift=cfg.lr_shift, lr_out_shift=cfg.lr_out_shift, reg=cfg.reg, f_target=cfg.f_target,
        skip_threshold=cfg.skip_threshold, feedback=cfg.feedback, feedback_seed=cfg.feedback_seed,
        gate_readout=cfg.gate_readout, frozen=not cfg.learning)
    try:
        if cfg.ste_bounds:
            lut = SteLut(tuple(cfg.int_list("ste_bounds")), tuple(cfg.int_list("ste_values")))
        else:
            # one LUT for the whole array, centred on the median threshold
            lut = SteLut.triangular(int(np.median(net.theta_raw())), cfg.ste_width)
    except ValueError as exc:
        raise ConfigError(f"STE LUT: {exc}") from exc
    tau_et = cfg.tau_et_ms or float(np.mean(cfg.float_list("tau_mem_ms")))
    traces = EligibilityTraces.for_tau(net.n_in, net.n_rec, tau_et, net.dt_ms)
    return Learner(ctx, lut, traces, seed=derive_seed(cfg.seed, LANES))


def initial_weights(cfg: RunConfig, net: NetworkConfig) -> Weights:
    return Weights.random(net, derive_seed(cfg.seed, INIT), cfg.w0)


# --- trial sources -----------------------------------------------------------


def _label_from_targets(targets: np.ndarray, mask: np.ndarray) -> int:
    if not mask.any():
        raise ConfigError("AEV trial has no supervised steps")
    return int(np.argmax(targets[mask].sum(axis=0)))


def _rebin_trial(trial: SupervisedTrial, dt_us: int) -> SupervisedTrial:
    stream = aev.rebin(trial.stream, dt_us)
    if stream is trial.stream:
        return trial
    old = np.flatnonzero(trial.mask)
    new = old * trial.stream.dt_us // dt_us
    targets = np.zeros((stream.n_steps, trial.targets.shape[1]), dtype=np.int64)
    mask = np.zeros(stream.n_steps, dtype=bool)
    targets[new] = trial.targets[old]  # last source step of each bin wins
    mask[new] = True
    return SupervisedTrial(stream, targets, mask, trial.label, trial.cues)


def load_aev_trials(directory: str, dt_us: int | None = None) -> list:
    try:
        names = sorted(n for n in os.listdir(directory) if n.endswith(".aev"))
    except OSError as exc:
        raise HarnessIOError(f"cannot list {directory}: {exc}") from exc
    if not names:
        raise ConfigError(f"no .aev files in {directory}")
    trials = []
    for name in names:
        try:
            stream, n_out, targets, mask = aev.load_aev(os.path.join(directory, name))
        except OSError as exc:
            raise HarnessIOError(f"cannot read {name}: {exc}") from exc
        if targets is None:
            raise ConfigError(f"{name}: no target section")
        trial = SupervisedTrial(stream, targets, mask, _label_from_targets(targets, mask))
        if dt_us is not None:
            trial = _rebin_trial(trial, dt_us)
        trials.append(trial)
    return trials


@dataclass
class TrialSource:
    """Deterministic training and held-out trials for a config."""

    cfg: RunConfig
    n_channels: int = 0
    _train: list = field(default=None, repr=False)
    _heldout: list = field(default=None, repr=False)

    def __post_init__(self):
        cfg = self.cfg
        if cfg.task == "navigation":
            self.params = nav_params(cfg)
            self.n_channels = self.params.n_channels
        else:
            self._train = load_aev_trials(cfg.aev_train, cfg.dt_us)
            self._heldout = (load_aev_trials(cfg.aev_eval, cfg.dt_us) if cfg.aev_eval
                             else self._train)
            self.n_channels = max(t.stream.n_channels for t in self._train + self._heldout)
            n_out = {t.targets.shape[1] for t in self._train + self._heldout}
            if n_out != {cfg.n_out}:
                raise ConfigError(f"AEV targets have {sorted(n_out)} outputs, config n_out={cfg.n_out}")

    def train(self, epoch: int) -> list:
        cfg = self.cfg
        if cfg.task == "navigation":
            return [gen_navigation_trial(self.params, derive_seed(cfg.seed, TRAIN, epoch, i))
                    for i in range(cfg.trials_per_epoch)]
        rng = np.random.Generator(np.random.PCG64(derive_seed(cfg.seed, TRAIN, epoch)))
        order = rng.permutation(len(self._train))
        return [self._train[order[i % len(order)]] for i in range(cfg.trials_per_epoch)]

    def heldout(self) -> list:
        cfg = self.cfg
        if cfg.task == "navigation":
            return [gen_navigation_trial(self.params, derive_seed(cfg.seed, HELDOUT, 0, i))
                    for i in range(cfg.eval_trials)]
        return [self._heldout[i % len(self._heldout)] for i in range(cfg.eval_trials)]


def resolve_n_in(cfg: RunConfig, source: TrialSource) -> int:
    n_in = cfg.n_in or source.n_channels
    if n_in < source.n_channels:
        raise ConfigError(f"n_in={n_in} is smaller than the task's {source.n_channels} channels")
    return n_in


# --- evaluation ----------------------------------------------------------------


@dataclass
class EvalResult:
    accuracy: float
    loss: float
    latency: dict  # decision-window fraction -> accuracy
    sop: int
    n_trials: int


def _decide_prefix(readouts: np.ndarray, frac: float) -> int:
    n = max(1, int(np.ceil(frac * readouts.shape[0])))
    return decide(readouts[:n])


def evaluate(net_cfg: NetworkConfig, weights: Weights, trials: list, decision_window: float,
             latency_points=(), threads: int = 1) -> EvalResult:
    """Forward-only pass over ``trials``; weights are never modified."""
    if not trials:
        return EvalResult(0.0, 0.0, {f: 0.0 for f in latency_points}, 0, 0)

    def work(chunk):
        net = Network(net_cfg, weights.copy())
        out = []
        for tr in chunk:
            r = run_trial(net, tr, None, decision_window=1.0)
            out.append((r.readouts, r.label, r.loss, r.sop))
        return out

    if threads > 1:
        chunks = [trials[k::threads] for k in range(threads)]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, chunks))
        rows = [None] * len(trials)
        for k, part in enumerate(parts):
            rows[k::threads] = part
    else:
        rows = work(trials)
    fracs = sorted(set(latency_points) | {decision_window})
    correct = {f: 0 for f in fracs}
    loss = 0.0
    sop = 0
    for readouts, label, lo, s in rows:
        _check_finite(lo)
        loss += lo
        sop += s
        for f in fracs:
            correct[f] += int(_decide_prefix(readouts, f) == label)
    n = len(trials)
    return EvalResult(correct[decision_window] / n, loss / n,
                      {f: correct[f] / n for f in latency_points}, sop, n)


def _check_finite(x: float):
    if not np.isfinite(x):
        raise FloatingPointError(f"non-finite readout loss {x!r}")


# --- train ----------------------------------------------------------------------


def _stats_delta(after: UpdateStats, before: UpdateStats) -> UpdateStats:
    return UpdateStats(**{k: getattr(after, k) - getattr(before, k) for k in after.__dataclass_fields__})


def _safe_skip_rate(stats: UpdateStats):
    return skip_rate(stats) if stats.candidates else None


def _csv(rows, header) -> str:
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join("" if v is None else (repr(v) if isinstance(v, float) else str(v))
                              for v in r))
    return "\n".join(lines) + "\n"


def cmd_train(cfg: RunConfig, out_dir: str | None = None, log=None) -> dict:
    """Train from a seeded random init and write all artifacts. Returns the summary."""
    out_dir = out_dir or cfg.out
    t_start = time.perf_counter()
    source = TrialSource(cfg)
    n_in = resolve_n_in(cfg, source)
    net_cfg = network_config(cfg, n_in)
    net_hash = cfg.network_hash(n_in)
    weights = initial_weights(cfg, net_cfg)
    net = Network(net_cfg, weights)
    learner = make_learner(cfg, net_cfg)
    heldout = source.heldout()
    latency = cfg.float_list("latency_points")

    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise HarnessIOError(f"cannot create {out_dir}: {exc}") from exc
    _write_text(os.path.join(out_dir, "config.cfg"), cfg.dump())
    header = {
        "kind": "header", "version": METRICS_VERSION, "network_hash": net_hash,
        "n_in": n_in, "n_rec": net_cfg.n_rec, "n_out": net_cfg.n_out, "task": cfg.task,
        "seed": cfg.seed, "epochs": cfg.epochs, "trials_per_epoch": cfg.trials_per_epoch,
    }
    lines = [_dumps(header)]
    records = []
    epoch_times = []
    best_loss = np.inf
    since_best = 0
    stopped_early = False
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        before = UpdateStats()
        before.merge(learner.stats)
        correct = 0
        loss = 0.0
        sop = 0
        spikes = 0
        trials = source.train(epoch)
        for tr in trials:
            r = run_trial(net, tr, learner, decision_window=cfg.decision_window)
            _check_finite(r.loss)
            correct += int(r.correct)
            loss += r.loss
            sop += r.sop
            spikes += r.spikes
        n = max(1, len(trials))
        upd = _stats_delta(learner.stats, before)
        rec = {
            "kind": "epoch", "epoch": epoch, "accuracy": correct / n, "loss": loss / n,
            "skip_rate": _safe_skip_rate(upd), "sop": sop, "spikes": spikes,
            "updates": upd.as_dict(),
        }
        if cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
            rec["heldout_accuracy"] = evaluate(net_cfg, net.weights, heldout, cfg.decision_window,
                                               (), cfg.threads).accuracy
        records.append(rec)
        lines.append(_dumps(rec))
        epoch_times.append(time.perf_counter() - t0)
        if log:
            log(f"epoch {epoch}: acc={rec['accuracy']:.3f} loss={rec['loss']:.4f} "
                f"skip={rec['skip_rate'] if rec['skip_rate'] is None else round(rec['skip_rate'], 3)}"
                + (f" heldout={rec['heldout_accuracy']:.3f}" if "heldout_accuracy" in rec else ""))
        if rec["loss"] < best_loss:
            best_loss = rec["loss"]
            since_best = 0
        else:
            since_best += 1
        if cfg.patience and since_best >= cfg.patience:
            stopped_early = True
            break

    _write_text(os.path.join(out_dir, "metrics.jsonl"), "\n".join(lines) + "\n")
    save_checkpoint(os.path.join(out_dir, "checkpoint.rkw"), net.weights, net_hash)

    ev = evaluate(net_cfg, net.weights, heldout, cfg.decision_window, latency, cfg.threads)
    tail = UpdateStats()
    for rec in records[-CONVERGED_EPOCHS:]:
        tail.merge(UpdateStats(**rec["updates"]))
    summary = {
        "network_hash": net_hash,
        "epochs_run": len(records),
        "stopped_early": stopped_early,
        "heldout_accuracy": ev.accuracy,
        "heldout_loss": ev.loss,
        "heldout_trials": ev.n_trials,
        "decision_window": cfg.decision_window,
        "latency_accuracy": {repr(k): v for k, v in ev.latency.items()},
        "skip_rate_converged": _safe_skip_rate(tail),
        "skip_rate_total": _safe_skip_rate(learner.stats),
        "updates_total": learner.stats.as_dict(),
        "memory_report": memory_report(net_cfg, learning=True).as_dict(),
    }
    _write_text(os.path.join(out_dir, "summary.json"), json.dumps(summary, sort_keys=True, indent=2) + "\n")
    _write_text(os.path.join(out_dir, "accuracy_vs_epoch.csv"),
                _csv([(r["epoch"], r["accuracy"], r.get("heldout_accuracy"), r["loss"]) for r in records],
                     ["epoch", "train_accuracy", "heldout_accuracy", "loss"]))
    _write_text(os.path.join(out_dir, "skip_rate_vs_epoch.csv"),
                _csv([(r["epoch"], r["skip_rate"]) for r in records], ["epoch", "skip_rate"]))
    _write_text(os.path.join(out_dir, "accuracy_vs_latency.csv"),
                _csv([(f, ev.latency[f]) for f in latency], ["decision_window", "accuracy"]))
    timing = {"wall_s": time.perf_counter() - t_start, "epoch_s": epoch_times}
    _write_text(os.path.join(out_dir, "timing.json"), json.dumps(timing, indent=2) + "\n")
    return summary


# --- eval -----------------------------------------------------------------------


def cmd_eval(cfg: RunConfig, checkpoint: str, out_dir: str | None = None) -> dict:
    """Forward-only evaluation of a checkpoint on the held-out trials."""
    source = TrialSource(cfg)
    n_in = resolve_n_in(cfg, source)
    net_cfg = network_config(cfg, n_in)
    weights, digest = load_checkpoint(checkpoint)
    expected = cfg.network_hash(n_in)
    if digest != expected:
        raise ConfigError(f"checkpoint was trained with a different network config "
                          f"(hash {digest[:12]}, config gives {expected[:12]})")
    if weights.w_in.shape != (net_cfg.n_rec, n_in) or weights.w_out.shape[0] != net_cfg.n_out:
        raise ConfigError("checkpoint shapes do not match the config")
    latency = cfg.float_list("latency_points")
    ev = evaluate(net_cfg, weights, source.heldout(), cfg.decision_window, latency, cfg.threads)
    result = {
        "network_hash": digest,
        "heldout_accuracy": ev.accuracy,
        "heldout_loss": ev.loss,
        "heldout_trials": ev.n_trials,
        "decision_window": cfg.decision_window,
        "latency_accuracy": {repr(k): v for k, v in ev.latency.items()},
        "sop": ev.sop,
        "memory_report": memory_report(net_cfg, learning=False).as_dict(),
    }
    if out_dir:
        try:
            os.makedirs(out_dir, exist_ok=True)
        except OSError as exc:
            raise HarnessIOError(f"cannot create {out_dir}: {exc}") from exc
        _write_text(os.path.join(out_dir, "eval.json"), json.dumps(result, sort_keys=True, indent=2) + "\n")
    return result


# --- gen ------------------------------------------------------------------------


def cmd_gen(cfg: RunConfig, n_trials: int, out_dir: str) -> dict:
    """Write ``n_trials`` navigation trials as AEV files plus ``manifest.json``."""
    params = nav_params(cfg)
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise HarnessIOError(f"cannot create {out_dir}: {exc}") from exc
    entries = []
    counts = [0, 0]
    for i in range(n_trials):
        seed = derive_seed(cfg.seed, GEN, 0, i)
        tr = gen_navigation_trial(params, seed)
        data = aev.encode(tr.stream, 2, tr.targets, tr.mask)
        name = f"trial_{i:06d}.aev"
        _write_bytes(os.path.join(out_dir, name), data)
        counts[tr.label] += 1
        entries.append({"file": name, "seed": seed, "label": tr.label,
                        "sha256": hashlib.sha256(data).hexdigest()})
    manifest = {
        "seed": cfg.seed, "n_trials": n_trials,
        "params": {k: getattr(params, k) for k in params.__dataclass_fields__},
        "label_counts": {"left": counts[0], "right": counts[1]},
        "trials": entries,
    }
    _write_text(os.path.join(out_dir, "manifest.json"), json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest
