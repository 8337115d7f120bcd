"""Self-check suite behind ``reckon validate``.

Each check returns a :class:`Check`; :func:`run_all` bundles them into a
machine-readable report. Instances are drawn from fixed seeds so the report
is reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .eprop import EligibilityTraces, Learner, LearningContext, SteLut
from .fixedpoint import UPDATE_ACC, XorshiftLanes, stochastic_round_array
from .loop import run_trial
from .oracle import FloatNet, bptt_grads, compare, float_eprop_grads, loss, replay
from .snn import LifState, Network, NetworkConfig, Weights, integrate, memory_report, step_lif
from .task import EventStream, NavTrialParams, SupervisedTrial, gen_navigation_trial

# Mean e-prop/BPTT cosine over the navigation-mini batch, measured once
# (0.688 for 20 instances) and frozen with a small margin.
GENERIC_COSINE_BOUND = 0.65

EXACTNESS_TOL = 1e-9
FD_TOL = 1e-5
SIGN_AGREEMENT_MIN = 0.95
NEGLIGIBLE_FRAC = 1e-2  # fidelity ignores entries below this fraction of the set's largest magnitude
ROUNDING_TOL = 0.02
MEMORY_OVERHEAD_MAX = 0.01
SRAM_TARGET_BYTES = 138_000


@dataclass
class Check:
    name: str
    passed: bool
    metrics: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"name": self.name, "passed": bool(self.passed), **self.metrics}


# --- oracle checks --------------------------------------------------------------


def _random_float_net(rng, n_in, n_rec, n_out, w_rec_std):
    return FloatNet(rng.normal(0, 0.6, (n_rec, n_in)), rng.normal(0, w_rec_std, (n_rec, n_rec)),
                    rng.normal(0, 1.0, (n_out, n_rec)), rng.uniform(0.8, 0.99, n_rec), 1.0, 0.9)


def _active_instance(rng, w_rec_std, n_rec, n_steps):
    """Redraw until every gradient block is nonzero, so relative errors are defined."""
    while True:
        net = _random_float_net(rng, 6, n_rec, 2, w_rec_std)
        x, tg, m = _random_task(rng, n_steps, 6, 2)
        g = bptt_grads(net, x, tg, m)
        if all(np.any(g[k] != 0) for k in g):
            return net, x, tg, m, g


def _random_task(rng, T, n_in, n_out, rate=0.3):
    x = (rng.random((T, n_in)) < rate).astype(float)
    targets = np.zeros((T, n_out))
    mask = np.zeros(T, dtype=bool)
    mask[T // 2:] = True
    targets[T // 2:, rng.integers(n_out)] = 1.0
    return x, targets, mask


def check_exactness(n_instances: int = 10, n_rec: int = 8, n_steps: int = 50, seed: int = 0) -> Check:
    """W_rec = 0 with symmetric feedback: e-prop must equal BPTT."""
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(n_instances):
        net, x, tg, m, g = _active_instance(rng, 0.0, n_rec, n_steps)
        c = compare(float_eprop_grads(net, x, tg, m), g)
        errs.append(math.inf if c.max_rel_err is None else c.max_rel_err)
    worst = max(errs)
    return Check("oracle_exactness", worst <= EXACTNESS_TOL,
                 {"max_rel_err": worst, "tolerance": EXACTNESS_TOL, "instances": n_instances})


def check_finite_differences(n_instances: int = 3, h: float = 1e-5, seed: int = 1) -> Check:
    """BPTT readout gradients against central differences of the loss."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        net, x, tg, m, g = _active_instance(rng, 0.3, 8, 50)
        g = g["w_out"]
        fd = np.zeros_like(g)
        for idx in np.ndindex(*g.shape):
            old = net.w_out[idx]
            net.w_out[idx] = old + h
            lp = loss(net, x, tg, m)
            net.w_out[idx] = old - h
            lm = loss(net, x, tg, m)
            net.w_out[idx] = old
            fd[idx] = (lp - lm) / (2 * h)
        worst = max(worst, float(np.max(np.abs(fd - g)) / np.max(np.abs(g))))
    return Check("bptt_finite_differences", worst <= FD_TOL,
                 {"max_rel_err": worst, "tolerance": FD_TOL, "instances": n_instances})


def mirrored_run(seed: int, n_rec: int = 16, n_in: int = 16, n_steps: int = 200):
    """One 16-neuron run of the quantized engine in shadow mode plus float e-prop on its trajectory.

    Returns ``(engine_grads, float_grads)``; engine grads are the summed
    pre-rounding updates, negated so both point along the gradient.
    """
    rng = np.random.default_rng(seed)
    cfg = NetworkConfig(n_in=n_in, n_rec=n_rec, n_out=2, tau_mem_ms=100.0, theta=4.0, tau_out_ms=20.0)
    w = Weights(rng.integers(-16, 49, (n_rec, n_in)), rng.integers(-24, 25, (n_rec, n_rec)),
                rng.integers(-6, 7, (2, n_rec)))
    t, ch = np.nonzero(rng.random((n_steps, n_in)) < 0.08)
    label = int(seed % 2)
    targets = np.zeros((n_steps, 2), dtype=np.int64)
    mask = np.zeros(n_steps, dtype=bool)
    mask[3 * n_steps // 4:] = True
    targets[mask, label] = 1 << 14
    trial = SupervisedTrial(EventStream(t, ch, n_in, n_steps), targets, mask, label)

    theta = int(cfg.theta_raw()[0])
    learner = Learner(LearningContext(lr_shift=8, lr_out_shift=8), SteLut.triangular(theta),
                      EligibilityTraces.for_tau(n_in, n_rec, 100.0), seed=seed)
    dense = {}
    run_trial(Network(cfg, w.copy()), trial, learner, dense=dense, shadow=True)
    rec = {}
    run_trial(Network(cfg, w.copy()), trial, None, engine="reference", record=rec)

    scale = 1 << cfg.weight_shift
    fn = FloatNet(w.w_in * scale, w.w_rec * scale, w.w_out * scale, cfg.alpha_raw() / 32768.0,
                  cfg.theta_raw().astype(float), cfg.alpha_out_raw() / 32768.0,
                  slope=1 / 1024.0, half_width=float(theta))
    traj = replay(fn, np.array(rec["in_map"]), np.array(rec["rec_map"]), np.array(rec["v_pre"]),
                  np.array(rec["y"]), targets / 16384.0, mask)
    g = float_eprop_grads(fn, None, None, mask, filtered=False,
                          alpha_et=learner.traces.alpha / 32768.0, error_slope=False, trajectory=traj)
    q = {k: -dense[k].astype(float) for k in dense}
    return q, g


def drop_negligible(grads: dict, frac: float = NEGLIGIBLE_FRAC) -> dict:
    """Zero entries smaller than ``frac`` times the largest magnitude across all blocks."""
    top = max(float(np.max(np.abs(g))) for g in grads.values())
    return {k: np.where(np.abs(g) >= frac * top, g, 0.0) for k, g in grads.items()}


def check_quantized_fidelity(n_instances: int = 10, seed: int = 100, max_tries: int = 50) -> Check:
    """Sign agreement on ``n_instances`` runs that produce any update at all."""
    agreements = []
    raw_agreements = []
    cosines = []
    degenerate = 0
    for i in range(max_tries):
        if len(agreements) == n_instances:
            break
        q, g = mirrored_run(seed + i)
        c = compare(drop_negligible(q), drop_negligible(g))
        if c.degenerate or c.sign_agreement is None:
            degenerate += 1  # silent network or saturated readout: nothing to compare
            continue
        agreements.append(c.sign_agreement)
        cosines.append(c.cosine)
        raw_agreements.append(compare(q, g).sign_agreement)
    ok = len(agreements) == n_instances and min(agreements) >= SIGN_AGREEMENT_MIN
    return Check("quantized_fidelity", ok, {
        "min_sign_agreement": min(agreements) if agreements else None,
        "mean_sign_agreement": float(np.mean(agreements)) if agreements else None,
        "mean_cosine": float(np.mean(cosines)) if cosines else None,
        "min_sign_agreement_all_entries": min(raw_agreements) if raw_agreements else None,
        "threshold": SIGN_AGREEMENT_MIN, "negligible_frac": NEGLIGIBLE_FRAC, "instances": n_instances, "degenerate": degenerate})


NAV_MINI = NavTrialParams(n_cues=3, cue_steps=20, gap_steps=10, delay_steps=50, recall_steps=40,
                          group_size=4, cue_rate=0.2, noise_rate=0.05, recall_rate=0.2)


def nav_mini_instance(i: int, n_rec: int = 16, w_rec_std: float = 0.05, tau: float = 20.0,
                      half_width: float = 1.0):
    """Float net and consumed input maps for navigation-mini instance ``i``."""
    p = NAV_MINI
    rng = np.random.default_rng(1000 + i)
    trial = gen_navigation_trial(p, i)
    x = np.zeros((p.n_steps, p.n_channels))
    # events buffered at t are consumed at t + 1
    keep = trial.stream.t.astype(np.int64) + 1 < p.n_steps
    x[trial.stream.t[keep].astype(np.int64) + 1, trial.stream.ch[keep].astype(np.int64)] = 1.0
    net = FloatNet(rng.normal(0, 0.5, (n_rec, p.n_channels)), rng.normal(0, w_rec_std, (n_rec, n_rec)),
                   rng.normal(0, 0.5, (2, n_rec)), math.exp(-1 / tau), 1.0, math.exp(-1 / 20.0),
                   half_width=half_width)
    return net, x, trial.targets / 16384.0, trial.mask


def check_generic_cosine(n_instances: int = 20) -> Check:
    cos = []
    agree = []
    for i in range(n_instances):
        net, x, tg, m = nav_mini_instance(i)
        c = compare(float_eprop_grads(net, x, tg, m), bptt_grads(net, x, tg, m))
        if not c.degenerate:
            cos.append(c.cosine)
            agree.append(c.sign_agreement)
    mean = float(np.mean(cos)) if cos else None
    return Check("generic_recurrent_cosine", mean is not None and mean >= GENERIC_COSINE_BOUND, {
        "mean_cosine": mean, "median_cosine": float(np.median(cos)) if cos else None,
        "mean_sign_agreement": float(np.mean(agree)) if agree else None,
        "bound": GENERIC_COSINE_BOUND, "instances": n_instances})


# --- engine checks --------------------------------------------------------------


def check_stochastic_rounding(n_draws: int = 100_000, values=(2.25, -0.5, 0.3), seed: int = 7) -> Check:
    frac = UPDATE_ACC.frac_bits
    out = {}
    ok = True
    for tag, v in enumerate(values):
        wide = np.full(n_draws, int(math.floor(v * (1 << frac))), dtype=np.int64)
        words = XorshiftLanes((n_draws,), seed, tag).next()
        mean = float(stochastic_round_array(wide, frac, words).mean())
        rel = abs(mean - v) / abs(v)
        out[repr(v)] = {"mean": mean, "rel_err": rel}
        ok &= rel <= ROUNDING_TOL
    return Check("stochastic_rounding", ok, {"values": out, "tolerance": ROUNDING_TOL, "draws": n_draws})


def check_step_order() -> Check:
    """One neuron crossing threshold: reset must precede decay."""
    cfg = NetworkConfig(n_in=1, n_rec=1, n_out=1, tau_mem_ms=1 / math.log(2), theta=1.0)
    state = LifState.initial(cfg)
    w_in = np.array([[24]])  # 24 << 4 = 384 raw = 1.5
    state, z, _ = step_lif(state, w_in, np.zeros((1, 1), np.int64), np.array([True]),
                           np.array([False]), cfg.weight_shift)
    expected = 64  # (1.5 - 1.0) * 0.5 = 0.25
    wrong = (384 * 16384 >> 15) - 256  # decay then reset
    v = int(state.v[0])
    return Check("step_order", bool(z[0]) and v == expected,
                 {"v_after": v, "expected": expected, "decay_before_reset_would_give": wrong})


def check_sparsity_equivalence(n_instances: int = 5, n_steps: int = 100, seed: int = 3) -> Check:
    rng = np.random.default_rng(seed)
    ok = True
    for _ in range(n_instances):
        n_in, n_rec = 12, 16
        w_in = rng.integers(-127, 128, (n_rec, n_in))
        w_rec = rng.integers(-127, 128, (n_rec, n_rec))
        v = np.zeros(n_rec, dtype=np.int64)
        for _ in range(n_steps):
            xin = rng.random(n_in) < 0.2
            zr = rng.random(n_rec) < 0.2
            sparse, _ = integrate(v, w_in, w_rec, xin, zr, 4)
            dense = np.clip(v + ((w_in @ xin.astype(np.int64) + w_rec @ zr.astype(np.int64)) << 4),
                            -32768, 32767)
            ok &= bool(np.array_equal(sparse, dense))
            v = sparse // 2
    return Check("sparsity_equivalence", ok, {"instances": n_instances, "steps": n_steps})


def check_kernel_equivalence(seed: int = 5) -> Check:
    p = NavTrialParams(n_cues=3, cue_steps=20, gap_steps=10, delay_steps=30, recall_steps=40)
    cfg = NetworkConfig(n_in=p.n_channels, n_rec=32, n_out=2, tau_mem_ms=200.0, theta=2.0)
    w0 = Weights.random(cfg, seed, 32)
    res = []
    for engine in ("kernel", "reference"):
        net = Network(cfg, w0.copy())
        learner = Learner(LearningContext(lr_shift=6, reg=0.05, f_target=1.0),
                          SteLut.triangular(int(cfg.theta_raw()[0])),
                          EligibilityTraces.for_tau(cfg.n_in, cfg.n_rec, 200.0), seed=seed)
        outs = [run_trial(net, gen_navigation_trial(p, seed + k), learner, engine=engine)
                for k in range(2)]
        res.append((net.weights, learner.stats, outs))
    (wa, sa, oa), (wb, sb, ob) = res
    same_w = all(np.array_equal(getattr(wa, k), getattr(wb, k)) for k in ("w_in", "w_rec", "w_out"))
    same_r = all(np.array_equal(a.readouts, b.readouts) and a.sop == b.sop and a.spikes == b.spikes
                 for a, b in zip(oa, ob))
    return Check("kernel_equivalence", same_w and same_r and sa == sb,
                 {"weights_equal": same_w, "readouts_equal": same_r, "stats_equal": sa == sb,
                  "nonzero_deltas": sa.nonzero_deltas})


def check_memory() -> Check:
    cfg = NetworkConfig(n_in=256, n_rec=256, n_out=16)
    m = memory_report(cfg)
    total_err = abs(m.total_bytes - SRAM_TARGET_BYTES) / SRAM_TARGET_BYTES
    ok = m.overhead_ratio <= MEMORY_OVERHEAD_MAX and total_err <= 0.05
    return Check("memory_model", ok, {"overhead_ratio": m.overhead_ratio, "total_bytes": m.total_bytes,
                                      "total_rel_err_vs_138kB": total_err, **{"regions": m.as_dict()}})


CHECKS = {
    "oracle_exactness": check_exactness,
    "bptt_finite_differences": check_finite_differences,
    "quantized_fidelity": check_quantized_fidelity,
    "generic_recurrent_cosine": check_generic_cosine,
    "stochastic_rounding": check_stochastic_rounding,
    "step_order": check_step_order,
    "sparsity_equivalence": check_sparsity_equivalence,
    "kernel_equivalence": check_kernel_equivalence,
    "memory_model": check_memory,
}


def run_all(only=None) -> dict:
    names = list(CHECKS) if not only else list(only)
    checks = [CHECKS[n]() for n in names]
    return {"passed": all(c.passed for c in checks), "checks": [c.as_dict() for c in checks]}
