"""The compiled trial kernel against the step-by-step reference path."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reckon.eprop import EligibilityTraces, Learner, LearningContext, SteLut
from reckon.fixedpoint import row_words
from reckon.kernel import _row_seed, _smix, _xs
from reckon.loop import run_trial
from reckon.snn import Network, NetworkConfig, Weights
from reckon.task import NavTrialParams, gen_navigation_trial

P = NavTrialParams(n_cues=3, cue_steps=15, gap_steps=5, delay_steps=20, recall_steps=25,
                   group_size=3, cue_rate=0.3, noise_rate=0.05, recall_rate=0.3)


def _run(engine, seed, feedback, hard_sigmoid, self_rec, frozen, gate, n_trials=2):
    cfg = NetworkConfig(n_in=P.n_channels, n_rec=20, n_out=2, tau_mem_ms=50.0, theta=[1.0, 2.0] * 5,
                        hard_sigmoid=hard_sigmoid, self_recurrence=self_rec)
    net = Network(cfg, Weights.random(cfg, seed, 40))
    ctx = LearningContext(lr_shift=5, lr_out_shift=7, reg=0.1, f_target=0.5, feedback=feedback,
                          feedback_seed=seed, gate_readout=gate, frozen=frozen)
    learner = Learner(ctx, SteLut.triangular(384), EligibilityTraces.for_tau(cfg.n_in, 20, 40.0),
                      seed=seed)
    outs = [run_trial(net, gen_navigation_trial(P, seed + k), learner, engine=engine)
            for k in range(n_trials)]
    return net.weights, learner.stats, outs


@settings(max_examples=12, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["symmetric", "random-fixed"]), st.booleans(),
       st.booleans(), st.booleans(), st.booleans())
def test_kernel_is_bit_identical_to_reference(seed, feedback, hs, self_rec, frozen, gate):
    wa, sa, oa = _run("kernel", seed, feedback, hs, self_rec, frozen, gate)
    wb, sb, ob = _run("reference", seed, feedback, hs, self_rec, frozen, gate)
    for k in ("w_in", "w_rec", "w_out"):
        assert np.array_equal(getattr(wa, k), getattr(wb, k))
    assert sa == sb
    for a, b in zip(oa, ob):
        assert np.array_equal(a.readouts, b.readouts)
        assert (a.decision, a.sop, a.spikes) == (b.decision, b.sop, b.spikes)
        assert a.loss == pytest.approx(b.loss, rel=1e-12)


def test_inference_only_paths_agree():
    cfg = NetworkConfig(n_in=P.n_channels, n_rec=20, n_out=2, tau_mem_ms=50.0, theta=1.0)
    w = Weights.random(cfg, 1, 40)
    tr = gen_navigation_trial(P, 1)
    a = run_trial(Network(cfg, w.copy()), tr, engine="kernel", decision_window=0.5)
    b = run_trial(Network(cfg, w.copy()), tr, engine="reference", decision_window=0.5)
    assert np.array_equal(a.readouts, b.readouts) and a.readouts.shape[0] == 13


@pytest.mark.parametrize("seed,step,tag", [(0, 0, 0), (12345, 77, 2), (2**32 - 1, 10**6, 1)])
def test_kernel_row_streams_match_row_words(seed, step, tag):
    rows, cols = 5, 9
    ref = row_words(seed, step, tag, (rows, cols))
    mix = np.uint64(_smix(np.uint64(seed)))  # called from Python the result comes back as int
    key = np.uint64((step << 2) | tag)
    for j in range(rows):
        x = np.uint64(_row_seed(mix, key, np.uint64(j)))
        for i in range(cols):
            x = np.uint64(_xs(x))
            assert int(x) == int(ref[j, i])


def test_shadow_mode_leaves_weights():
    cfg = NetworkConfig(n_in=P.n_channels, n_rec=20, n_out=2, tau_mem_ms=50.0, theta=1.0)
    w = Weights.random(cfg, 2, 40)
    net = Network(cfg, w.copy())
    learner = Learner(LearningContext(lr_shift=5), SteLut.triangular(256),
                      EligibilityTraces.for_tau(cfg.n_in, 20, 50.0))
    dense = {}
    run_trial(net, gen_navigation_trial(P, 2), learner, dense=dense, shadow=True)
    assert np.array_equal(net.weights.w_rec, w.w_rec)
    assert set(dense) == {"w_in", "w_rec", "w_out"} and any(d.any() for d in dense.values())
    with pytest.raises(ValueError):
        run_trial(net, gen_navigation_trial(P, 2), learner, engine="reference", dense={}, shadow=True)
