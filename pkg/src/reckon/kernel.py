"""Compiled whole-trial kernel.

Same arithmetic as the step functions in :mod:`reckon.snn` and
:mod:`reckon.eprop`, fused into one loop over timesteps so a 2250-step trial
costs milliseconds. ``tests/test_kernel.py`` checks the two paths agree bit
for bit, weights and rounding draws included.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .fixedpoint import MEMBRANE, TARGET, TRACE, UPDATE_ACC, WEIGHT_MAX, WEIGHT_MIN

V_MIN, V_MAX = MEMBRANE.min_raw, MEMBRANE.max_raw
T_MIN, T_MAX = TRACE.min_raw, TRACE.max_raw
U_MIN, U_MAX = UPDATE_ACC.min_raw, UPDATE_ACC.max_raw
U_FRAC = UPDATE_ACC.frac_bits
TRACE_ONE = 1 << TRACE.frac_bits
TARGET_ONE = 1 << TARGET.frac_bits
HS_SCALE = 1 << (TARGET.frac_bits - MEMBRANE.frac_bits - 2)
E_SHIFT = TARGET.frac_bits - MEMBRANE.frac_bits
MASK32 = 0xFFFFFFFF
T_FRAC = TARGET.frac_bits
TR_FRAC = TRACE.frac_bits
WORD = 16

# stats slots
CAND, APPLIED, SKIP_ET, SKIP_STE, WORD_CAND, WORD_SKIP, NONZERO, STEPS = range(8)
N_STATS = 8


@njit(cache=True, inline="always")
def _clip(x, lo, hi):
    return lo if x < lo else (hi if x > hi else x)


@njit(cache=True, inline="always")
def _xs(x):
    x ^= (x << np.uint64(13)) & np.uint64(MASK32)
    x ^= x >> np.uint64(17)
    x ^= (x << np.uint64(5)) & np.uint64(MASK32)
    return x


GOLDEN = np.uint64(0x9E3779B97F4A7C15)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)


@njit(cache=True, inline="always")
def _smix(z):
    z = z + GOLDEN
    z = (z ^ (z >> np.uint64(30))) * MIX1
    z = (z ^ (z >> np.uint64(27))) * MIX2
    return z ^ (z >> np.uint64(31))


@njit(cache=True, inline="always")
def _row_seed(seed_mix, key, j):
    # same derivation as fixedpoint.row_stream_seeds
    s = _smix(_smix(seed_mix ^ key) ^ np.uint64(j)) & np.uint64(MASK32)
    if s == np.uint64(0):
        s = np.uint64(0x9E3779B9)
    return s


@njit(cache=True, inline="always")
def _to_acc(prod, k):
    neg = -prod
    out = neg >> k if k >= 0 else neg << (-k)
    return _clip(out, U_MIN, U_MAX)


@njit(cache=True)
def _update_matrix(w, seed_mix, key, row_term, et, row_live, thr, k, stats, dense, dense_mode):
    # dense_mode: 0 off, 1 capture this step's updates, 2 accumulate without applying
    rows, cols = w.shape
    col_live = np.empty(cols, np.bool_)
    n_dead_cols = 0
    for i in range(cols):
        col_live[i] = abs(et[i]) >= thr
        if not col_live[i]:
            n_dead_cols += 1
    n_words_row = (cols + WORD - 1) // WORD
    for j in range(rows):
        stats[CAND] += cols
        if not row_live[j]:
            stats[SKIP_STE] += cols
        else:
            stats[SKIP_ET] += n_dead_cols
            stats[APPLIED] += cols - n_dead_cols
        stats[WORD_CAND] += n_words_row
        for wd in range(n_words_row):
            alive = False
            if row_live[j]:
                for i in range(wd * WORD, min(cols, (wd + 1) * WORD)):
                    if col_live[i]:
                        alive = True
                        break
            if not alive:
                stats[WORD_SKIP] += 1
        x = _row_seed(seed_mix, key, j)
        for i in range(cols):
            x = _xs(x)
            d = 0
            if row_live[j] and col_live[i]:
                d = _to_acc(row_term[j] * et[i], k)
            if dense_mode == 1:
                dense[j, i] = d
            elif dense_mode == 2:
                dense[j, i] += d
                continue
            if d != 0:
                base = d >> U_FRAC
                frac = d & ((1 << U_FRAC) - 1)
                draw = np.int64(x >> np.uint64(32 - U_FRAC))
                if draw < frac:
                    base += 1
                nw = _clip(w[j, i] + base, WEIGHT_MIN, WEIGHT_MAX)
                if nw != w[j, i]:
                    stats[NONZERO] += 1
                w[j, i] = nw


@njit(cache=True, nogil=True)
def run_trial_kernel(starts, chans, n_steps, w_in, w_rec, w_out, alpha, theta, alpha_out,
                     wshift, hard_sig, learn, et_alpha, lut_bounds, lut_values,
                     lr_shift, lr_out_shift, reg_raw, f_raw, skip_thr, feedback_fixed, b_fixed,
                     gate_readout, zero_diag, seed, step0,
                     targets, mask, keep_until, readouts, stats, dense_in, dense_rec, dense_out,
                     dense_step, shadow):
    """Simulate one trial in place. Returns ``(n_samples, sq_err, sop, spikes)``.

    ``dense_step`` >= 0 captures the pre-rounding updates of that timestep
    into the ``dense_*`` arrays. With ``shadow`` the updates of every
    supervised step are summed into ``dense_*`` and never applied.
    """
    n_rec, n_in = w_in.shape
    n_out = w_out.shape[0]
    v = np.zeros(n_rec, np.int64)
    v_pre = np.zeros(n_rec, np.int64)
    y = np.zeros(n_out, np.int64)
    et_in = np.zeros(n_in, np.int64)
    et_rec = np.zeros(n_rec, np.int64)
    in_map = np.zeros(n_in, np.bool_)
    rec_map = np.zeros(n_rec, np.bool_)
    z = np.zeros(n_rec, np.bool_)
    acc = np.zeros(n_rec, np.int64)
    y_exp = np.zeros(n_out, np.int64)
    err = np.zeros(n_out, np.int64)
    ls = np.zeros(n_rec, np.int64)
    post = np.zeros(n_rec, np.int64)
    ste = np.zeros(n_rec, np.int64)
    row_live = np.zeros(n_rec, np.bool_)
    out_live = np.zeros(n_out, np.bool_)
    k_out = T_FRAC + TR_FRAC - U_FRAC + lr_out_shift
    k_hid = T_FRAC + 4 + TR_FRAC - U_FRAC + lr_shift
    n_samples = 0
    sq = 0.0
    sop = 0
    spikes = 0
    seed_mix = _smix(np.uint64(seed))
    pend_lo = starts[0]
    pend_hi = starts[1]
    for t in range(n_steps):
        # integrate
        for j in range(n_rec):
            acc[j] = 0
        n_active = 0
        for i in range(n_in):
            if in_map[i]:
                n_active += 1
                for j in range(n_rec):
                    acc[j] += w_in[j, i]
        n_rec_active = 0
        for i in range(n_rec):
            if rec_map[i]:
                n_rec_active += 1
                for j in range(n_rec):
                    acc[j] += w_rec[j, i]
        sop += (n_active + n_rec_active) * n_rec + n_rec_active * n_out
        spikes += n_rec_active
        for j in range(n_rec):
            vp = _clip(v[j] + (acc[j] << wshift), V_MIN, V_MAX)
            v_pre[j] = vp
            if vp >= theta[j]:
                z[j] = True
                vp -= theta[j]
            else:
                z[j] = False
            v[j] = _clip((vp * alpha[j]) >> 15, V_MIN, V_MAX)
        # readout on the consumed recurrent map
        for k in range(n_out):
            s = 0
            for i in range(n_rec):
                if rec_map[i]:
                    s += w_out[k, i]
            yk = _clip(y[k] + (s << wshift), V_MIN, V_MAX)
            y[k] = _clip((yk * alpha_out) >> 15, V_MIN, V_MAX)
            if hard_sig:
                y_exp[k] = _clip(y[k] * HS_SCALE + TARGET_ONE // 2, 0, TARGET_ONE)
            else:
                y_exp[k] = _clip(y[k] << E_SHIFT, -32768, 32767)
        if learn:
            for i in range(n_in):
                et_in[i] = _clip(((et_in[i] * et_alpha) >> 15) + (TRACE_ONE if in_map[i] else 0),
                                 T_MIN, T_MAX)
            for i in range(n_rec):
                et_rec[i] = _clip(((et_rec[i] * et_alpha) >> 15) + (TRACE_ONE if rec_map[i] else 0),
                                  T_MIN, T_MAX)
        if mask[t]:
            if t <= keep_until:
                for k in range(n_out):
                    readouts[n_samples, k] = y_exp[k]
                n_samples += 1
            for k in range(n_out):
                err[k] = y_exp[k] - targets[t, k]
                e = err[k] / TARGET_ONE
                sq += e * e
                if gate_readout and hard_sig and (y_exp[k] <= 0 or y_exp[k] >= TARGET_ONE):
                    err[k] = 0
            if learn:
                step = np.uint64(step0 + stats[STEPS])
                stats[STEPS] += 1
                keep = 2 if shadow else (1 if t == dense_step else 0)
                # phase 1: learning signals from the pre-update readout weights
                for j in range(n_rec):
                    s = 0
                    for k in range(n_out):
                        bk = b_fixed[j, k] if feedback_fixed else w_out[k, j]
                        s += bk * err[k]
                    if reg_raw != 0:
                        s += (reg_raw * (et_rec[j] - f_raw)) >> TR_FRAC
                    ls[j] = s
                    d = v_pre[j] - theta[j]
                    seg = 0
                    while seg < 4 and d >= lut_bounds[seg]:
                        seg += 1
                    ste[j] = lut_values[seg]
                    post[j] = ls[j] * ste[j]
                    row_live[j] = ste[j] != 0
                for k in range(n_out):
                    out_live[k] = err[k] != 0
                _update_matrix(w_out, seed_mix, (step << np.uint64(2)) | np.uint64(0), err, et_rec, out_live, skip_thr, k_out, stats,
                               dense_out, keep)
                # phase 2
                _update_matrix(w_in, seed_mix, (step << np.uint64(2)) | np.uint64(1), post, et_in, row_live, skip_thr, k_hid, stats,
                               dense_in, keep)
                _update_matrix(w_rec, seed_mix, (step << np.uint64(2)) | np.uint64(2), post, et_rec, row_live, skip_thr, k_hid, stats,
                               dense_rec, keep)
                if zero_diag:
                    for j in range(n_rec):
                        w_rec[j, j] = 0
        # publish maps for the next step
        for i in range(n_rec):
            rec_map[i] = z[i]
        for i in range(n_in):
            in_map[i] = False
        for e_idx in range(pend_lo, pend_hi):
            in_map[chans[e_idx]] = True
        if t + 2 <= n_steps:
            pend_lo = starts[t + 1]
            pend_hi = starts[t + 2]
    return n_samples, sq, sop, spikes
