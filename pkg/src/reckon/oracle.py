"""Double-precision reference learners for small networks.

Forward dynamics follow the integer engine step for step (integrate, fire,
reset by subtraction, decay; readout integrates last step's spikes), without
quantization. Two gradient routes are provided:

* :func:`bptt_grads` unrolls the whole trial and backpropagates, replacing
  ``dz/dv`` by the triangular pseudo-derivative.
* :func:`float_eprop_grads` runs forward only, combining per-neuron learning
  signals with eligibility traces.

Both treat the reset term as a constant (no gradient through ``theta * z``).
With that convention and ``filtered=True``, e-prop equals BPTT exactly when
the recurrent weights are zero and feedback is symmetric.

Loss is ``0.5 * sum_t mask_t * sum_k (out_k(t) - target_k(t))**2`` where
``out = clip(slope * y + 0.5, 0, 1)`` with the hard-sigmoid on, else ``y``.
Gradients are returned as ``{"w_in", "w_rec", "w_out"}`` dicts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MAX_REC = 32
MAX_STEPS = 200


class ShapeMismatch(ValueError):
    pass


@dataclass
class FloatNet:
    """Real-valued network. ``alpha`` and ``theta`` are per hidden neuron."""

    w_in: np.ndarray
    w_rec: np.ndarray
    w_out: np.ndarray
    alpha: np.ndarray
    theta: np.ndarray
    alpha_out: float
    hard_sigmoid: bool = True
    slope: float = 0.25
    half_width: np.ndarray = None
    check_scale: bool = True
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.w_in = np.asarray(self.w_in, dtype=float)
        self.w_rec = np.asarray(self.w_rec, dtype=float)
        self.w_out = np.asarray(self.w_out, dtype=float)
        n_rec = self.w_in.shape[0]
        self.alpha = np.broadcast_to(np.asarray(self.alpha, dtype=float), (n_rec,)).copy()
        self.theta = np.broadcast_to(np.asarray(self.theta, dtype=float), (n_rec,)).copy()
        if self.half_width is None:
            self.half_width = self.theta.copy()
        self.half_width = np.broadcast_to(np.asarray(self.half_width, dtype=float), (n_rec,)).copy()
        if self.w_rec.shape != (n_rec, n_rec) or self.w_out.shape[1] != n_rec:
            raise ShapeMismatch("inconsistent weight shapes")
        if self.check_scale and n_rec > MAX_REC:
            raise ValueError(f"oracle networks are limited to {MAX_REC} hidden neurons")

    @property
    def n_rec(self):
        return self.w_in.shape[0]

    def pseudo_derivative(self, v_pre):
        return np.maximum(0.0, 1.0 - np.abs(v_pre - self.theta) / self.half_width)


@dataclass
class Trajectory:
    x: np.ndarray       # (T, n_in) consumed input maps
    z_prev: np.ndarray  # (T, n_rec) consumed recurrent maps, z(t-1)
    v_pre: np.ndarray   # (T, n_rec)
    y: np.ndarray       # (T, n_out) internal readout
    out: np.ndarray     # (T, n_out) exposed readout
    direct: np.ndarray  # (T, n_out) dE/dy(t) through out(t) only


def forward(net: FloatNet, x: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> Trajectory:
    """Run the float network on consumed input maps ``x`` (row ``t`` is integrated at step ``t``)."""
    x = np.asarray(x, dtype=float)
    T = x.shape[0]
    if net.check_scale and T > MAX_STEPS:
        raise ValueError(f"oracle trials are limited to {MAX_STEPS} steps")
    n_rec, n_out = net.n_rec, net.w_out.shape[0]
    v = np.zeros(n_rec)
    y = np.zeros(n_out)
    z = np.zeros(n_rec)
    zp = np.zeros((T, n_rec))
    vp = np.zeros((T, n_rec))
    ys = np.zeros((T, n_out))
    outs = np.zeros((T, n_out))
    direct = np.zeros((T, n_out))
    for t in range(T):
        zp[t] = z
        v_pre = v + net.w_in @ x[t] + net.w_rec @ z
        y = net.alpha_out * (y + net.w_out @ z)
        z = (v_pre >= net.theta).astype(float)
        v = net.alpha * (v_pre - net.theta * z)
        vp[t] = v_pre
        ys[t] = y
        if net.hard_sigmoid:
            lin = net.slope * y + 0.5
            out = np.clip(lin, 0.0, 1.0)
            dout = np.where((lin > 0.0) & (lin < 1.0), net.slope, 0.0)
        else:
            out, dout = y, np.ones(n_out)
        outs[t] = out
        if mask[t]:
            direct[t] = (out - targets[t]) * dout
    return Trajectory(x, zp, vp, ys, outs, direct)


def replay(net: FloatNet, x, z_prev, v_pre, y, targets, mask) -> Trajectory:
    """Build a trajectory from recorded forward quantities instead of simulating.

    Lets the float learning rule run on exactly the spikes and membrane
    potentials another engine produced, so only the learning path differs.
    """
    y = np.asarray(y, dtype=float)
    if net.hard_sigmoid:
        lin = net.slope * y + 0.5
        out = np.clip(lin, 0.0, 1.0)
        dout = np.where((lin > 0.0) & (lin < 1.0), net.slope, 0.0)
    else:
        out, dout = y, np.ones_like(y)
    m = np.asarray(mask, dtype=float)[:, None]
    direct = (out - np.asarray(targets, dtype=float)) * dout * m
    return Trajectory(np.asarray(x, dtype=float), np.asarray(z_prev, dtype=float),
                      np.asarray(v_pre, dtype=float), y, out, direct)


def loss(net: FloatNet, x, targets, mask) -> float:
    tr = forward(net, x, targets, mask)
    err = (tr.out - targets) * np.asarray(mask, dtype=float)[:, None]
    return 0.5 * float(np.sum(err ** 2))


def bptt_grads(net: FloatNet, x, targets, mask) -> dict:
    """Exact reverse-mode gradient of the unrolled trial (pseudo-derivative at spikes)."""
    tr = forward(net, x, targets, mask)
    T = tr.x.shape[0]
    psi = net.pseudo_derivative(tr.v_pre)
    g_in = np.zeros_like(net.w_in)
    g_rec = np.zeros_like(net.w_rec)
    g_out = np.zeros_like(net.w_out)
    g_y_next = np.zeros(net.w_out.shape[0])   # dE/dy(t+1)
    d_vpre_next = np.zeros(net.n_rec)          # dE/dv_pre(t+1)
    for t in range(T - 1, -1, -1):
        g_y = tr.direct[t] + net.alpha_out * g_y_next
        # y(t) = a_out * (y(t-1) + W_out z(t-1))
        g_out += net.alpha_out * np.outer(g_y, tr.z_prev[t])
        # z(t) reaches y(t+1) and v_pre(t+1)
        dz = net.alpha_out * (net.w_out.T @ g_y_next) + net.w_rec.T @ d_vpre_next
        d_vpre = psi[t] * dz + net.alpha * d_vpre_next
        g_in += np.outer(d_vpre, tr.x[t])
        g_rec += np.outer(d_vpre, tr.z_prev[t])
        g_y_next = g_y
        d_vpre_next = d_vpre
    return {"w_in": g_in, "w_rec": g_rec, "w_out": g_out}


def float_eprop_grads(net: FloatNet, x, targets, mask, filtered: bool = True,
                      feedback: np.ndarray | None = None, alpha_et: float | None = None,
                      reg: float = 0.0, f_target: float = 0.0, error_slope: bool = True,
                      trajectory: Trajectory | None = None) -> dict:
    """Forward-only e-prop estimate, accumulated over every supervised step.

    ``filtered=True`` is textbook e-prop for this model: per-synapse
    eligibility traces are low-passed with the readout decay, which makes
    the estimate exact without recurrence. ``filtered=False`` is the
    per-neuron, per-step product the integer engine computes:
    ``LS_j(t) * psi_j(t) * trace_i(t)`` with one trace per presynaptic
    neuron (decay ``alpha_et``), and the readout update
    ``err_k(t) * trace_rec_j(t)``.

    ``feedback`` defaults to ``w_out.T``. With ``error_slope=False`` the
    learning signal uses the gated error without the hard-sigmoid slope,
    matching the integer engine's units. A ``trajectory`` (see :func:`replay`)
    replaces the float forward pass.
    """
    tr = trajectory if trajectory is not None else forward(net, x, targets, mask)
    T = tr.x.shape[0]
    n_rec, n_in = net.w_in.shape
    B = net.w_out.T if feedback is None else np.asarray(feedback, dtype=float)
    psi = net.pseudo_derivative(tr.v_pre)
    direct = tr.direct
    if not error_slope and net.hard_sigmoid:
        direct = direct / net.slope

    g_in = np.zeros_like(net.w_in)
    g_rec = np.zeros_like(net.w_rec)
    g_out = np.zeros_like(net.w_out)
    if filtered:
        a = net.alpha[:, None]
        tr_in = np.zeros((n_rec, n_in))
        tr_rec = np.zeros((n_rec, n_rec))
        f_in = np.zeros((n_rec, n_in))   # readout-filtered eligibility traces
        f_rec = np.zeros((n_rec, n_rec))
        e_in_prev = np.zeros((n_rec, n_in))
        e_rec_prev = np.zeros((n_rec, n_rec))
        z_bar = np.zeros(n_rec)
        for t in range(T):
            tr_in = a * tr_in + tr.x[t][None, :]
            tr_rec = a * tr_rec + tr.z_prev[t][None, :]
            f_in = net.alpha_out * (f_in + e_in_prev)
            f_rec = net.alpha_out * (f_rec + e_rec_prev)
            z_bar = net.alpha_out * (z_bar + tr.z_prev[t])
            ls = B @ direct[t]
            g_in += ls[:, None] * f_in
            g_rec += ls[:, None] * f_rec
            g_out += np.outer(direct[t], z_bar)
            e_in_prev = psi[t][:, None] * tr_in
            e_rec_prev = psi[t][:, None] * tr_rec
        return {"w_in": g_in, "w_rec": g_rec, "w_out": g_out}

    if alpha_et is None:
        alpha_et = float(net.alpha.mean())
    et_in = np.zeros(n_in)
    et_rec = np.zeros(n_rec)
    for t in range(T):
        et_in = alpha_et * et_in + tr.x[t]
        et_rec = alpha_et * et_rec + tr.z_prev[t]
        if not mask[t]:
            continue
        ls = B @ direct[t] + reg * (et_rec - f_target)
        post = ls * psi[t]
        g_in += np.outer(post, et_in)
        g_rec += np.outer(post, et_rec)
        g_out += np.outer(direct[t], et_rec)
    return {"w_in": g_in, "w_rec": g_rec, "w_out": g_out}


@dataclass
class Comparison:
    cosine: float | None
    sign_agreement: float | None
    max_rel_err: float | None
    degenerate: bool = False
    n_compared: int = 0

    def as_dict(self) -> dict:
        return {"cosine": self.cosine, "sign_agreement": self.sign_agreement,
                "max_rel_err": self.max_rel_err, "degenerate": self.degenerate,
                "n_compared": self.n_compared}


def _flat(g) -> np.ndarray:
    if isinstance(g, dict):
        return np.concatenate([np.ravel(g[k]) for k in sorted(g)])
    if isinstance(g, (list, tuple)):
        return np.concatenate([np.ravel(a) for a in g])
    return np.ravel(np.asarray(g, dtype=float))


def compare(a, b, eps: float = 1e-12) -> Comparison:
    """Cosine, sign agreement and max relative error of ``a`` against reference ``b``.

    Sign agreement only counts entries whose magnitude exceeds ``eps`` in
    both. A zero-norm operand makes the cosine undefined; that is reported
    through ``degenerate`` with ``cosine=None``.
    """
    if isinstance(a, dict) != isinstance(b, dict) or (
            isinstance(a, dict) and sorted(a) != sorted(b)):
        raise ShapeMismatch("gradient sets do not match")
    if isinstance(a, dict):
        for k in a:
            if np.shape(a[k]) != np.shape(b[k]):
                raise ShapeMismatch(f"shape mismatch for {k}: {np.shape(a[k])} vs {np.shape(b[k])}")
    fa, fb = _flat(a).astype(float), _flat(b).astype(float)
    if fa.shape != fb.shape:
        raise ShapeMismatch(f"shape mismatch: {fa.shape} vs {fb.shape}")
    na, nb = np.linalg.norm(fa), np.linalg.norm(fb)
    both = (np.abs(fa) > eps) & (np.abs(fb) > eps)
    n = int(both.sum())
    agree = float(np.mean(np.sign(fa[both]) == np.sign(fb[both]))) if n else None
    ref = np.max(np.abs(fb)) if fb.size else 0.0
    rel = float(np.max(np.abs(fa - fb)) / ref) if ref > 0 else None
    if na == 0.0 or nb == 0.0:
        return Comparison(None, agree, rel, degenerate=True, n_compared=n)
    return Comparison(float(fa @ fb / (na * nb)), agree, rel, n_compared=n)
