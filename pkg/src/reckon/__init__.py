"""Bit-level emulator of a spiking RNN with on-chip e-prop learning.

Submodules: ``fixedpoint`` (Q formats, PRNG, rounding), ``snn`` (forward
pass, memory model), ``eprop`` (traces, STE, two-phase updates), ``task``
(events, navigation trials), ``aev`` (event files), ``oracle`` (float
e-prop / BPTT), ``loop`` and ``kernel`` (trial execution), ``harness``,
``validate`` and ``cli``.
"""

__version__ = "0.1.0"
