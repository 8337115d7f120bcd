"""AEV event files.

Little-endian layout::

    header   "AEV1" | n_channels u16 | n_out u16 | n_steps u32 | dt_us u32      (16 bytes)
    events   {timestep u32, channel u16} * N, sorted by timestep
    targets  optional: "TGT1" then {step u32, k u8, value i16 Q1.14} * M

A valid event's timestep is below ``n_steps``, so a record slot starting with
``TGT1`` (0x31544754 as a timestep) can only be the target section whenever
``n_steps <= 0x31544754``, which the writer enforces.
"""

from __future__ import annotations

import struct

import numpy as np

from .task import EventStream

MAGIC = b"AEV1"
TARGET_MAGIC = b"TGT1"
HEADER = struct.Struct("<4sHHII")
EVENT_DTYPE = np.dtype([("t", "<u4"), ("ch", "<u2")])
TARGET_DTYPE = np.dtype([("step", "<u4"), ("k", "u1"), ("value", "<i2")])
_TGT_AS_STEP = struct.unpack("<I", TARGET_MAGIC)[0]


class AevParseError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


def encode(stream: EventStream, n_out: int = 0, targets: np.ndarray | None = None,
           mask: np.ndarray | None = None) -> bytes:
    if stream.n_steps > _TGT_AS_STEP:
        raise ValueError("n_steps too large for the AEV format")
    if not 0 <= stream.n_channels <= 0xFFFF or not 0 <= n_out <= 0xFFFF:
        raise ValueError("n_channels / n_out must fit in u16")
    parts = [HEADER.pack(MAGIC, stream.n_channels, n_out, stream.n_steps, stream.dt_us)]
    ev = np.empty(len(stream), dtype=EVENT_DTYPE)
    ev["t"] = stream.t
    ev["ch"] = stream.ch
    parts.append(ev.tobytes())
    if targets is not None:
        if mask is None:
            raise ValueError("targets need a validity mask")
        steps = np.flatnonzero(mask)
        rec = np.empty(steps.size * targets.shape[1], dtype=TARGET_DTYPE)
        rec["step"] = np.repeat(steps, targets.shape[1])
        rec["k"] = np.tile(np.arange(targets.shape[1]), steps.size)
        vals = targets[steps].reshape(-1)
        if vals.size and (vals.min() < -32768 or vals.max() > 32767):
            raise ValueError("target values must fit Q1.14 int16")
        rec["value"] = vals
        parts.append(TARGET_MAGIC)
        parts.append(rec.tobytes())
    return b"".join(parts)


def decode(data: bytes):
    """Parse AEV bytes into ``(stream, n_out, targets, mask)``.

    ``targets`` and ``mask`` are ``None`` when the file has no target section.
    """
    if len(data) < HEADER.size:
        raise AevParseError("truncated header", len(data))
    magic, n_channels, n_out, n_steps, dt_us = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise AevParseError(f"bad magic {magic!r}", 0)
    if dt_us == 0:
        raise AevParseError("dt_us must be positive", 12)
    pos = HEADER.size
    body = len(data) - pos
    # Locate the target section: the first 6-byte slot that starts with TGT1.
    n_events = body // EVENT_DTYPE.itemsize
    tgt_at = None
    if body:
        ev_all = np.frombuffer(data, dtype=EVENT_DTYPE, count=n_events, offset=pos)
        hits = np.flatnonzero(ev_all["t"] == _TGT_AS_STEP)
        if hits.size:
            slot = int(hits[0])
            off = pos + slot * EVENT_DTYPE.itemsize
            if data[off:off + 4] == TARGET_MAGIC:
                tgt_at = off
                n_events = slot
        elif n_events * EVENT_DTYPE.itemsize != body:
            tail = pos + n_events * EVENT_DTYPE.itemsize
            if data[tail:tail + 4] == TARGET_MAGIC:
                tgt_at = tail
            else:
                raise AevParseError("trailing bytes do not form an event record", tail)
    ev = np.frombuffer(data, dtype=EVENT_DTYPE, count=n_events, offset=pos)
    t = ev["t"]
    ch = ev["ch"]
    if t.size:
        bad = np.flatnonzero(np.diff(t.astype(np.int64)) < 0)
        if bad.size:
            raise AevParseError("events not sorted by timestep", pos + int(bad[0] + 1) * 6)
        over = np.flatnonzero(t >= n_steps)
        if over.size:
            raise AevParseError(f"timestep {int(t[over[0]])} >= n_steps {n_steps}",
                                pos + int(over[0]) * 6)
        over = np.flatnonzero(ch >= n_channels)
        if over.size:
            raise AevParseError(f"channel {int(ch[over[0]])} >= n_channels {n_channels}",
                                pos + int(over[0]) * 6 + 4)
    stream = EventStream(t.copy(), ch.copy(), n_channels, n_steps, dt_us)
    if tgt_at is None:
        return stream, n_out, None, None
    start = tgt_at + 4
    rest = len(data) - start
    if rest % TARGET_DTYPE.itemsize:
        raise AevParseError("truncated target record", start + (rest // 7) * 7)
    rec = np.frombuffer(data, dtype=TARGET_DTYPE, offset=start)
    targets = np.zeros((n_steps, n_out), dtype=np.int64)
    mask = np.zeros(n_steps, dtype=bool)
    if rec.size:
        bad = np.flatnonzero((rec["step"] >= n_steps) | (rec["k"] >= n_out))
        if bad.size:
            raise AevParseError("target record out of range", start + int(bad[0]) * 7)
        targets[rec["step"], rec["k"]] = rec["value"]
        mask[rec["step"]] = True
    return stream, n_out, targets, mask


def store_events(stream: EventStream, path, n_out: int = 0, targets=None, mask=None):
    with open(path, "wb") as fh:
        fh.write(encode(stream, n_out, targets, mask))


def load_events(path) -> EventStream:
    return load_aev(path)[0]


def load_aev(path):
    with open(path, "rb") as fh:
        return decode(fh.read())


def rebin(stream: EventStream, dt_us: int) -> EventStream:
    """Re-bin a stream onto a different timestep (events keep their start time)."""
    if dt_us == stream.dt_us:
        return stream
    start_us = stream.t.astype(np.int64) * stream.dt_us
    steps = start_us // dt_us
    n_steps = -(-stream.n_steps * stream.dt_us // dt_us)
    return EventStream(steps, stream.ch, stream.n_channels, int(n_steps), int(dt_us))
