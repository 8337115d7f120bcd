"""Run configuration: flat ``key = value`` files with ``[section]`` headers.

Every key has a default and belongs to exactly one section; keys are unique
across sections so that environment overrides (``RECKON_<KEY>``) and
``--set key=value`` flags need no section prefix. Unknown keys are errors.

Precedence, lowest first: defaults, config file, environment, CLI flags.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass

from .task import ConfigError

ENV_PREFIX = "RECKON_"


@dataclass(frozen=True)
class Field:
    section: str
    kind: type
    default: object
    doc: str


def _f(section, kind, default, doc):
    return Field(section, kind, default, doc)


SCHEMA = {
    # network
    "n_in": _f("network", int, 0, "input channels; 0 takes the task's channel count"),
    "n_rec": _f("network", int, 128, "hidden LIF neurons (<= 256)"),
    "n_out": _f("network", int, 2, "LI readout neurons (<= 16)"),
    "dt_us": _f("network", int, 1000, "timestep in microseconds"),
    "tau_mem_ms": _f("network", str, "2000", "membrane time constant(s), scalar or per-pair list"),
    "theta": _f("network", str, "16", "threshold(s) in membrane units, scalar or per-pair list"),
    "tau_out_ms": _f("network", float, 50.0, "readout time constant"),
    "hard_sigmoid": _f("network", bool, True, "apply the hard-sigmoid to readouts"),
    "weight_shift": _f("network", int, 4, "left shift of 8-bit weights into the accumulators"),
    "self_recurrence": _f("network", bool, True, "allow w_rec[j, j] != 0"),
    "w0": _f("network", int, 16, "initial weights uniform in [-w0, w0]"),
    # learning
    "learning": _f("learning", bool, True, "false sets the learning rate to zero"),
    "lr_shift": _f("learning", int, 15, "hidden-weight learning rate 2**-lr_shift"),
    "lr_out_shift": _f("learning", int, 13, "readout learning rate 2**-lr_out_shift"),
    "reg": _f("learning", float, 0.1, "activity regularization strength"),
    "f_target": _f("learning", float, 3.0, "target recurrent trace value"),
    "skip_threshold": _f("learning", float, 2.0 ** -6, "trace magnitude below which updates are skipped"),
    "feedback": _f("learning", str, "symmetric", "symmetric | random-fixed"),
    "feedback_seed": _f("learning", int, 0, "seed of the random-fixed feedback matrix"),
    "tau_et_ms": _f("learning", float, 0.0, "trace time constant; 0 uses the mean membrane one"),
    "ste_width": _f("learning", float, 1.0, "half-width of the default STE LUT in thresholds"),
    "ste_bounds": _f("learning", str, "", "explicit LUT boundaries (4 raw ints), overrides ste_width"),
    "ste_values": _f("learning", str, "", "explicit LUT values (5 ints in [-16, 15])"),
    "gate_readout": _f("learning", bool, True, "zero the readout error where the hard-sigmoid clamps"),
    # task
    "task": _f("task", str, "navigation", "navigation | aev"),
    "aev_train": _f("task", str, "", "directory of AEV training trials"),
    "aev_eval": _f("task", str, "", "directory of AEV held-out trials (defaults to aev_train)"),
    "n_cues": _f("task", int, 7, "cues per trial (odd)"),
    "cue_steps": _f("task", int, 100, "steps per cue"),
    "gap_steps": _f("task", int, 50, "silent steps after each cue"),
    "delay_steps": _f("task", int, 1050, "steps between the last gap and recall"),
    "recall_steps": _f("task", int, 150, "supervised recall window"),
    "group_size": _f("task", int, 10, "channels per input group"),
    "cue_rate": _f("task", float, 0.04, "per-step spike probability of cue channels"),
    "noise_rate": _f("task", float, 0.01, "per-step spike probability of noise channels"),
    "recall_rate": _f("task", float, 0.04, "per-step spike probability of recall channels"),
    # run
    "epochs": _f("run", int, 200, "training epochs"),
    "trials_per_epoch": _f("run", int, 64, "trials per epoch"),
    "eval_trials": _f("run", int, 512, "held-out trials"),
    "seed": _f("run", int, 0, "master seed"),
    "decision_window": _f("run", float, 1.0, "leading fraction of the recall window used to decide"),
    "latency_points": _f("run", str, "0.1,0.25,0.5,0.75,1.0", "decision-window fractions to report"),
    "eval_every": _f("run", int, 0, "held-out evaluation every N epochs; 0 evaluates only at the end"),
    "patience": _f("run", int, 20, "early stop after this many epochs without loss improvement; 0 off"),
    "out": _f("run", str, "runs/default", "output directory"),
    "threads": _f("run", int, 1, "evaluation worker threads"),
}

NETWORK_KEYS = [k for k, f in SCHEMA.items() if f.section == "network"]


def _parse_value(key: str, raw: str):
    kind = SCHEMA[key].kind
    s = raw.strip()
    try:
        if kind is bool:
            low = s.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(s)
        if kind is int:
            return int(s, 0)
        if kind is float:
            v = float(s)
            if math.isnan(v):
                raise ValueError(s)
            return v
        return s
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_text(text: str, source: str = "<config>") -> dict:
    """Parse config text into ``{key: value}``; sections must match the schema."""
    values = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in {f.section for f in SCHEMA.values()}:
                raise ConfigError(f"{source}:{lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if section is not None and SCHEMA[key].section != section:
            raise ConfigError(f"{source}:{lineno}: {key!r} belongs in [{SCHEMA[key].section}]")
        values[key] = _parse_value(key, val)
    return values


class RunConfig:
    """Resolved configuration; attribute access per key."""

    def __init__(self, values: dict | None = None):
        self._values = {k: f.default for k, f in SCHEMA.items()}
        for k, v in (values or {}).items():
            self.set(k, v)
        self.validate()

    def set(self, key: str, value):
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        if isinstance(value, str) and SCHEMA[key].kind is not str:
            value = _parse_value(key, value)
        self._values[key] = value

    def __getattr__(self, key):
        try:
            return self.__dict__["_values"][key]
        except KeyError:
            raise AttributeError(key) from None

    def as_dict(self) -> dict:
        return dict(self._values)

    def copy(self, **overrides) -> "RunConfig":
        vals = self.as_dict()
        vals.update(overrides)
        return RunConfig(vals)

    def validate(self):
        v = self._values
        if v["task"] not in ("navigation", "aev"):
            raise ConfigError(f"task must be navigation or aev, got {v['task']!r}")
        if v["task"] == "aev" and not v["aev_train"]:
            raise ConfigError("task = aev needs aev_train")
        if v["feedback"] not in ("symmetric", "random-fixed"):
            raise ConfigError(f"unknown feedback {v['feedback']!r}")
        for k in ("epochs", "trials_per_epoch", "eval_trials", "patience", "eval_every"):
            if v[k] < 0:
                raise ConfigError(f"{k} must be non-negative")
        if v["threads"] < 1:
            raise ConfigError("threads must be >= 1")
        if not 0.0 < v["decision_window"] <= 1.0:
            raise ConfigError("decision_window must be in (0, 1]")
        if v["lr_shift"] < -6 or v["lr_out_shift"] < -6:
            raise ConfigError("learning-rate shifts below -6 overflow the update accumulator")
        if not 1 <= v["w0"] <= 127:
            raise ConfigError("w0 must be in [1, 127]")
        if v["dt_us"] <= 0:
            raise ConfigError("dt_us must be positive")
        self.float_list("tau_mem_ms")
        self.float_list("theta")
        self.float_list("latency_points")
        if bool(v["ste_bounds"]) != bool(v["ste_values"]):
            raise ConfigError("ste_bounds and ste_values must be given together")

    def float_list(self, key: str) -> list:
        try:
            vals = [float(x) for x in str(self._values[key]).split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"{key}: expected comma-separated numbers") from None
        if not vals:
            raise ConfigError(f"{key}: empty list")
        return vals

    def int_list(self, key: str) -> list:
        try:
            return [int(x, 0) for x in str(self._values[key]).split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"{key}: expected comma-separated integers") from None

    def dump(self) -> str:
        """Canonical text form, loadable by :func:`load_config`."""
        lines = []
        for section in ("network", "learning", "task", "run"):
            lines.append(f"[{section}]")
            for k, f in SCHEMA.items():
                if f.section == section:
                    lines.append(f"{k} = {_fmt(self._values[k])}")
            lines.append("")
        return "\n".join(lines)

    def network_hash(self, n_in: int) -> str:
        """Digest of everything that fixes the weight layout and forward dynamics."""
        parts = [f"{k}={_fmt(self._values[k])}" for k in NETWORK_KEYS if k not in ("w0",)]
        parts.append(f"resolved_n_in={n_in}")
        return hashlib.sha256("\n".join(parts).encode()).hexdigest()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def load_config(path: str | None = None, env: dict | None = None, overrides: dict | None = None) -> RunConfig:
    values = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        values.update(parse_text(text, path))
    env = os.environ if env is None else env
    for name, raw in env.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower()
        if key not in SCHEMA:
            raise ConfigError(f"unknown environment override {name}")
        values[key] = _parse_value(key, raw)
    for k, v in (overrides or {}).items():
        if k not in SCHEMA:
            raise ConfigError(f"unknown key {k!r}")
        values[k] = _parse_value(k, v) if isinstance(v, str) else v
    return RunConfig(values)
