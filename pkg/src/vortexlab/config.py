"""Sectioned ``key = value`` experiment configs with strict validation.

A config has a ``[run]`` section (``command``, ``seed``, ``output_dir``) and
one section named after the command holding its parameters. Every problem
is reported with its line number, and all problems are collected before
raising.
"""

import hashlib
import math
from dataclasses import dataclass, field

from .ns2d import InitialConditionError, parse_initial_condition

COMMANDS = ("kernel-selftest", "simulate", "ns2d", "tns", "pairliouville", "chaos-rate",
            "project-check")

DEFAULT_IC = "1*sin(2pi*(1*x1+0*x2)) + 0.5*cos(2pi*(0*x1+2*x2))"


class ConfigError(ValueError):
    """Carries every ``(line, message)`` problem found."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(f"line {ln}: {msg}" if ln else msg for ln, msg in self.errors))


# -- parameter schema --------------------------------------------------------

@dataclass(frozen=True)
class Param:
    kind: str              # int, float, ints, floats, ic, bool, str
    default: object
    lo: float = None
    hi: float = None
    lo_open: bool = False
    check: object = None   # extra predicate -> message or None

    def describe(self):
        if self.lo is None and self.hi is None:
            return ""
        left = "(" if self.lo_open else "["
        lo = "-inf" if self.lo is None else repr(self.lo)
        hi = "inf" if self.hi is None else repr(self.hi)
        return f"{left}{lo}, {hi}]"


def _pow2(v):
    vals = v if isinstance(v, tuple) else (v,)
    bad = [x for x in vals if x < 8 or x & (x - 1)]
    return f"must be a power of two >= 8, got {bad[0]}" if bad else None


def _even(v):
    vals = v if isinstance(v, tuple) else (v,)
    bad = [x for x in vals if x % 2 or x < 4]
    return f"must be even and >= 4, got {bad[0]}" if bad else None


_TIME = dict(lo=0.0, lo_open=True)

SCHEMA = {
    "run": {
        "command": Param("str", None),
        "seed": Param("int", 0, lo=0, hi=2 ** 64 - 1),
        "output_dir": Param("str", "out"),
    },
    "kernel-selftest": {
        "spectral_cutoff": Param("int", 32, lo=8, hi=512),
        "resolutions": Param("ints", (64, 128, 256), check=_pow2),
        "probe": Param("int", 64, lo=4, hi=512),
        "lattice_radius": Param("int", 30, lo=1, hi=200),
    },
    "simulate": {
        "n": Param("int", 64, lo=1, hi=1 << 20),
        "nu": Param("float", 0.05, lo=0.0),
        "dt": Param("float", 1e-3, **_TIME),
        "t_final": Param("float", 0.1, **_TIME),
        "snapshot_stride": Param("int", 10, lo=1),
        "initial": Param("ic", DEFAULT_IC),
        "pad": Param("float", 0.05, **_TIME),
        "marginal_resolution": Param("int", 128, check=_even),
        "spectral_cutoff": Param("int", 32, lo=8, hi=512),
        "table_resolution": Param("int", 256, check=_pow2),
    },
    "ns2d": {
        "resolution": Param("int", 128, check=_pow2),
        "nu": Param("float", 0.01, lo=0.0),
        "dt": Param("float", 1e-3, **_TIME),
        "t_final": Param("float", 0.1, **_TIME),
        "snapshot_every": Param("int", 10, lo=1),
        "initial": Param("ic", DEFAULT_IC),
        "picard_horizon": Param("float", 0.0, lo=0.0),
    },
    "tns": {
        "resolution": Param("int", 16, lo=4, hi=64, check=_even),
        "nu": Param("float", 0.05, lo=0.0),
        "dt": Param("float", 5e-3, **_TIME),
        "t_final": Param("float", 0.1, **_TIME),
        "pad": Param("float", 0.05, **_TIME),
        "snapshot_every": Param("int", 10, lo=1),
        "initial": Param("ic", DEFAULT_IC),
    },
    "pairliouville": {
        "resolution": Param("int", 16, lo=4, hi=64, check=_even),
        "nu": Param("float", 0.05, lo=0.0),
        "dt": Param("float", 1e-3, **_TIME),
        "t_final": Param("float", 0.1, **_TIME),
        "pad": Param("float", 0.05, **_TIME),
        "snapshot_every": Param("int", 10, lo=1),
        "initial": Param("ic", DEFAULT_IC),
        "alpha_plus": Param("float", -1.0),
        "alpha_minus": Param("float", -1.0),
    },
    "chaos-rate": {
        "n_values": Param("ints", (16, 32, 64, 128), lo=1, hi=1 << 16),
        "replicas": Param("int", 50, lo=30),
        "nu": Param("float", 0.05, lo=0.0),
        "dt": Param("float", 1e-3, **_TIME),
        "t_final": Param("float", 0.5, **_TIME),
        "snapshot_times": Param("floats", (), lo=0.0),
        "initial": Param("ic", DEFAULT_IC),
        "pad": Param("float", 0.05, **_TIME),
        "reference_resolution": Param("int", 256, check=_pow2),
        "reference_dt": Param("float", 1e-3, **_TIME),
        "kde": Param("bool", False),
        "kde_resolution": Param("int", 16, lo=4, hi=32, check=_even),
        "bandwidth": Param("float", 0.0, lo=0.0, hi=0.25),
        "tns_dt": Param("float", 5e-3, **_TIME),
        "spectral_cutoff": Param("int", 32, lo=8, hi=512),
        "table_resolution": Param("int", 256, check=_pow2),
    },
    "project-check": {
        "resolutions": Param("ints", (24, 32, 48), check=_even),
        "nu": Param("float", 0.05, lo=0.0),
        "t_final": Param("float", 0.25, **_TIME),
        "pad": Param("float", 0.05, **_TIME),
        "dt_coefficient": Param("float", 2.3, **_TIME),
        "initial": Param("ic", DEFAULT_IC),
        "reference_resolution": Param("int", 96, check=_even),
        "reference_dt": Param("float", 5e-4, **_TIME),
    },
}


@dataclass
class ExperimentConfig:
    command: str
    seed: int = 0
    output_dir: str = "out"
    params: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.params[key]

    def sha256(self):
        return hashlib.sha256(serialize(self).encode("utf-8")).hexdigest()


# -- value parsing -----------------------------------------------------------

def _parse_scalar(kind, raw):
    if kind == "int":
        return int(raw, 0)
    if kind == "float":
        v = float(raw)
        if not math.isfinite(v):
            raise ValueError("must be finite")
        return v
    if kind == "bool":
        low = raw.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    raise AssertionError(kind)


def _parse_value(p, raw):
    if p.kind in ("int", "float", "bool"):
        return _parse_scalar(p.kind, raw)
    if p.kind in ("ints", "floats"):
        items = [s.strip() for s in raw.split(",") if s.strip()]
        return tuple(_parse_scalar(p.kind[:-1], s) for s in items)
    if p.kind == "ic":
        parse_initial_condition(raw)
        return raw
    return raw


def _range_problem(p, value):
    vals = value if isinstance(value, tuple) else (value,)
    if p.kind in ("int", "float", "ints", "floats"):
        for v in vals:
            if p.lo is not None and (v < p.lo or (p.lo_open and v == p.lo)):
                return f"value {v!r} outside {p.describe()}"
            if p.hi is not None and v > p.hi:
                return f"value {v!r} outside {p.describe()}"
    if p.check is not None:
        return p.check(value)
    return None


def parse_config(text):
    """Parse and validate; raises :class:`ConfigError` listing every problem."""
    errors = []
    raw = {}
    section = None
    for ln, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s[0] in "#;":
            continue
        if s.startswith("["):
            if not s.endswith("]"):
                errors.append((ln, f"malformed section header {s!r}"))
                section = None
                continue
            section = s[1:-1].strip()
            if section in raw:
                errors.append((ln, f"duplicate section [{section}]"))
            raw.setdefault(section, {})
            continue
        if "=" not in s:
            errors.append((ln, f"expected 'key = value', got {s!r}"))
            continue
        if section is None:
            errors.append((ln, "key outside of any section"))
            continue
        key, value = (t.strip() for t in s.split("=", 1))
        if key in raw[section]:
            errors.append((ln, f"duplicate key {key!r} in [{section}]"))
        raw[section][key] = (ln, value)

    run = raw.get("run", {})
    command = run.get("command", (0, None))[1]
    if "run" not in raw:
        errors.append((0, "missing [run] section"))
    elif command is None:
        errors.append((0, "missing 'command' in [run]"))
    elif command not in COMMANDS:
        errors.append((run["command"][0], f"unknown command {command!r}; "
                                          f"expected one of {', '.join(COMMANDS)}"))
        command = None

    for name in raw:
        if name != "run" and name not in SCHEMA:
            ln = min((v[0] for v in raw[name].values()), default=0)
            errors.append((ln, f"unknown section [{name}]"))
        elif name not in ("run", command) and command is not None:
            ln = min((v[0] for v in raw[name].values()), default=0)
            errors.append((ln, f"section [{name}] does not belong to command {command!r}"))

    values = {}
    for name in ("run", command):
        if name is None:
            continue
        schema = SCHEMA[name]
        given = raw.get(name, {})
        for key, (ln, text_value) in given.items():
            if key not in schema:
                errors.append((ln, f"unknown key {key!r} in [{name}]"))
                continue
            p = schema[key]
            if key == "command":
                continue
            try:
                v = _parse_value(p, text_value)
            except InitialConditionError as exc:
                errors.append((ln, f"{key}: malformed initial condition: {exc}"))
                continue
            except ValueError as exc:
                errors.append((ln, f"{key}: cannot parse {text_value!r} as {p.kind} ({exc})"))
                continue
            problem = _range_problem(p, v)
            if problem:
                errors.append((ln, f"{key}: {problem}"))
                continue
            values[(name, key)] = v
    if errors:
        raise ConfigError(sorted(errors, key=lambda e: e[0]))

    params = {k: values.get((command, k), p.default) for k, p in SCHEMA[command].items()}
    run_schema = SCHEMA["run"]
    return ExperimentConfig(command,
                            values.get(("run", "seed"), run_schema["seed"].default),
                            values.get(("run", "output_dir"), run_schema["output_dir"].default),
                            params)


def _render(p, v):
    if p.kind == "float":
        return repr(float(v))
    if p.kind == "floats":
        return ", ".join(repr(float(x)) for x in v)
    if p.kind == "ints":
        return ", ".join(str(int(x)) for x in v)
    if p.kind == "bool":
        return "true" if v else "false"
    return str(v)


def serialize(cfg):
    """Canonical text form; ``parse_config(serialize(c)) == c``."""
    lines = ["[run]", f"command = {cfg.command}", f"seed = {cfg.seed}",
             f"output_dir = {cfg.output_dir}", "", f"[{cfg.command}]"]
    for key, p in SCHEMA[cfg.command].items():
        lines.append(f"{key} = {_render(p, cfg.params.get(key, p.default))}")
    return "\n".join(lines) + "\n"
