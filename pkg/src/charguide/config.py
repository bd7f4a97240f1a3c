"""Experiment configuration: INI-style sections of ``key = value`` lines.

Every key has a type and a default; experiments override some defaults.
Unknown sections or keys, bad values and out-of-range settings raise
``ConfigError`` naming the section, key and line.
"""

from __future__ import annotations

import configparser
import io
import math
import re
from dataclasses import dataclass
from pathlib import Path

__all__ = ["ConfigError", "ExperimentConfig", "EXPERIMENTS", "load_config", "parse_config"]

EXPERIMENTS = ("gaussian", "mixture", "magnet", "diagnose", "iterstudy", "mh")


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _floats(s: str) -> tuple:
    return tuple(float(v) for v in s.split(",") if v.strip())


def _choice(*options):
    def parse(s: str) -> str:
        v = s.strip()
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {v!r}")
        return v
    parse.__name__ = "choice"
    return parse


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


# section -> key -> (parser, default); ``None`` defaults are filled per experiment
SCHEMA = {
    "run": {
        "experiment": (_choice(*EXPERIMENTS), None),
        "seed": (int, 0),
        "batch": (int, None),
        "out": (str, "runs/out"),
        "paired": (_bool, False),
    },
    "schedule": {
        "n": (int, None),
        "b1": (float, 1e-4),
        "b2": (float, None),
    },
    "sampler": {
        "kind": (_choice("sde", "ode", "ddim", "dpmpp2m"), None),
        "steps": (int, None),
    },
    "guidance": {
        "method": (_choice("none", "cf", "ch"), "ch"),
        "omega": (float, None),
        "solver": (_choice("sor", "rmsprop", "anderson"), None),
        "projection": (_choice("identity", "channel_mean", "residual_direction"), None),
        "tolerance": (float, None),
        "max_iters": (int, 10),
        "gamma": (float, None),
        "alpha": (float, None),
        "epsilon_rms": (float, 1e-8),
        "decay_D": (float, 0.0),
        "anderson_m": (int, 2),
        "warm_start": (_bool, False),
    },
    "gaussian": {
        "c": (_floats, (-5.0, 5.0)),
    },
    "mixture": {
        "component": (int, 0),
        "n_mc": (int, 100000),
    },
    "magnet": {
        "temperature": (float, 196.0),
        "t1": (float, 200.0),
        "t0": (float, 201.0),
        "m2": (float, 0.1),
        "lam": (float, 1.0),
        "K": (float, 1.0),
        "Tc": (float, 200.0),
        "dataset_size": (int, 4096),
        "mh_samples": (int, 60000),
        "mh_thin": (int, 10),
        "mh_burn_in": (int, 2000),
        "mh_step_width": (float, 0.8),
        "mh_chains": (int, 512),
        "lattice": (int, 8),
        "temperatures": (_floats, (200.0, 201.0)),
        "dataset_format": (_choice("bin", "csv"), "bin"),
        "dataset_t1": (str, ""),
        "dataset_t0": (str, ""),
    },
    "diagnose": {
        "probes": (int, 10),
        "sigma_min": (float, 0.3),
        "sigma_max": (float, 0.9),
        "omegas": (_floats, (0.0, 1.0, 2.0, 4.0)),
        "fd": (float, 1e-4),
    },
    "iterstudy": {
        "tolerances": (_floats, (1e-2, 1e-3, 1e-4)),
    },
}

# per-experiment defaults for the keys left as None above
EXPERIMENT_DEFAULTS = {
    "gaussian": {
        "run": {"batch": 50000},
        "schedule": {"n": 1000, "b2": 0.015},
        "sampler": {"kind": "ddim"},
        "guidance": {"omega": 4.0, "solver": "anderson", "projection": "identity",
                     "tolerance": 0.01, "gamma": 1.0, "alpha": 0.999},
    },
    "mixture": {
        "run": {"batch": 20000},
        "schedule": {"n": 500, "b2": 0.02},
        "sampler": {"kind": "ddim"},
        "guidance": {"omega": 6.0, "solver": "rmsprop", "projection": "identity",
                     "tolerance": 0.02, "gamma": 0.05, "alpha": 0.99},
    },
    "magnet": {
        "run": {"batch": 8192},
        "schedule": {"n": 1000, "b2": 0.015},
        "sampler": {"kind": "ddim"},
        "guidance": {"omega": 4.0, "solver": "rmsprop", "projection": "channel_mean",
                     "tolerance": 0.1, "gamma": 0.01, "alpha": 0.999},
    },
    "diagnose": {
        "run": {"batch": 1},
        "schedule": {"n": 1000, "b2": 0.015},
        "sampler": {"kind": "ddim"},
        "guidance": {"omega": 4.0, "solver": "anderson", "projection": "identity",
                     "tolerance": 1e-10, "gamma": 1.0, "alpha": 0.999, "max_iters": 50},
    },
    "iterstudy": {
        "run": {"batch": 5000},
        "schedule": {"n": 500, "b2": 0.02},
        "sampler": {"kind": "dpmpp2m", "steps": 50},
        "guidance": {"omega": 6.0, "solver": "anderson", "projection": "identity",
                     "tolerance": 1e-3, "gamma": 1.0, "alpha": 0.999},
    },
    "mh": {
        "run": {"batch": 1},
        "schedule": {"n": 1000, "b2": 0.015},
        "sampler": {"kind": "ddim"},
        "guidance": {"omega": 0.0, "solver": "rmsprop", "projection": "identity",
                     "tolerance": 1e-3, "gamma": 0.01, "alpha": 0.999},
    },
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved settings: ``values[section][key]``."""

    values: dict

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @property
    def experiment(self) -> str:
        return self.values["run"]["experiment"]

    def with_overrides(self, **run_keys) -> "ExperimentConfig":
        vals = {s: dict(kv) for s, kv in self.values.items()}
        vals["run"].update(run_keys)
        cfg = ExperimentConfig(vals)
        _validate(cfg, {})
        return cfg

    def to_ini(self) -> str:
        buf = io.StringIO()
        for section, kv in self.values.items():
            buf.write(f"[{section}]\n")
            for key, val in kv.items():
                buf.write(f"{key} = {_fmt(val)}\n")
            buf.write("\n")
        return buf.getvalue()


def _line_of(text: str, section: str, key: str | None) -> int | None:
    current = None
    for lineno, line in enumerate(text.splitlines(), 1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return lineno
            continue
        if current == section and key is not None:
            if re.match(rf"\s*{re.escape(key)}\s*[=:]", line, flags=re.IGNORECASE):
                return lineno
    return None


def _where(text, section, key=None) -> str:
    line = _line_of(text, section, key) if text else None
    loc = f"[{section}]" + (f" {key}" if key else "")
    return f"{loc} (line {line})" if line else loc


def parse_config(text: str = "", experiment: str | None = None,
                 overrides: dict | None = None) -> ExperimentConfig:
    """Parse INI text, apply experiment defaults and ``overrides[section][key]`` strings."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None

    raw: dict = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section {_where(text, section)}")
        for key, value in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {_where(text, section, key)}")
            raw.setdefault(section, {})[key] = value
    for section, kv in (overrides or {}).items():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}] in override")
        for key, value in kv.items():
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key [{section}] {key} in override")
            raw.setdefault(section, {})[key] = value

    file_exp = raw.get("run", {}).get("experiment")
    if experiment is None:
        if file_exp is None:
            raise ConfigError("no experiment given ([run] experiment or a subcommand)")
        experiment = file_exp.strip()
    elif file_exp is not None and file_exp.strip() != experiment:
        raise ConfigError(
            f"{_where(text, 'run', 'experiment')}: config says {file_exp.strip()!r} "
            f"but the subcommand is {experiment!r}"
        )
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {experiment!r}")

    values: dict = {}
    for section, keys in SCHEMA.items():
        values[section] = {}
        for key, (parse, default) in keys.items():
            if key in raw.get(section, {}):
                try:
                    val = parse(raw[section][key])
                except ValueError as exc:
                    raise ConfigError(f"bad value for {_where(text, section, key)}: {exc}") from None
            else:
                val = EXPERIMENT_DEFAULTS[experiment].get(section, {}).get(key, default)
            values[section][key] = val
    values["run"]["experiment"] = experiment
    if experiment == "magnet":
        _tie_temperature(values, raw, text)
    s = values["sampler"]
    if s["steps"] is None:
        s["steps"] = values["schedule"]["n"] if s["kind"] in ("sde", "ode") else 20
    cfg = ExperimentConfig(values)
    _validate(cfg, text)
    return cfg


def _tie_temperature(values, raw, text) -> None:
    """Magnet runs fix omega through the target temperature (or the reverse)."""
    mg, g = values["magnet"], values["guidance"]
    if mg["t0"] == mg["t1"]:
        raise ConfigError(f"{_where(text, 'magnet', 't0')}: must differ from t1")
    span = mg["t0"] - mg["t1"]
    from_T = (mg["t1"] - mg["temperature"]) / span
    has_T = "temperature" in raw.get("magnet", {})
    has_w = "omega" in raw.get("guidance", {})
    if has_w and not has_T:
        mg["temperature"] = (1.0 + g["omega"]) * mg["t1"] - g["omega"] * mg["t0"]
    elif has_w and not math.isclose(g["omega"], from_T, rel_tol=1e-12, abs_tol=1e-12):
        raise ConfigError(
            f"{_where(text, 'guidance', 'omega')}: omega {g['omega']!r} disagrees with "
            f"temperature {mg['temperature']!r} (expected {from_T!r})"
        )
    else:
        g["omega"] = from_T


def _validate(cfg: ExperimentConfig, text) -> None:
    def fail(section, key, msg):
        raise ConfigError(f"{_where(text, section, key)}: {msg}")

    r, sch, smp, g = cfg["run"], cfg["schedule"], cfg["sampler"], cfg["guidance"]
    if r["batch"] < 1:
        fail("run", "batch", "must be >= 1")
    if sch["n"] < 2:
        fail("schedule", "n", "must be >= 2")
    if not 0 < sch["b1"] <= sch["b2"] < 1:
        fail("schedule", "b2", "need 0 < b1 <= b2 < 1")
    if smp["kind"] in ("sde", "ode") and smp["steps"] != sch["n"]:
        fail("sampler", "steps", f"{smp['kind']} walks the full schedule (steps = n = {sch['n']})")
    if not 1 <= smp["steps"] <= sch["n"]:
        fail("sampler", "steps", f"must lie in 1..{sch['n']}")
    if smp["kind"] == "dpmpp2m" and smp["steps"] < 2:
        fail("sampler", "steps", "dpmpp2m needs at least 2 steps")
    if not g["tolerance"] > 0:
        fail("guidance", "tolerance", "must be > 0")
    if g["max_iters"] < 1:
        fail("guidance", "max_iters", "must be >= 1")
    if not g["gamma"] > 0:
        fail("guidance", "gamma", "must be > 0")
    if not 0 < g["alpha"] < 1:
        fail("guidance", "alpha", "must lie in (0, 1)")
    if g["anderson_m"] < 2:
        fail("guidance", "anderson_m", "must be >= 2")
    if len(cfg["gaussian"]["c"]) != 2:
        fail("gaussian", "c", "needs exactly two numbers")
    if not 0 <= cfg["mixture"]["component"] <= 2:
        fail("mixture", "component", "must be 0, 1 or 2")
    if cfg["mixture"]["n_mc"] < 100000:
        fail("mixture", "n_mc", "must be >= 100000")
    mg = cfg["magnet"]
    if mg["t0"] == mg["t1"]:
        fail("magnet", "t0", "must differ from t1")
    if mg["dataset_size"] < 1 or mg["dataset_size"] > mg["mh_samples"]:
        fail("magnet", "dataset_size", "must lie in 1..mh_samples")
    if mg["mh_step_width"] <= 0 or mg["mh_thin"] < 1 or mg["mh_burn_in"] < 0 or mg["mh_chains"] < 1:
        fail("magnet", "mh_step_width", "chain settings must be positive")
    d = cfg["diagnose"]
    if not 0 < d["sigma_min"] <= d["sigma_max"] < 1:
        fail("diagnose", "sigma_min", "need 0 < sigma_min <= sigma_max < 1")
    if not cfg["iterstudy"]["tolerances"] or min(cfg["iterstudy"]["tolerances"]) <= 0:
        fail("iterstudy", "tolerances", "need positive tolerances")


def load_config(path, experiment: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, experiment, overrides)
