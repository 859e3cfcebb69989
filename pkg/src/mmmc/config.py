"""Experiment configuration: a flat, sectioned key-value format.

The file format is INI.  Keys are grouped into the sections model, numerics,
macro, policy, output and replicate; unknown keys are rejected with the
section and key named.  ``to_ini`` emits a canonical snapshot that reparses
to an identical configuration and whose hash is embedded in every output
file.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import math
import re
from dataclasses import dataclass, fields, replace


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    # model
    kind: str = "fene"                  # 'fene' | 'linear'
    a1: float = -1.0
    a2: float = 1.0
    b: float = 1.0
    gamma: float = 49.0
    we: float = 1.0
    epsilon: float = 1.0
    kappa: str = "constant(2.0)"        # or 'paper-periodic'
    qoi: str = "auto"                   # 'auto' | 'stress' | 'x2' | 'mean'
    mu0: float = 0.0
    var0: float = 1.0
    # numerics
    dt_inner: float = 2e-4
    K: int = 1
    J: int = 1000
    t0: float = 0.0
    T: float = 1.0
    seed: int = 12345
    # macro
    moments: str = "even-centralized"   # 'standard' | 'centralized' | 'even-centralized'
    L: int = 3
    include_mean: bool = False
    method: str = "projective"          # 'projective' | 'projective-chord' | 'multistep'
    pe: int = 1
    K1: int = 0
    warmup: str = "micro"               # 'micro' | 'projective'
    # policy
    dt0: float = 1e-3
    dt_max: float = 8e-3
    shrink: float = 0.2
    grow: float = 1.2
    adaptive: bool = True
    # output
    out_dir: str = "."
    record_inner: bool = False
    # replicate
    replicates: int = 100
    workers: int = 1

    def validate(self) -> "ExperimentConfig":
        if self.kind not in ("fene", "linear"):
            raise ConfigError(f"model.kind: unknown model {self.kind!r}")
        if self.dt_inner <= 0:
            raise ConfigError("numerics.dt_inner must be positive")
        if self.K < 1:
            raise ConfigError("numerics.K must be >= 1")
        if self.J < 1:
            raise ConfigError("numerics.J must be >= 1")
        if self.T < self.t0:
            raise ConfigError("numerics.T must be >= numerics.t0")
        if self.moments not in ("standard", "centralized", "even-centralized"):
            raise ConfigError(f"macro.moments: unknown kind {self.moments!r}")
        if self.method not in ("projective", "projective-chord", "multistep"):
            raise ConfigError(f"macro.method: unknown method {self.method!r}")
        if self.warmup not in ("micro", "projective"):
            raise ConfigError(f"macro.warmup: unknown mode {self.warmup!r}")
        if not 0 < self.shrink < 1:
            raise ConfigError("policy.shrink must lie in (0, 1)")
        if self.grow <= 1:
            raise ConfigError("policy.grow must exceed 1")
        if self.dt_max < self.K * self.dt_inner:
            raise ConfigError("policy.dt_max must be >= K * dt_inner")
        kappa_profile(self.kappa)  # raises on a malformed profile
        return self


_SECTIONS = {
    "model": ("kind", "a1", "a2", "b", "gamma", "we", "epsilon", "kappa",
              "qoi", "mu0", "var0"),
    "numerics": ("dt_inner", "K", "J", "t0", "T", "seed"),
    "macro": ("moments", "L", "include_mean", "method", "pe", "K1", "warmup"),
    "policy": ("dt0", "dt_max", "shrink", "grow", "adaptive"),
    "output": ("out_dir", "record_inner"),
    "replicate": ("replicates", "workers"),
}

_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _parse_value(name: str, raw: str):
    ftype = _FIELD_TYPES[name]
    raw = raw.strip()
    if ftype == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    if ftype == "int":
        return int(raw)
    if ftype == "float":
        return float(raw)
    return raw


def config_from_ini(text: str) -> ExperimentConfig:
    """Parse a sectioned key-value config; errors name section and key."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}") from None
    values = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SECTIONS[section]:
                raise ConfigError(f"[{section}] {key}: unknown key")
            try:
                values[key] = _parse_value(key, raw)
            except (ValueError, ConfigError) as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from None
    return replace(ExperimentConfig(), **values).validate()


def load_config(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_ini(fh.read())


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def config_to_ini(cfg: ExperimentConfig) -> str:
    """Canonical snapshot; reparsing reproduces the configuration exactly."""
    buf = io.StringIO()
    for section, keys in _SECTIONS.items():
        buf.write(f"[{section}]\n")
        for key in keys:
            buf.write(f"{key} = {_format_value(getattr(cfg, key))}\n")
        buf.write("\n")
    return buf.getvalue()


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(config_to_ini(cfg).encode()).hexdigest()[:16]


_CONSTANT_RE = re.compile(r"^constant\(\s*([^)]+?)\s*\)$")


def kappa_profile(name: str):
    """Named velocity-gradient profiles for the dumbbell model.

    ``constant(c)`` is the steady profile kappa(t) = c; ``paper-periodic`` is
    the oscillatory shear kappa(t) = 2 (1.1 + sin(pi t)), period 2.
    """
    name = name.strip()
    m = _CONSTANT_RE.match(name)
    if m:
        try:
            c = float(m.group(1))
        except ValueError:
            raise ConfigError(f"kappa: bad constant profile {name!r}") from None
        return lambda t, _c=c: _c
    if name == "paper-periodic":
        return lambda t: 2.0 * (1.1 + math.sin(math.pi * t))
    raise ConfigError(f"kappa: unknown profile {name!r}")
