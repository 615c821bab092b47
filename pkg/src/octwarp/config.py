"""Strict INI configuration: [optimizer], [regularizer], [grid], [simulator], [illumination].

Unknown sections or keys are errors. Every value is parsed with the type of
the corresponding default and validated by the target dataclass.
"""
from __future__ import annotations

import configparser
import dataclasses
import math
from pathlib import Path

from .optimizer import DEFAULT_REG, DEFAULT_STEPS, OptimizerConfig
from .simulator import SimulatorConfig

SECTIONS = ("optimizer", "regularizer", "grid", "simulator", "illumination")

# OptimizerConfig fields per section; step sizes are "step_<type>" in [optimizer]
_OPT_KEYS = ("momentum", "tolerance", "inner_steps", "max_outer", "level_count", "first_level",
             "seed", "init_window", "divergence_factor", "reset_momentum", "min_level_size")
_GRID_KEYS = ("alpha0_deg", "resolution_factor", "tile_shift", "w_min")
_ILLUM_KEYS = ("enabled", "s_min", "s_min_percentile", "s_min_offset")

DEFAULT_CONFIG = Path(__file__).with_name("default.cfg")


class ConfigError(ValueError):
    """Invalid configuration file."""


@dataclasses.dataclass
class Config:
    optimizer: OptimizerConfig = dataclasses.field(default_factory=OptimizerConfig)
    simulator: SimulatorConfig = dataclasses.field(default_factory=SimulatorConfig)


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_like(default, text: str):
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float) or default is None:
        value = float(text)
        if not math.isfinite(value):
            raise ValueError(f"not finite: {text!r}")
        return value
    if isinstance(default, tuple):
        return tuple(float(t) for t in text.replace(",", " ").split())
    return text


def _field_defaults(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            out[f.name] = f.default_factory()
    return out


def _check_keys(section: str, keys, allowed) -> None:
    unknown = sorted(set(keys) - set(allowed))
    if unknown:
        raise ConfigError(f"[{section}]: unknown key(s) {', '.join(unknown)}")


def parse_config(text: str) -> Config:
    """Parse configuration text.

    Args:
        text: INI-style ``key = value`` lines under section headers.

    Returns:
        Validated optimizer and simulator settings; absent keys keep defaults.

    Raises:
        ConfigError: unknown section/key, malformed value or violated invariant.
    """
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    unknown = sorted(set(cp.sections()) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s) {', '.join(unknown)}")
    opt_defaults = _field_defaults(OptimizerConfig)
    opt_kw: dict = {}
    steps = dict(DEFAULT_STEPS)
    reg = dict(DEFAULT_REG)
    sim_kw: dict = {}
    try:
        if cp.has_section("optimizer"):
            sec = cp["optimizer"]
            step_keys = [f"step_{k}" for k in DEFAULT_STEPS]
            _check_keys("optimizer", sec.keys(), _OPT_KEYS + tuple(step_keys))
            for key, val in sec.items():
                if key.startswith("step_"):
                    steps[key[5:]] = float(val)
                else:
                    opt_kw[key] = _parse_like(opt_defaults[key], val)
        if cp.has_section("regularizer"):
            sec = cp["regularizer"]
            _check_keys("regularizer", sec.keys(), DEFAULT_REG.keys())
            for key, val in sec.items():
                reg[key] = float(val)
        if cp.has_section("grid"):
            sec = cp["grid"]
            _check_keys("grid", sec.keys(), _GRID_KEYS)
            for key, val in sec.items():
                if key == "alpha0_deg":
                    opt_kw["alpha0"] = math.radians(float(val))
                elif key == "tile_shift":
                    shift = tuple(int(t) for t in val.replace(",", " ").split())
                    if len(shift) != 2:
                        raise ValueError("tile_shift needs two integers")
                    opt_kw["tile_shift"] = shift
                else:
                    opt_kw[key] = float(val)
        if cp.has_section("illumination"):
            sec = cp["illumination"]
            _check_keys("illumination", sec.keys(), _ILLUM_KEYS)
            for key, val in sec.items():
                if key == "enabled":
                    opt_kw["illumination"] = _parse_bool(val)
                elif key == "s_min":
                    opt_kw["s_min"] = None if val.strip().lower() in ("auto", "") else float(val)
                else:
                    opt_kw[key] = float(val)
        if cp.has_section("simulator"):
            sec = cp["simulator"]
            sim_defaults = _field_defaults(SimulatorConfig)
            _check_keys("simulator", sec.keys(), sim_defaults.keys())
            for key, val in sec.items():
                sim_kw[key] = _parse_like(sim_defaults[key], val)
        optimizer = OptimizerConfig(steps=steps, reg_weights=reg, **opt_kw)
        simulator = SimulatorConfig(**sim_kw)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return Config(optimizer, simulator)


def load_config(path=None) -> Config:
    """Read a configuration file (the packaged default when ``path`` is None)."""
    path = DEFAULT_CONFIG if path is None else Path(path)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def format_config(cfg: Config) -> str:
    """Serialize settings in the same format ``parse_config`` reads."""
    o, s = cfg.optimizer, cfg.simulator
    lines = ["[optimizer]"]
    lines += [f"{k} = {getattr(o, k)}" for k in _OPT_KEYS]
    lines += [f"step_{k} = {v!r}" for k, v in o.steps.items()]
    lines += ["", "[regularizer]"] + [f"{k} = {v!r}" for k, v in o.reg_weights.items()]
    lines += ["", "[grid]", f"alpha0_deg = {math.degrees(o.alpha0)!r}",
              f"resolution_factor = {o.resolution_factor!r}",
              f"tile_shift = {o.tile_shift[0]} {o.tile_shift[1]}", f"w_min = {o.w_min!r}"]
    lines += ["", "[illumination]", f"enabled = {o.illumination}",
              f"s_min = {'auto' if o.s_min is None else repr(o.s_min)}",
              f"s_min_percentile = {o.s_min_percentile!r}", f"s_min_offset = {o.s_min_offset!r}"]
    lines += ["", "[simulator]"]
    for f in dataclasses.fields(SimulatorConfig):
        v = getattr(s, f.name)
        if isinstance(v, tuple):
            v = " ".join(repr(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
