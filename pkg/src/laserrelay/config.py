"""Experiment configuration: a flat ``key = value`` file with an optional
``[laser]`` section.

Example::

    solver = all
    gamma = 1, 100, 1000
    gamma0_db = 80
    p_max_dbm = 20
    q_init = 0, 500

    [laser]
    wavelength_nm = 1550
    weather = Haze

Keys ending in ``_db`` or ``_dbm`` are converted to linear units (watts for
dBm).  Unknown keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

from .scenario import LaserParams, Scenario, ScenarioError, Weather, db_to_linear, dbm_to_watt

SOLVERS = ("cccp", "pdd", "ao")
_ROOT = "run"

_VECTOR_KEYS = ("source_pos", "dest_pos", "pb_pos", "q_init", "q_final")
_INT_KEYS = ("N",)
_SCENARIO_KEYS = {f.name for f in dataclasses.fields(Scenario)} - {"laser", "gamma_weight"}
# alias -> (linear field(s), converter)
_UNIT_ALIASES = {
    "gamma0_db": ("gamma0", db_to_linear),
    "p_max_dbm": (("p_max_s", "p_max_r"), dbm_to_watt),
    "p_max_s_dbm": ("p_max_s", dbm_to_watt),
    "p_max_r_dbm": ("p_max_r", dbm_to_watt),
}
_LASER_KEYS = {"wavelength_nm", "weather", "a1", "b1", "a2", "b2"}
_RUN_KEYS = {"solver", "gamma", "T", "seed", "out", "tol", "max_iters", "perturb", "record_time"}


class ConfigError(ValueError):
    """Bad configuration; the message names the offending field or line."""


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: Scenario = field(default_factory=Scenario)
    solvers: tuple = SOLVERS
    gammas: tuple = (1.0,)
    T_values: tuple = ()
    seed: int = 0
    out_dir: str = "results"
    tol: float | None = None
    max_iters: int | None = None
    perturb: float = 0.0
    record_time: bool = True

    def scenarios(self):
        """(tag, scenario) for each horizon in the sweep."""
        base = self.scenario
        if not self.T_values:
            return [(f"T{base.T_total:g}", base)]
        out = []
        for T in self.T_values:
            n = T / base.delta_t
            if abs(n - round(n)) > 1e-9:
                raise ConfigError(f"T = {T:g} is not a multiple of delta_t = {base.delta_t:g}")
            out.append((f"T{T:g}", _rebuild(base, T_total=float(T), N=int(round(n)))))
        return out


def _rebuild(sc: Scenario, **changes) -> Scenario:
    try:
        return dataclasses.replace(sc, **changes)
    except ScenarioError as exc:
        raise ConfigError(str(exc)) from None


def _floats(key: str, text: str) -> tuple:
    try:
        return tuple(float(x) for x in text.replace(";", ",").split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"{key}: expected numbers, got {text!r}") from None


def _scalar(key: str, text: str) -> float:
    vals = _floats(key, text)
    if len(vals) != 1:
        raise ConfigError(f"{key}: expected one number, got {text!r}")
    return vals[0]


def _bool(key: str, text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


def _solvers(text: str) -> tuple:
    names = [x.strip().lower() for x in text.split(",") if x.strip()]
    if names == ["all"]:
        return SOLVERS
    bad = [n for n in names if n not in SOLVERS]
    if bad or not names:
        raise ConfigError(f"solver: unknown {bad or text!r}; choose from {SOLVERS + ('all',)}")
    return tuple(dict.fromkeys(names))


def _parse(text: str, source: str) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"),
                                   inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(f"[{_ROOT}]\n" + text, source=source)
    except configparser.ParsingError as exc:
        # one line was prepended for the implicit root section
        where = "; ".join(f"line {n - 1}: {line.strip()}" for n, line in exc.errors)
        raise ConfigError(f"parse error in {source}: {where}") from None
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        where = f", line {line - 1}" if line else ""
        raise ConfigError(f"parse error in {source}{where}: {exc.message}") from None
    extra = set(cp.sections()) - {_ROOT, "laser"}
    if extra:
        raise ConfigError(f"unknown section(s) {sorted(extra)}")
    return cp


def parse_config(text: str, source: str = "<config>", overrides: dict | None = None) -> ExperimentConfig:
    """Build a config from file text; ``overrides`` (flat key -> string) win over the file."""
    cp = _parse(text, source)
    root = dict(cp[_ROOT])
    laser = dict(cp["laser"]) if cp.has_section("laser") else {}
    for k, v in (overrides or {}).items():
        (laser if k in ("wavelength_nm", "weather") else root)[k] = str(v)

    sc_kw, run = {}, {}
    for key, val in root.items():
        if key in _VECTOR_KEYS:
            vec = _floats(key, val)
            if len(vec) != 2:
                raise ConfigError(f"{key}: expected 'x, y', got {val!r}")
            sc_kw[key] = vec
        elif key in _UNIT_ALIASES:
            target, conv = _UNIT_ALIASES[key]
            for t in (target if isinstance(target, tuple) else (target,)):
                sc_kw[t] = conv(_scalar(key, val))
        elif key in _SCENARIO_KEYS:
            x = _scalar(key, val)
            if key in _INT_KEYS:
                if x != int(x):
                    raise ConfigError(f"{key}: expected an integer, got {val!r}")
                x = int(x)
            sc_kw[key] = x
        elif key in _RUN_KEYS:
            run[key] = val
        else:
            raise ConfigError(f"unknown key {key!r}")

    bad = set(laser) - _LASER_KEYS
    if bad:
        raise ConfigError(f"[laser]: unknown key(s) {sorted(bad)}")
    try:
        weather = Weather(laser.get("weather", Weather.CLEAR_AIR.value).strip())
    except ValueError:
        raise ConfigError(f"weather: choose from {[w.value for w in Weather]}") from None
    try:
        lp = LaserParams.preset(int(_scalar("wavelength_nm", laser.get("wavelength_nm", "810"))), weather)
    except ScenarioError as exc:
        raise ConfigError(f"wavelength_nm: {exc}") from None
    fit = {k: _scalar(k, laser[k]) for k in ("a1", "b1", "a2", "b2") if k in laser}
    sc_kw["laser"] = dataclasses.replace(lp, **fit)

    # keep N consistent with T_total/delta_t when only one of them is given
    if "N" not in sc_kw and ("T_total" in sc_kw or "delta_t" in sc_kw):
        T = sc_kw.get("T_total", Scenario.T_total)
        dt = sc_kw.get("delta_t", Scenario.delta_t)
        sc_kw["N"] = int(round(T / dt))
    try:
        scenario = Scenario(**sc_kw)
    except ScenarioError as exc:
        raise ConfigError(f"invalid scenario: {exc}") from None

    kw = {"scenario": scenario}
    if "solver" in run:
        kw["solvers"] = _solvers(run["solver"])
    if "gamma" in run:
        kw["gammas"] = _floats("gamma", run["gamma"])
        if not kw["gammas"] or min(kw["gammas"]) < 0:
            raise ConfigError("gamma: need one or more non-negative values")
    if "T" in run:
        kw["T_values"] = _floats("T", run["T"])
    if "seed" in run:
        seed = _scalar("seed", run["seed"])
        if seed != int(seed) or seed < 0:
            raise ConfigError(f"seed: expected a non-negative integer, got {run['seed']!r}")
        kw["seed"] = int(seed)
    if "out" in run:
        kw["out_dir"] = run["out"].strip()
    if "tol" in run:
        kw["tol"] = _scalar("tol", run["tol"])
        if not kw["tol"] > 0:
            raise ConfigError("tol: must be positive")
    if "max_iters" in run:
        m = _scalar("max_iters", run["max_iters"])
        if m != int(m) or m < 1:
            raise ConfigError(f"max_iters: expected a positive integer, got {run['max_iters']!r}")
        kw["max_iters"] = int(m)
    if "perturb" in run:
        kw["perturb"] = _scalar("perturb", run["perturb"])
        if kw["perturb"] < 0:
            raise ConfigError("perturb: must be non-negative")
    if "record_time" in run:
        kw["record_time"] = _bool("record_time", run["record_time"])
    cfg = ExperimentConfig(**kw)
    cfg.scenarios()
    return cfg


def load_config(path: str | Path | None, overrides: dict | None = None) -> ExperimentConfig:
    """Read ``path`` (None gives the nominal defaults)."""
    if path is None:
        return parse_config("", overrides=overrides)
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}") from None
    return parse_config(text, str(p), overrides)


def _fmt(x) -> str:
    if isinstance(x, tuple):
        return ", ".join(_fmt(v) for v in x)
    if isinstance(x, float):
        return repr(x) if math.isfinite(x) else str(x)
    return str(x)


def dump_config(cfg: ExperimentConfig) -> str:
    """Text that :func:`parse_config` maps back to an equal config."""
    sc = cfg.scenario
    lines = [f"solver = {_fmt(cfg.solvers)}", f"gamma = {_fmt(tuple(cfg.gammas))}"]
    if cfg.T_values:
        lines.append(f"T = {_fmt(tuple(cfg.T_values))}")
    lines += [f"seed = {cfg.seed}", f"out = {cfg.out_dir}", f"perturb = {_fmt(cfg.perturb)}",
              f"record_time = {str(cfg.record_time).lower()}"]
    if cfg.tol is not None:
        lines.append(f"tol = {_fmt(cfg.tol)}")
    if cfg.max_iters is not None:
        lines.append(f"max_iters = {cfg.max_iters}")
    for f in dataclasses.fields(Scenario):
        if f.name in ("laser", "gamma_weight"):
            continue
        lines.append(f"{f.name} = {_fmt(getattr(sc, f.name))}")
    lp = sc.laser
    lines += ["", "[laser]", f"wavelength_nm = {int(lp.wavelength_nm)}", f"weather = {lp.weather.value}"]
    lines += [f"{k} = {_fmt(getattr(lp, k))}" for k in ("a1", "b1", "a2", "b2")]
    return "\n".join(lines) + "\n"
