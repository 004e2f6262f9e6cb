"""Sectioned ``key = value`` configuration files.

Sections: ``[model]``, ``[shocks]``, ``[equilibrium]``, ``[estimation]`` and
``[montecarlo]``.  Arrays are comma lists; a type value with several
covariates is a whitespace-separated vector inside the comma list.  Tables
(``beta5``, ``gamma1``, ``gamma2``) are ``constant:<v>`` or the path of a
whitespace-separated file holding ``T*T*T`` numbers in ``[i, j, k]`` order.
Several estimation starts are separated by ``;``.
"""
from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .estimate import MODES, EstimationConfig
from .model import CoefficientSet, Game, ShockDistribution, TypeSpace

SECTIONS = ("model", "shocks", "equilibrium", "estimation", "montecarlo")
KNOWN = {
    "model": {"types", "limit_probs", "n", "beta1", "beta2", "beta3", "beta4_recip", "beta5", "gamma1", "gamma2",
              "free"},
    "shocks": {"family", "scale"},
    "equilibrium": {"R", "damping", "tol_limit", "tol_finite", "max_iter", "method"},
    "estimation": {"mode", "R", "p_floor", "step", "xatol", "fatol", "maxiter", "simplex_scale", "starts",
                   "variance"},
    "montecarlo": {"reps", "sizes", "modes", "seed", "oracle_check_max_n", "fault_reps"},
}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass
class RunConfig:
    game: Game
    n: int
    eq_R: int = 500
    eq_damping: float = 0.5
    eq_tol_limit: float = 1e-10
    eq_tol_finite: float | None = None
    eq_max_iter: int = 1000
    eq_method: str = "smooth"
    mode: str = "finite_finite"
    estimation: EstimationConfig = field(default_factory=EstimationConfig)
    reps: int = 1
    sizes: tuple = ()
    modes: tuple = ("finite_finite",)
    seed: int = 0
    oracle_check_max_n: int = 0
    fault_reps: tuple = ()


def split_list(text: str) -> list[str]:
    """Split on commas that are not inside brackets."""
    return [s.strip() for s in re.split(r",(?![^\[]*\])", text) if s.strip()]


def _floats(key, text):
    try:
        return [float(v) for v in split_list(text)]
    except ValueError as exc:
        raise ConfigError(f"{key}: expected a comma list of numbers, got {text!r}") from exc


def _num(key, text, kind=float):
    try:
        return kind(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {text!r}") from exc


def _table(key, text, base: Path, T: int):
    text = text.strip()
    if text.startswith("constant:"):
        return _num(key, text.split(":", 1)[1])
    path = Path(text)
    if not path.is_absolute():
        path = base / path
    try:
        vals = np.array(path.read_text().split(), dtype=float)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot read table file {path}: {exc}") from exc
    if vals.size != T ** 3:
        raise ConfigError(f"{key}: table file {path} has {vals.size} entries, expected {T ** 3}")
    return vals.reshape(T, T, T)


def _bool(key, text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


def _mode(key, text):
    mode = text.strip().replace("-", "_")
    if mode not in MODES:
        raise ConfigError(f"{key}: unknown mode {text!r}; expected one of {', '.join(MODES)}")
    return mode


def load_config(path) -> RunConfig:
    path = Path(path)
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    return parse_config(parser, path.parent)


def parse_config(parser: configparser.ConfigParser, base: Path = Path(".")) -> RunConfig:
    for sec in parser.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"[{sec}]: unknown section; expected one of {', '.join(SECTIONS)}")
        for key in parser[sec]:
            if key not in KNOWN[sec]:
                raise ConfigError(f"{sec}.{key}: unknown key")
    if "model" not in parser:
        raise ConfigError("[model]: section is required")
    m = parser["model"]
    for key in ("types", "limit_probs", "n"):
        if key not in m:
            raise ConfigError(f"model.{key}: required key missing")
    try:
        values = np.array([[float(x) for x in item.split()] for item in split_list(m["types"])])
    except ValueError as exc:
        raise ConfigError(f"model.types: malformed type values {m['types']!r}") from exc
    try:
        ts = TypeSpace(values, _floats("model.limit_probs", m["limit_probs"]))
    except ValueError as exc:
        raise ConfigError(f"model.types/limit_probs: {exc}") from exc
    n = _num("model.n", m["n"], int)
    if n < 4:
        raise ConfigError(f"model.n: networks need n >= 4, got {n}")
    T, dx = ts.T, ts.dim
    kw = {}
    for key in ("beta1", "beta4_recip"):
        kw[key] = _num(f"model.{key}", m.get(key, "0"))
    for key in ("beta2", "beta3"):
        vec = _floats(f"model.{key}", m.get(key, ", ".join(["0"] * dx)))
        if len(vec) != dx:
            raise ConfigError(f"model.{key}: expected {dx} entries, got {len(vec)}")
        kw[key] = vec
    for key in ("beta5", "gamma1", "gamma2"):
        kw[key] = _table(f"model.{key}", m.get(key, "constant:0"), base, T)
    free = tuple(split_list(m.get("free", "")))
    try:
        coef = CoefficientSet(**kw, free=free)
    except ValueError as exc:
        raise ConfigError(f"model.free: {exc}") from exc
    sh = parser["shocks"] if "shocks" in parser else {}
    try:
        shock = ShockDistribution(sh.get("family", "standard_normal").strip(),
                                  _num("shocks.scale", sh.get("scale", "1")))
    except ValueError as exc:
        raise ConfigError(f"shocks.family: {exc}") from exc
    cfg = RunConfig(game=Game(ts, coef, shock), n=n)

    eq = parser["equilibrium"] if "equilibrium" in parser else {}
    cfg.eq_R = _num("equilibrium.R", eq.get("R", "500"), int)
    cfg.eq_damping = _num("equilibrium.damping", eq.get("damping", "0.5"))
    if not 0 < cfg.eq_damping <= 1:
        raise ConfigError("equilibrium.damping: must lie in (0, 1]")
    cfg.eq_tol_limit = _num("equilibrium.tol_limit", eq.get("tol_limit", "1e-10"))
    tf = eq.get("tol_finite", "auto").strip()
    cfg.eq_tol_finite = None if tf == "auto" else _num("equilibrium.tol_finite", tf)
    cfg.eq_max_iter = _num("equilibrium.max_iter", eq.get("max_iter", "1000"), int)
    cfg.eq_method = eq.get("method", "smooth").strip()
    if cfg.eq_method not in ("smooth", "tally"):
        raise ConfigError("equilibrium.method: expected smooth or tally")
    if cfg.eq_R < 1:
        raise ConfigError("equilibrium.R: must be at least 1")

    es = parser["estimation"] if "estimation" in parser else {}
    cfg.mode = _mode("estimation.mode", es.get("mode", "finite_finite"))
    est = EstimationConfig(
        R=_num("estimation.R", es.get("R", "500"), int),
        p_floor=_num("estimation.p_floor", es.get("p_floor", "1e-6")),
        step=_num("estimation.step", es.get("step", "1e-4")),
        xatol=_num("estimation.xatol", es.get("xatol", "1e-6")),
        fatol=_num("estimation.fatol", es.get("fatol", "1e-10")),
        maxiter=_num("estimation.maxiter", es.get("maxiter", "2000"), int),
        simplex_scale=_num("estimation.simplex_scale", es.get("simplex_scale", "0.1")),
        variance=_bool("estimation.variance", es.get("variance", "true")),
    )
    if est.R < 1:
        raise ConfigError("estimation.R: must be at least 1")
    starts = []
    for chunk in es.get("starts", "").split(";"):
        if chunk.strip():
            vec = _floats("estimation.starts", chunk)
            if len(vec) != len(free):
                raise ConfigError(f"estimation.starts: each start needs {len(free)} values")
            starts.append(tuple(vec))
    est.starts = tuple(starts)
    cfg.estimation = est

    mc = parser["montecarlo"] if "montecarlo" in parser else {}
    cfg.reps = _num("montecarlo.reps", mc.get("reps", "1"), int)
    if cfg.reps < 1:
        raise ConfigError("montecarlo.reps: must be at least 1")
    cfg.sizes = tuple(int(v) for v in _floats("montecarlo.sizes", mc.get("sizes", str(n))))
    if any(s < 4 for s in cfg.sizes):
        raise ConfigError("montecarlo.sizes: networks need n >= 4")
    cfg.modes = tuple(_mode("montecarlo.modes", v) for v in split_list(mc.get("modes", cfg.mode)))
    cfg.seed = _num("montecarlo.seed", mc.get("seed", "0"), int)
    cfg.oracle_check_max_n = _num("montecarlo.oracle_check_max_n", mc.get("oracle_check_max_n", "0"), int)
    cfg.fault_reps = tuple(int(v) for v in _floats("montecarlo.fault_reps", mc.get("fault_reps", "")))
    return cfg
