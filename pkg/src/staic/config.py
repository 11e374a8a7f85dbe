"""INI run configuration: one typed schema for every command.

A config file is a flat ``key = value`` list grouped under section headers::

    [phantom]
    kind = mixed-scene
    dims = 64, 64, 8

    [solver]
    name = staic
    alpha_s = 0.3

Unknown sections or keys and values that fail to parse raise
:class:`~staic.errors.ConfigError` with the offending line number. Any key can
be overridden from the environment as ``STAIC_<SECTION>_<KEY>`` (upper case),
e.g. ``STAIC_SOLVER_ALPHA_S=0.2``.
"""

from __future__ import annotations

import configparser
import json
import math
import os
import re
from typing import Any, Callable, Dict, Mapping, Optional, Tuple

from .errors import ConfigError

ENV_PREFIX = "STAIC_"


def _float(s: str) -> float:
    v = float(s)
    if math.isnan(v):
        raise ValueError("nan is not allowed")
    return v


def _int(s: str) -> int:
    return int(s)


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _str(s: str) -> str:
    return s.strip()


def _list(item: Callable[[str], Any]) -> Callable[[str], tuple]:
    def parse(s: str) -> tuple:
        parts = [p for p in re.split(r"[,\s]+", s.strip()) if p]
        return tuple(item(p) for p in parts)
    parse.__name__ = f"list of {item.__name__.strip('_')}"
    return parse


def _pairs(s: str) -> tuple:
    """``0.1/0.05, 0.3/0.15`` -> ((0.1, 0.05), (0.3, 0.15))."""
    out = []
    for part in [p for p in re.split(r"[,\s]+", s.strip()) if p]:
        a, sep, b = part.partition("/")
        if not sep:
            raise ValueError(f"expected alpha_s/alpha_t, got {part!r}")
        out.append((_float(a), _float(b)))
    return tuple(out)


def _dims(s: str) -> tuple:
    d = _list(_int)(s)
    if len(d) != 3 or min(d) < 1:
        raise ValueError("dims needs three positive integers")
    return d


INF = math.inf

# section -> key -> (parser, default)
SCHEMA: Dict[str, Dict[str, Tuple[Callable[[str], Any], Any]]] = {
    "phantom": {
        "kind": (_str, "mixed-scene"),
        "dims": (_dims, (64, 64, 8)),
        "n_static": (_int, 4),
        "n_moving": (_int, 2),
        "speed": (_float, 2.0),
        "background": (_float, 0.0),
        "seed": (_int, 1),
    },
    "psf": {
        "na": (_float, 1.0),
        "wavelength_px": (_float, 6.0),
        "kernel_radius": (_int, 6),
    },
    "noise": {
        "gamma_p": (_float, 1.0),
        # absolute Gaussian std; when negative, sigma_g_rel * phantom peak is used
        "sigma_g": (_float, -1.0),
        "sigma_g_rel": (_float, 0.005),
        "seed": (_int, 7),
    },
    "solver": {
        "name": (_str, "staic"),
        "alpha_s": (_float, 0.3),
        "alpha_t": (_float, 0.15),
        "lam": (_float, 0.1),
        "kappa1": (_float, 2.0),
        "kappa2": (_float, 0.5),
        "rho": (_float, 1.0),
        "max_iters": (_int, 500),
        "tol_primal": (_float, 1e-4),
        "tol_dual": (_float, 1e-4),
        "lb": (_float, 0.0),
        "ub": (_float, INF),
        "log_every": (_int, 10),
    },
    "io": {
        "phantom": (_str, "phantom.stk"),
        "measurement": (_str, "measurement.stk"),
        "write_phantom": (_bool, True),
    },
    "experiment": {
        "nas": (_list(_float), (0.8, 0.9, 1.0, 1.1, 1.2)),
        "gammas": (_list(_float), (1.0, 5.0)),
        "solvers": (_list(_str), ("staic", "ictv", "cst", "tv2_3d")),
        "staic_grid": (_pairs, ((0.2, 0.1), (0.4, 0.1), (0.4, 0.2), (0.6, 0.3), (0.8, 0.2))),
        "ictv_grid": (_list(_float), (0.05, 0.1, 0.2, 0.4, 0.8)),
        "cst_grid": (_list(_float), (0.05, 0.1, 0.2, 0.4, 0.8)),
        "tv2_3d_grid": (_list(_float), (0.05, 0.1, 0.2, 0.4, 0.8)),
        "max_iters": (_int, 300),
        "tol": (_float, 1e-4),
        "seed": (_int, 0),
        "report_all": (_bool, False),
        "figures": (_bool, True),
    },
}


def defaults() -> Dict[str, Dict[str, Any]]:
    return {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}


def _line_numbers(text: str) -> Dict[Tuple[str, Optional[str]], int]:
    """Map (section, key) and (section, None) to 1-based line numbers."""
    where: Dict[Tuple[str, Optional[str]], int] = {}
    section = None
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            where.setdefault((section, None), n)
            continue
        key = re.split(r"[=:]", line, maxsplit=1)[0].strip().lower()
        if section is not None:
            where.setdefault((section, key), n)
    return where


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, Dict[str, Any]]:
    """Parse INI text against :data:`SCHEMA`; missing keys take defaults."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        at = f"{source}:{line}: " if line else f"{source}: "
        raise ConfigError(at + str(exc).splitlines()[0]) from None
    lines = _line_numbers(text)
    out = defaults()
    for sec in cp.sections():
        low = sec.lower()
        if low not in SCHEMA:
            raise ConfigError(f"{source}:{lines.get((low, None), '?')}: unknown section [{sec}]")
        for key, raw in cp.items(sec):
            at = f"{source}:{lines.get((low, key), '?')}"
            if key not in SCHEMA[low]:
                raise ConfigError(f"{at}: unknown key {key!r} in [{sec}]")
            parser = SCHEMA[low][key][0]
            try:
                out[low][key] = parser(raw)
            except ValueError as exc:
                raise ConfigError(f"{at}: bad value for {low}.{key} "
                                  f"({parser.__name__.strip('_')}): {exc}") from None
    return out


def load_config(path: Optional[str]) -> Dict[str, Dict[str, Any]]:
    """Read an INI file, or the ``config`` snapshot of a run manifest (``.json``)."""
    if path is None:
        return defaults()
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    if str(path).endswith(".json"):
        return from_snapshot(text, str(path))
    return parse_config_text(text, str(path))


def apply_env(cfg: Dict[str, Dict[str, Any]], environ: Mapping[str, str] = os.environ):
    """Override schema keys from ``STAIC_<SECTION>_<KEY>`` variables, in place."""
    for sec, keys in SCHEMA.items():
        for key, (parser, _) in keys.items():
            name = f"{ENV_PREFIX}{sec.upper()}_{key.upper()}"
            if name in environ:
                try:
                    cfg[sec][key] = parser(environ[name])
                except ValueError as exc:
                    raise ConfigError(f"environment {name}: {exc}") from None
    return cfg


def _jsonable(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    return v


def snapshot(cfg: Dict[str, Dict[str, Any]]) -> Dict[str, Dict[str, Any]]:
    """JSON-ready copy of a resolved config (infinities as strings)."""
    return {sec: {k: _jsonable(v) for k, v in keys.items()} for sec, keys in cfg.items()}


def _from_json(v):
    if isinstance(v, list):
        return tuple(_from_json(x) for x in v)
    if v in ("inf", "-inf"):
        return float(v)
    return v


def from_snapshot(text: str, source: str = "<manifest>") -> Dict[str, Dict[str, Any]]:
    try:
        doc = json.loads(text)
        snap = doc["config"] if "config" in doc else doc
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"{source}: not a run manifest: {exc}") from None
    out = defaults()
    for sec, keys in snap.items():
        if sec not in SCHEMA:
            raise ConfigError(f"{source}: unknown section {sec!r}")
        for key, v in keys.items():
            if key not in SCHEMA[sec]:
                raise ConfigError(f"{source}: unknown key {sec}.{key}")
            out[sec][key] = _from_json(v)
    return out
