"""Flat ``section.key=value`` text serialisation for config dataclasses.

Serialisation is canonical: keys sorted, floats written with ``repr``, so a
config round-trips losslessly and can be embedded verbatim in checkpoints.
"""
from __future__ import annotations

import dataclasses
from typing import Any, Mapping

from .errors import ConfigError


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes"):
        return True
    if t in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple:
    text = text.strip()
    return tuple(int(t) for t in text.split(",")) if text else ()


def _opt_float(text: str):
    t = text.strip()
    return None if t.lower() in ("", "none") else float(t)


def _opt_str(text: str):
    t = text.strip()
    return t or None


def _stages(text: str) -> tuple:
    text = text.strip()
    if not text:
        return ()
    return tuple(tuple(float(a) for a in stage.split(",")) for stage in text.split(";"))


_PARSERS = {
    "int": int,
    "float": float,
    "str": str.strip,
    "bool": _bool,
    "tuple[int, ...]": _ints,
    "Optional[float]": _opt_float,
    "Optional[str]": _opt_str,
    "tuple[tuple[float, ...], ...]": _stages,
}


def format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        if value and isinstance(value[0], (tuple, list)):
            return ";".join(format_value(v) for v in value)
        return ",".join(format_value(v) for v in value)
    return str(value)


def to_flat(obj, prefix: str = "") -> dict:
    """Flatten a (possibly nested) config dataclass into dotted keys."""
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            out.update(to_flat(value, key + "."))
        else:
            out[key] = format_value(value)
    return out


def from_flat(cls, flat: Mapping[str, str], prefix: str = ""):
    """Build ``cls`` from dotted keys; missing keys keep their defaults."""
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = f"{prefix}{f.name}"
        nested = _nested_type(cls, f)
        if nested is not None:
            if any(k.startswith(key + ".") for k in flat):
                kwargs[f.name] = from_flat(nested, flat, key + ".")
            continue
        if key not in flat:
            continue
        parser = _PARSERS.get(str(f.type))
        if parser is None:
            raise ConfigError(f"no parser for field type {f.type!r} ({key})")
        try:
            kwargs[f.name] = parser(flat[key])
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {flat[key]!r} ({exc})") from None
    return cls(**kwargs)


def _nested_type(cls, f):
    if f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
        probe = f.default_factory()  # type: ignore[misc]
        if dataclasses.is_dataclass(probe):
            return type(probe)
    return None


def dumps(flat: Mapping[str, str]) -> str:
    return "".join(f"{k}={flat[k]}\n" for k in sorted(flat))


def loads(text: str) -> dict:
    flat = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in flat:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        flat[key] = value.strip()
    return flat
