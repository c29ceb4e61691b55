"""Flat ``key=value`` config files mapped onto dataclasses."""

from __future__ import annotations

import dataclasses
import types
import typing
from pathlib import Path


def read_kv(path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _convert(text: str, hint):
    origin = typing.get_origin(hint)
    if hint is bool:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if hint in (int, float, str):
        return hint(text)
    if origin is tuple:
        args = typing.get_args(hint)
        parts = [p for p in text.replace(" ", "").split(",") if p]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(p, args[0]) for p in parts)
        if len(parts) != len(args):
            raise ValueError(f"expected {len(args)} comma-separated values, got {text!r}")
        return tuple(_convert(p, a) for p, a in zip(parts, args))
    if origin is typing.Union or origin is types.UnionType:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if text.lower() in ("none", ""):
            return None
        return _convert(text, args[0])
    return text


def apply_kv(obj, values: dict[str, str], strict: bool = True):
    """New dataclass instance with fields replaced by parsed values."""
    hints = typing.get_type_hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj)}
    changes = {}
    for key, text in values.items():
        if key not in names:
            if strict:
                raise KeyError(f"unknown config key {key!r} for {type(obj).__name__}")
            continue
        changes[key] = _convert(text, hints[key])
    return dataclasses.replace(obj, **changes)


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_kv(obj) -> str:
    return "".join(f"{f.name}={_format(getattr(obj, f.name))}\n" for f in dataclasses.fields(obj))


def write_kv(path, obj) -> None:
    Path(path).write_text(dump_kv(obj))
