"""Flat ``key = value`` config files and their mapping onto dataclasses."""
from __future__ import annotations

import dataclasses
import types
import typing
from pathlib import Path


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_kv(path) -> dict[str, str]:
    return parse_kv(Path(path).read_text())


def parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ValueError(f"override must look like key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def dump_kv(values: dict) -> str:
    return "".join(f"{k} = {values[k]}\n" for k in sorted(values))


def _coerce(value, typ):
    if not isinstance(value, str):
        return value
    if typ is bool:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if typ is int:
        return int(value)
    if typ is float:
        return float(value)
    return value


def build(cls, values: dict, **fixed):
    """Instantiate dataclass ``cls`` from the subset of ``values`` naming its fields."""
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in fixed:
            kwargs[f.name] = fixed[f.name]
        elif f.name in values:
            typ = hints[f.name]
            if typing.get_origin(typ) in (typing.Union, types.UnionType):
                typ = next(a for a in typing.get_args(typ) if a is not type(None))
            kwargs[f.name] = _coerce(values[f.name], typ)
    return cls(**kwargs)


def known_keys(*classes) -> set[str]:
    return {f.name for c in classes for f in dataclasses.fields(c)}
