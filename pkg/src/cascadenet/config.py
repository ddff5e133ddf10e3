"""Flat ``key = value`` configuration files and typed coercion into dataclasses."""

from __future__ import annotations

import configparser
import dataclasses
import typing
from pathlib import Path

_SECTION = "run"


def parse_config_text(text: str) -> dict[str, str]:
    """Parse flat ``key = value`` lines; ``#`` and ``;`` start comments."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keep key case
    parser.read_string(f"[{_SECTION}]\n" + text)
    return dict(parser[_SECTION])


def load_config(path=None, overrides=()) -> dict[str, str]:
    raw = parse_config_text(Path(path).read_text()) if path else {}
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        k, v = item.split("=", 1)
        raw[k.strip()] = v.strip()
    return raw


def config_key(f: dataclasses.Field) -> str:
    return f.metadata.get("key", f.name)


def _coerce(value: str, tp):
    origin = typing.get_origin(tp)
    if origin is typing.Union or (origin is not None and str(origin) == "<class 'types.UnionType'>"):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value.lower() in ("", "none"):
            return None
        return _coerce(value, args[0])
    if origin is tuple:
        (inner, *_rest) = typing.get_args(tp)
        return tuple(_coerce(v.strip(), inner) for v in value.split(",") if v.strip())
    if tp is bool:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if tp is int:
        return int(value)
    if tp is float:
        return float(value)
    return value


def known_keys(*classes) -> set[str]:
    return {config_key(f) for cls in classes for f in dataclasses.fields(cls)}


def build(cls, raw: dict[str, str], **extra):
    """Instantiate ``cls`` from the keys of ``raw`` it declares; others are ignored."""
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = config_key(f)
        if key in raw:
            try:
                kwargs[f.name] = _coerce(raw[key], hints[f.name])
            except ValueError as exc:
                raise ValueError(f"config key {key!r}: {exc}") from None
    kwargs.update(extra)
    return cls(**kwargs)


def snapshot(obj) -> dict:
    """Config dataclass as a JSON-ready dict under its file key names."""
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        out[config_key(f)] = list(v) if isinstance(v, tuple) else v
    return out


def from_snapshot(cls, d: dict):
    """Inverse of :func:`snapshot`."""
    names = {config_key(f): f.name for f in dataclasses.fields(cls)}
    return cls(**{names[k]: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k in names})
