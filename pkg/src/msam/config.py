"""``key: value`` text files for configs and summaries."""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path
from typing import Any

from msam.errors import ConfigOutOfRange, MissingFile


def parse_lines(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise ConfigOutOfRange(f"line {n}: expected 'key: value', got {raw!r}")
        out[key.strip()] = value.strip()
    return out


def read_key_values(path: str | Path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    return parse_lines(path.read_text())


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    if value is None:
        return "none"
    return str(value)


def format_key_values(items: dict[str, Any]) -> str:
    return "".join(f"{k}: {format_value(v)}\n" for k, v in items.items())


def _convert(raw: str, hint: Any) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if raw.lower() == "none":
            return None
        hint = next(a for a in args if a is not type(None))
        origin, args = typing.get_origin(hint), typing.get_args(hint)
    if hint is bool:
        if raw.lower() in ("true", "yes", "1"):
            return True
        if raw.lower() in ("false", "no", "0"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if origin is tuple:
        return tuple(_convert(part.strip(), args[0]) for part in raw.split(","))
    if hint in (int, float, str):
        return hint(raw)
    return raw


def coerce_fields(cls, values: dict[str, str]) -> dict[str, Any]:
    """Convert string values to the annotated field types of dataclass ``cls``."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    out = {}
    for key, raw in values.items():
        if key not in names:
            continue
        try:
            out[key] = _convert(raw, hints[key])
        except (ValueError, StopIteration) as exc:
            raise ConfigOutOfRange(f"bad value for {key!r}: {raw!r} ({exc})") from None
    return out
