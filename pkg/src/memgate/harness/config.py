"""Run configuration: typed key-value schema, config files and flag overrides.

A config file holds one ``key = value`` pair per line; ``#`` starts a
comment. Lists are comma-separated. Keys not in the command's schema are
rejected. Values resolve as schema default, then file, then flags.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable


class ConfigError(ValueError):
    """Bad configuration: unknown key or unparsable value."""


def parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list_of(cast: Callable[[str], Any]) -> Callable[[str], tuple]:
    def parse(text: str) -> tuple:
        items = [t.strip() for t in str(text).split(",") if t.strip()]
        return tuple(cast(t) for t in items)

    parse.__name__ = f"list[{cast.__name__}]"
    return parse


int_list = _list_of(int)
float_list = _list_of(float)
str_list = _list_of(str)


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    help: str = ""


Schema = dict[str, Key]


def read_config_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        values[key] = value
    return values


def resolve(schema: Schema, file_values: dict[str, str] | None = None,
            overrides: dict[str, Any] | None = None) -> dict[str, Any]:
    """Merge defaults, file values (strings) and flag overrides (already typed or strings)."""
    out = {key: spec.default for key, spec in schema.items()}
    for source, values in (("config file", file_values or {}), ("flags", overrides or {})):
        for key, value in values.items():
            if key not in schema:
                raise ConfigError(f"unknown key {key!r} in {source}; valid keys: {', '.join(sorted(schema))}")
            if value is None:
                continue
            if isinstance(value, str):
                try:
                    value = schema[key].parse(value)
                except ValueError as exc:
                    raise ConfigError(f"bad value for {key!r}: {exc}") from exc
            out[key] = value
    return out


def describe(schema: Schema) -> str:
    width = max(len(k) for k in schema)
    return "\n".join(f"  {k:<{width}}  {v.help} (default: {v.default!r})" for k, v in schema.items())
