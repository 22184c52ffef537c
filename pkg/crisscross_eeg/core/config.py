"""Flat ``section.key=value`` configuration format over dataclasses.

One setting per line, ``#`` starts a comment, tuples are comma-separated and
``none`` clears an optional field. Nested dataclass fields are addressed with
dotted keys (``model.conv_spec.kernel=49,3,3``). Keys that do not name a
field are rejected rather than ignored.
"""

import dataclasses
import types
import typing
from pathlib import Path
from typing import Any, TypeVar, Union, get_args, get_origin

from crisscross_eeg.core.errors import ConfigError, ContainerError

T = TypeVar("T")

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def parse_lines(text: str, source: str = "<string>") -> dict[str, str]:
    """Parse ``key=value`` lines; duplicate keys are an error."""
    entries: dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(
                f"{source}:{number}: expected key=value, got {raw.strip()!r}"
            )
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{number}: empty key")
        if key in entries:
            raise ConfigError(f"{source}:{number}: duplicate key {key!r}")
        entries[key] = value
    return entries


def read_flat(path: str | Path) -> dict[str, str]:
    source = Path(path)
    try:
        text = source.read_text(encoding="utf-8")
    except OSError as exc:
        raise ContainerError(f"Cannot read config file {source}: {exc}") from exc
    return parse_lines(text, str(source))


def format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    return str(value)


def flatten(obj: Any, prefix: str = "") -> dict[str, str]:
    """Render a (nested) dataclass instance as flat ``key -> text`` entries."""
    entries: dict[str, str] = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            entries.update(flatten(value, f"{key}."))
        else:
            entries[key] = format_value(value)
    return entries


def write_flat(path: str | Path, entries: dict[str, str], header: str = "") -> Path:
    target = Path(path)
    lines = [f"# {line}" for line in header.splitlines()]
    lines += [f"{key}={value}" for key, value in entries.items()]
    try:
        target.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise ContainerError(f"Cannot write config file {target}: {exc}") from exc
    return target


def coerce(raw: str, hint: Any, key: str) -> Any:
    """Convert ``raw`` text to the annotated type ``hint``."""
    origin = get_origin(hint)
    if origin in (Union, types.UnionType):
        args = get_args(hint)
        if raw.strip().lower() in ("none", "") and type(None) in args:
            return None
        concrete = [a for a in args if a is not type(None)]
        return coerce(raw, concrete[0], key)
    if origin is tuple:
        args = get_args(hint)
        items = [item.strip() for item in raw.split(",") if item.strip()]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(coerce(item, args[0], key) for item in items)
        if len(items) != len(args):
            raise ConfigError(
                f"{key}: expected {len(args)} comma-separated values, got {raw!r}"
            )
        return tuple(coerce(item, a, key) for item, a in zip(items, args))
    if hint is bool:
        lowered = raw.strip().lower()
        if lowered in _TRUE:
            return True
        if lowered in _FALSE:
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if hint in (int, float, str):
        try:
            return hint(raw.strip())
        except ValueError:
            raise ConfigError(f"{key}: expected {hint.__name__}, got {raw!r}") from None
    raise ConfigError(f"{key}: unsupported field type {hint!r}")


def build(
    cls: type[T], entries: dict[str, str], prefix: str = "", base: T | None = None
) -> T:
    """Instantiate dataclass ``cls`` from relative flat entries.

    Fields not mentioned keep the value from ``base`` (or the class default);
    any key that names no field raises `ConfigError`.
    """
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    grouped: dict[str, dict[str, str]] = {}
    values: dict[str, Any] = {}
    for key, raw in entries.items():
        head, _, rest = key.partition(".")
        if head not in fields:
            raise ConfigError(f"Unknown config key {prefix + key!r}")
        if rest:
            if not dataclasses.is_dataclass(hints[head]):
                raise ConfigError(f"Unknown config key {prefix + key!r}")
            grouped.setdefault(head, {})[rest] = raw
        elif dataclasses.is_dataclass(hints[head]):
            raise ConfigError(f"{prefix}{key} is a section, set its fields instead")
        else:
            values[head] = coerce(raw, hints[head], f"{prefix}{key}")
    for head, sub in grouped.items():
        nested_base = getattr(base, head) if base is not None else None
        values[head] = build(hints[head], sub, f"{prefix}{head}.", nested_base)
    if base is not None:
        return dataclasses.replace(base, **values)
    return cls(**values)


def split_sections(entries: dict[str, str]) -> dict[str, dict[str, str]]:
    """Group ``section.key`` entries by section; bare keys go under ``""``."""
    sections: dict[str, dict[str, str]] = {}
    for key, value in entries.items():
        section, dot, rest = key.partition(".")
        if dot:
            sections.setdefault(section, {})[rest] = value
        else:
            sections.setdefault("", {})[key] = value
    return sections
