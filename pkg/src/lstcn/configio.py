"""Key=value (de)serialization of config dataclasses.

The on-disk form is line-oriented UTF-8: one ``key = value`` per line,
``#`` comments, every field named explicitly. Tuples are comma lists;
pair tuples (such as learning-rate schedules) use ``a:b`` elements.
Unknown keys are errors, by contract.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import get_args, get_origin


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(
            ":".join(format_value(x) for x in item) if isinstance(item, (list, tuple))
            else format_value(item)
            for item in value
        )
    return str(value)


def parse_value(text: str, tp):
    text = text.strip()
    origin = get_origin(tp)
    if origin in (tuple, list):
        args = get_args(tp)
        items = [s for s in text.split(",") if s.strip()]
        if args and args[-1] is Ellipsis:
            elem_tp = args[0]
        elif len(args) == 1:
            elem_tp = args[0]
        else:
            # fixed-arity tuple like tuple[int, int]
            if len(items) != len(args):
                raise ValueError(f"expected {len(args)} elements, got {len(items)} in {text!r}")
            return tuple(parse_value(s, a) for s, a in zip(items, args))
        if get_origin(elem_tp) in (tuple, list):
            inner = get_args(elem_tp)
            inner = inner[:-1] if inner and inner[-1] is Ellipsis else inner
            out = []
            for item in items:
                pieces = item.split(":")
                if len(inner) not in (0, len(pieces)):
                    raise ValueError(f"expected {len(inner)}-part element, got {item!r}")
                tps = inner if inner else [str] * len(pieces)
                out.append(tuple(parse_value(s, a) for s, a in zip(pieces, tps)))
            return tuple(out)
        return tuple(parse_value(s, elem_tp) for s in items)
    if tp is bool:
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    if tp is str:
        return text
    raise ValueError(f"unsupported config field type {tp!r}")


def to_kv_lines(cfg) -> list[str]:
    """Serialize a dataclass as sorted ``key = value`` lines."""
    lines = []
    for f in sorted(dataclasses.fields(cfg), key=lambda f: f.name):
        lines.append(f"{f.name} = {format_value(getattr(cfg, f.name))}")
    return lines


def parse_kv_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {ln}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in out:
            raise ValueError(f"line {ln}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def from_kv(cls, mapping: dict[str, str], **overrides):
    """Build dataclass ``cls`` from string key/values; unknown keys are errors."""
    import typing

    field_names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(mapping) - field_names)
    if unknown:
        raise ValueError(f"unknown config keys for {cls.__name__}: {', '.join(unknown)}")
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for key, text in mapping.items():
        try:
            kwargs[key] = parse_value(text, hints[key])
        except ValueError as e:
            raise ValueError(f"config key {key!r}: {e}") from e
    kwargs.update(overrides)
    return cls(**kwargs)


def load_config_file(cls, path, **overrides):
    text = Path(path).read_text(encoding="utf-8")
    return from_kv(cls, parse_kv_text(text), **overrides)


def save_config_file(cfg, path) -> None:
    Path(path).write_text("\n".join(to_kv_lines(cfg)) + "\n", encoding="utf-8")
