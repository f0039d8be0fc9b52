"""TOML configuration plumbing.

Reads config files, validates them against dataclass schemas (unknown
keys are rejected, not ignored), and emits resolved configs back out
deterministically so a run's provenance file can be replayed as-is.
The emitter is local because the environment pins a read-only TOML
library; it covers the subset we emit (tables, scalars, arrays).
"""

from __future__ import annotations

import dataclasses
import hashlib
import re
import types
import typing

import numpy as np
import tomli

from .errors import UserInputError

_BARE_KEY = re.compile(r"^[A-Za-z0-9_-]+$")


def load_toml(path: str) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except OSError as exc:
        raise UserInputError(f"cannot read config {path}: {exc}")
    except tomli.TOMLDecodeError as exc:
        raise UserInputError(f"malformed TOML in {path}: {exc}")


def _format_key(key: str) -> str:
    if _BARE_KEY.match(key):
        return key
    return '"%s"' % key.replace("\\", "\\\\").replace('"', '\\"')


def _format_value(value, where: str) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if np.isnan(v):
            return "nan"
        if np.isinf(v):
            return "inf" if v > 0 else "-inf"
        text = repr(v)
        # TOML floats need a decimal point or exponent
        if "." not in text and "e" not in text and "E" not in text:
            text += ".0"
        return text
    if isinstance(value, str):
        out = value.replace("\\", "\\\\").replace('"', '\\"')
        out = out.replace("\n", "\\n").replace("\r", "\\r").replace("\t", "\\t")
        return '"%s"' % out
    if isinstance(value, (list, tuple, np.ndarray)):
        items = [_format_value(v, where) for v in list(value)]
        return "[%s]" % ", ".join(items)
    raise UserInputError(f"cannot emit {where} of type {type(value).__name__} as TOML")


def _emit_table(prefix: list, table: dict, lines: list):
    scalars = [(k, v) for k, v in table.items() if not isinstance(v, dict)]
    subtables = [(k, v) for k, v in table.items() if isinstance(v, dict)]
    if prefix and (scalars or not subtables):
        lines.append("[%s]" % ".".join(_format_key(p) for p in prefix))
    for key, value in scalars:
        if value is None:
            continue
        where = ".".join(prefix + [key])
        lines.append("%s = %s" % (_format_key(key), _format_value(value, where)))
    if scalars and subtables:
        lines.append("")
    for i, (key, value) in enumerate(subtables):
        _emit_table(prefix + [key], value, lines)
        if i != len(subtables) - 1:
            lines.append("")


def emit_toml(data: dict) -> str:
    """Serialize a nested dict deterministically (insertion order)."""
    lines: list = []
    _emit_table([], data, lines)
    return "\n".join(lines) + "\n"


def config_hash(data: dict) -> str:
    return hashlib.sha256(emit_toml(data).encode()).hexdigest()


def file_hash(path: str) -> str:
    h = hashlib.sha256()
    try:
        with open(path, "rb") as fh:
            for block in iter(lambda: fh.read(1 << 20), b""):
                h.update(block)
    except OSError as exc:
        raise UserInputError(f"cannot read {path}: {exc}")
    return h.hexdigest()


def dataclass_to_dict(obj) -> dict:
    """Resolved-config dict: every field echoed, Nones kept as markers."""
    out: dict = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value) and not isinstance(value, type):
            out[f.name] = dataclass_to_dict(value)
        elif isinstance(value, np.ndarray):
            out[f.name] = [float(v) for v in value]
        elif isinstance(value, tuple):
            out[f.name] = list(value)
        else:
            out[f.name] = value
    return out


def _type_options(tp) -> list:
    if typing.get_origin(tp) in (typing.Union, types.UnionType):
        return [t for t in typing.get_args(tp) if t is not type(None)]
    return [tp]


def _coerce_value(tp, value, where: str):
    options = _type_options(tp)
    last_err = None
    for opt in options:
        try:
            return _coerce_single(opt, value, where)
        except UserInputError as exc:
            last_err = exc
    if last_err is not None:
        raise last_err
    raise UserInputError(f"{where}: cannot interpret value {value!r}")


def _coerce_single(tp, value, where: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return coerce_dataclass(tp, value, where)
    if tp is np.ndarray:
        if not isinstance(value, (list, tuple)):
            raise UserInputError(f"{where} must be an array")
        return np.asarray(value, dtype=np.float64)
    if tp is tuple or origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise UserInputError(f"{where} must be an array")
        return tuple(value)
    if tp is list or origin is list:
        if not isinstance(value, (list, tuple)):
            raise UserInputError(f"{where} must be an array")
        return list(value)
    if tp is dict or origin is dict:
        if not isinstance(value, dict):
            raise UserInputError(f"{where} must be a table")
        return dict(value)
    if tp is bool:
        if not isinstance(value, bool):
            raise UserInputError(f"{where} must be true or false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
            raise UserInputError(f"{where} must be an integer")
        return int(value)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float, np.integer, np.floating)):
            raise UserInputError(f"{where} must be a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise UserInputError(f"{where} must be a string")
        return value
    raise UserInputError(f"{where}: unsupported config type {tp!r}")


def coerce_dataclass(cls, data, where: str = "config"):
    """Build cls from a TOML table; reject unknown keys by name."""
    if not isinstance(data, dict):
        raise UserInputError(f"{where} must be a table")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    norm: dict = {}
    for key, value in data.items():
        name = key.replace("-", "_")
        if name in norm:
            raise UserInputError(f"{where}: key {key!r} given more than once")
        norm[name] = value
    unknown = sorted(set(norm) - set(fields))
    if unknown:
        raise UserInputError(
            "%s: unknown key(s) %s; valid keys: %s"
            % (
                where,
                ", ".join(repr(k) for k in unknown),
                ", ".join(sorted(fields)),
            )
        )
    hints = typing.get_type_hints(cls)
    kwargs = {
        name: _coerce_value(hints[name], value, f"{where}.{name}")
        for name, value in norm.items()
    }
    return cls(**kwargs)


def parse_scalar(text: str):
    """Interpret an override value with TOML literal syntax.

    Falls back to the raw string when the text is not a TOML literal,
    so `--seed-class inner-wall` works without quoting gymnastics.
    """
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def apply_override(config: dict, dotted: str, value) -> None:
    """Set config[a][b][c] = value for dotted key a.b.c."""
    parts = [p.replace("-", "_") for p in dotted.split(".")]
    if not all(parts):
        raise UserInputError(f"malformed override key {dotted!r}")
    node = config
    for part in parts[:-1]:
        nxt = node.setdefault(part, {})
        if not isinstance(nxt, dict):
            raise UserInputError(
                f"override {dotted!r} descends into non-table key {part!r}"
            )
        node = nxt
    node[parts[-1]] = value
