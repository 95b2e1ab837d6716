"""Flat key-value config files and typed override resolution.

File syntax: one `key = value` per line, `#` comments, blank lines ignored.
Dotted keys address nested config sections (`curriculum.phase1_steps`).
Precedence: command-line flags > config file > dataclass defaults.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path


class ConfigError(Exception):
    pass


def parse_config_file(path) -> dict[str, str]:
    mapping: dict[str, str] = {}
    for line_no, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{line_no}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"{path}:{line_no}: empty key")
        if key in mapping:
            raise ConfigError(f"{path}:{line_no}: duplicate key {key!r}")
        mapping[key] = value
    return mapping


def parse_flag_overrides(pairs) -> dict[str, str]:
    """CLI `key=value` strings to a mapping; later duplicates win."""
    mapping: dict[str, str] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        key, _, value = pair.partition("=")
        mapping[key.strip()] = value.strip()
    return mapping


def _coerce(value: str, typ, key: str):
    if typ is bool or typ == "bool":
        low = value.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"key {key!r}: cannot read {value!r} as bool")
    try:
        if typ is int or typ == "int":
            return int(value)
        if typ is float or typ == "float":
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"key {key!r}: cannot read {value!r} as {typ}") from exc
    if typ is str or typ == "str":
        return value
    raise ConfigError(f"key {key!r}: unsupported config field type {typ}")


def apply_overrides(cfg, mapping: dict[str, str]):
    """New config with dotted-key string overrides applied and coerced.

    Unknown keys raise ConfigError naming the key.
    """
    updates: dict[str, object] = {}
    nested: dict[str, dict[str, str]] = {}
    fields = {f.name: f for f in dataclasses.fields(cfg)}
    for key, value in mapping.items():
        head, dot, rest = key.partition(".")
        if head not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        if dot:
            nested.setdefault(head, {})[rest] = value
        else:
            field = fields[head]
            if dataclasses.is_dataclass(field.type) or dataclasses.is_dataclass(getattr(cfg, head)):
                raise ConfigError(f"key {key!r} addresses a config section, not a value")
            updates[head] = _coerce(value, field.type, key)
    for head, sub in nested.items():
        child = getattr(cfg, head)
        if not dataclasses.is_dataclass(child):
            raise ConfigError(f"key {head!r} is not a config section")
        updates[head] = apply_overrides(child, sub)
    return dataclasses.replace(cfg, **updates)


def build_config(cls, file_map: dict[str, str] | None = None, flags: dict[str, str] | None = None):
    """Defaults, then file values, then flag values."""
    cfg = cls()
    if file_map:
        cfg = apply_overrides(cfg, file_map)
    if flags:
        cfg = apply_overrides(cfg, flags)
    return cfg


def config_to_mapping(cfg, prefix: str = "") -> dict[str, str]:
    """Flatten a config dataclass back to dotted string keys (for manifests)."""
    out: dict[str, str] = {}
    for field in dataclasses.fields(cfg):
        value = getattr(cfg, field.name)
        key = f"{prefix}{field.name}"
        if dataclasses.is_dataclass(value):
            out.update(config_to_mapping(value, prefix=f"{key}."))
        else:
            out[key] = str(value)
    return out


def write_config_file(cfg, path) -> None:
    mapping = config_to_mapping(cfg)
    lines = [f"{k} = {mapping[k]}" for k in sorted(mapping)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
