"""Flat key-value config files: one `key = value` per line, `#` comments.

Unknown keys are an error by contract, so parsing is two-phase: read the
raw mapping here, then let each config dataclass consume the keys it owns
and reject the rest.
"""

from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    """Invalid configuration value, file, or CLI flag combination."""


def parse_kv_text(text: str, source: str = "<string>") -> dict[str, str]:
    """Parse flat `key = value` lines into an ordered dict of strings."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_kv_file(path: str | Path) -> dict[str, str]:
    path = Path(path)
    return parse_kv_text(path.read_text(encoding="utf-8"), source=str(path))


def write_kv_file(path: str | Path, mapping: dict[str, object]) -> None:
    """Write a mapping as flat key-value lines, atomically."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    lines = [f"{key} = {value}" for key, value in mapping.items()]
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    tmp.replace(path)


def coerce(value: str, target_type: type) -> object:
    """Coerce a raw string to the declared field type."""
    if target_type is bool:
        low = value.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected boolean, got {value!r}")
    if target_type is int:
        try:
            return int(value)
        except ValueError as exc:
            raise ConfigError(f"expected integer, got {value!r}") from exc
    if target_type is float:
        try:
            return float(value)
        except ValueError as exc:
            raise ConfigError(f"expected number, got {value!r}") from exc
    return value


def apply_kv(config: object, raw: dict[str, str], prefix: str = "") -> None:
    """Assign `prefix`-scoped keys onto a dataclass-like config in place.

    Keys that survive prefix filtering but name no field raise ConfigError.
    """
    fields = getattr(config, "__dataclass_fields__", None)
    if fields is None:
        raise TypeError(f"{type(config).__name__} is not a dataclass")
    for key, value in raw.items():
        if prefix:
            if not key.startswith(prefix):
                continue
            name = key[len(prefix):]
        else:
            name = key
        if name not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(config, name, coerce(value, _field_type(fields[name])))


def _field_type(field) -> type:
    ann = field.type
    if isinstance(ann, type):
        return ann
    # Annotations arrive as strings under `from __future__ import annotations`.
    return {"int": int, "float": float, "bool": bool, "str": str}.get(str(ann), str)
