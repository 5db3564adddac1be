"""Deterministic TOML emission plus stdlib/tomli loading.

Manifests and config files must regenerate byte-identically from identical
inputs, so the emitter writes keys in insertion order with repr-precision
floats and no timestamps.
"""

from __future__ import annotations

try:
    import tomllib as _toml  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as _toml

from .errors import InputError


def load_toml(path) -> dict:
    try:
        with open(path, "rb") as f:
            return _toml.load(f)
    except _toml.TOMLDecodeError as e:
        raise InputError(f"invalid TOML in {path}: {e}") from e


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return f"{v:.17g}" if v == v and abs(v) != float("inf") else repr(v)
    if isinstance(v, str):
        escaped = v.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt_value(x) for x in v) + "]"
    raise InputError(f"cannot serialize {type(v).__name__} to TOML")


def dumps_toml(d: dict) -> str:
    """Serialize a dict of scalars/lists with one level of sub-tables."""
    top, tables = [], []
    for k, v in d.items():
        if isinstance(v, dict):
            lines = [f"[{k}]"]
            for k2, v2 in v.items():
                lines.append(f"{k2} = {_fmt_value(v2)}")
            tables.append("\n".join(lines))
        else:
            top.append(f"{k} = {_fmt_value(v)}")
    parts = []
    if top:
        parts.append("\n".join(top))
    parts.extend(tables)
    return "\n\n".join(parts) + "\n"


def dump_toml(d: dict, path) -> None:
    with open(path, "w") as f:
        f.write(dumps_toml(d))
