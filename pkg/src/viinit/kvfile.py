"""Flat ``key = value`` text files used for configs, calibration and scene specs.

Lines starting with ``#`` are comments. Values are parsed as bool
(``true``/``false``), int, float, a list of numbers (whitespace or comma
separated) or a bare string, in that order.
"""

from __future__ import annotations

import os
import tempfile

from viinit.errors import ConfigError


def parse_value(text: str):
    s = text.strip()
    low = s.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    parts = s.replace(",", " ").split()
    if len(parts) > 1:
        try:
            return [float(p) for p in parts]
        except ValueError:
            return s
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s.strip('"').strip("'")


def read_kv(path) -> dict:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{no}: expected 'key = value'")
            key, value = line.split("=", 1)
            key = key.strip()
            if not key:
                raise ConfigError(f"{path}:{no}: empty key")
            out[key] = parse_value(value)
    return out


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return " ".join(format_value(float(x)) for x in v)
    if hasattr(v, "tolist"):
        return format_value(v.tolist())
    return str(v)


def format_kv(items: dict, header: str | None = None) -> str:
    lines = [f"# {header}"] if header else []
    lines += [f"{k} = {format_value(v)}" for k, v in items.items()]
    return "\n".join(lines) + "\n"


def atomic_write_text(path, text: str):
    """Write via a temporary file in the same directory, then rename."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
