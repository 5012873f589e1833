"""Flat ``key=value`` text files used for schemas, configs and suites."""

from __future__ import annotations

import hashlib
from pathlib import Path


class ConfigError(ValueError):
    pass


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def format_kv(kv: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in kv.items())


def read_kv(path) -> dict[str, str]:
    return parse_kv(Path(path).read_text())


def parse_matrix(text: str) -> list[list[float]]:
    """``"1,0;0,1"`` -> [[1.0, 0.0], [0.0, 1.0]]."""
    return [[float(v) for v in row.split(",")] for row in text.split(";") if row.strip()]


def format_matrix(rows) -> str:
    return ";".join(",".join(repr(float(v)) for v in row) for row in rows)


def parse_floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def parse_ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def config_hash(kv: dict) -> str:
    blob = format_kv(dict(sorted((str(k), str(v)) for k, v in kv.items())))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]
