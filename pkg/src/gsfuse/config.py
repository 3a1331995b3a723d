"""Key-value config files for TrainConfig.

One ``key = value`` pair per line; values are JSON (``3000``, ``0.2``,
``true``, ``"float64"``, ``[0.1, 0.5]``). Blank lines and lines starting
with ``#`` are ignored. Keys are TrainConfig field names. Precedence when
combined: command-line flags > config file > built-in defaults.
"""
from __future__ import annotations

import json
from dataclasses import fields
from pathlib import Path

from .errors import ParseError
from .trainer import TrainConfig


def parse_config_text(text, path="<config>"):
    known = {f.name for f in fields(TrainConfig)}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ParseError("expected 'key = value'", path, lineno)
        if key not in known:
            raise ParseError(f"unknown config key {key!r}", path, lineno)
        try:
            out[key] = json.loads(value.strip())
        except json.JSONDecodeError:
            raise ParseError(f"value for {key!r} is not valid JSON", path, lineno) from None
    return out


def read_config(path):
    return parse_config_text(Path(path).read_text(), str(path))


def format_config(cfg: TrainConfig):
    return "".join(f"{k} = {json.dumps(v)}\n" for k, v in cfg.to_dict().items())


def resolve_config(file_values=None, overrides=None):
    """Defaults, then file values, then non-None overrides."""
    d = TrainConfig().to_dict()
    d.update(file_values or {})
    d.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return TrainConfig.from_dict(d)
