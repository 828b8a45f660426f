"""Plain-text run configuration.

One ``section.key = value`` entry per line; ``#`` starts a comment. Values
are parsed as JSON when possible (numbers, ``true``/``false``, lists in
brackets) and kept as bare strings otherwise. Sections used by the CLI are
``data``, ``model`` and ``train``; ``run`` holds paths and bookkeeping.

Example::

    model.preset = desk
    model.code_dim = 1024
    train.max_steps = 2000
    train.lr = 0.001
"""
from __future__ import annotations

import json
from pathlib import Path


def parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def format_value(value) -> str:
    if isinstance(value, str):
        # keep strings that would re-parse as something else quoted
        return json.dumps(value) if parse_value(value) != value else value
    if isinstance(value, tuple):
        value = list(value)
    return json.dumps(value)


def _set(cfg: dict, key: str, value):
    section, sep, name = key.partition(".")
    if not sep or not section or not name:
        raise ValueError(f"config key {key!r} must look like section.name")
    cfg.setdefault(section, {})[name] = value


def parse_config(text: str, source: str = "<config>") -> dict:
    cfg: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{source}:{lineno}: expected 'key = value'")
        try:
            _set(cfg, key.strip(), parse_value(value))
        except ValueError as e:
            raise ValueError(f"{source}:{lineno}: {e}") from None
    return cfg


def load_config(path) -> dict:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def apply_overrides(cfg: dict, overrides) -> dict:
    for item in overrides or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"override {item!r} must be key=value")
        _set(cfg, key.strip(), parse_value(value))
    return cfg


def dump_config(cfg: dict) -> str:
    lines = []
    for section in sorted(cfg):
        for name in sorted(cfg[section]):
            lines.append(f"{section}.{name} = {format_value(cfg[section][name])}")
    return "\n".join(lines) + "\n"
