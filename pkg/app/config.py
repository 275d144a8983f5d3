# app/config.py
"""Scenario files: TOML text parsed into the strict ``Scenario`` model.

Unknown keys are rejected. Every failure surfaces as ``ConfigError`` carrying the file path and,
where it can be recovered, the line of the offending key.
"""
from __future__ import annotations

import os
import re
from typing import Any, Dict, List, Optional, Sequence, Union

import toml
from pydantic import ValidationError

from models import Scenario

_SECTION = re.compile(r"^\s*\[\[?\s*([^\]]+?)\s*\]\]?\s*(#.*)?$")
_KEY = re.compile(r"^\s*([A-Za-z0-9_\-]+)\s*=")


class ConfigError(ValueError):
    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        self.message = message
        where = path or "<scenario>"
        if line is not None:
            where = f"{where}:{line}"
        super().__init__(f"{where}: {message}")


def _key_lines(text: str) -> Dict[tuple, int]:
    """Map (section..., key) tuples and section tuples to their 1-based line numbers."""
    out: Dict[tuple, int] = {}
    section: tuple = ()
    for n, raw in enumerate(text.splitlines(), start=1):
        m = _SECTION.match(raw)
        if m:
            section = tuple(p.strip() for p in m.group(1).split("."))
            out.setdefault(section, n)
            continue
        m = _KEY.match(raw)
        if m:
            out.setdefault(section + (m.group(1),), n)
    return out


def _line_for(loc: Sequence[Union[str, int]], lines: Dict[tuple, int]) -> Optional[int]:
    keys = tuple(p for p in loc if isinstance(p, str))
    while keys:
        if keys in lines:
            return lines[keys]
        keys = keys[:-1]
    return None


def parse_scenario(text: str, path: Optional[str] = None) -> Scenario:
    try:
        data = toml.loads(text)
    except toml.TomlDecodeError as e:
        raise ConfigError(f"TOML syntax error: {e.msg}", path, getattr(e, "lineno", None)) from e
    return scenario_from_dict(data, path, text)


def scenario_from_dict(data: Dict[str, Any], path: Optional[str] = None, text: str = "") -> Scenario:
    try:
        return Scenario.model_validate(data)
    except ValidationError as e:
        lines = _key_lines(text)
        first = e.errors()[0]
        loc = first.get("loc", ())
        key = ".".join(str(p) for p in loc) or "<root>"
        problems: List[str] = [f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()]
        message = f"invalid value for {key}: {first['msg']}"
        if len(problems) > 1:
            message += f" (+{len(problems) - 1} more: {'; '.join(problems[1:])})"
        raise ConfigError(message, path, _line_for(loc, lines)) from e


def load_scenario(path: str) -> Scenario:
    if not os.path.exists(path):
        raise ConfigError("file not found", path)
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    return parse_scenario(text, path)
