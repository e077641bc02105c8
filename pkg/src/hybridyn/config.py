"""Layered YAML configuration: bundled defaults < user file < ``key.path=value`` overrides."""
from __future__ import annotations

import copy
import hashlib
import json
import re
from importlib import resources

import yaml

from .errors import ContractError


def _defaults_text() -> str:
    return resources.files("hybridyn").joinpath("data", "defaults.yaml").read_text(encoding="utf-8")


def load_defaults() -> dict:
    return yaml.safe_load(_defaults_text())


def deep_merge(base: dict, over: dict, path: str = "") -> dict:
    """Recursive merge; unknown keys in ``over`` are rejected so typos fail loudly."""
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        here = f"{path}{k}"
        if k not in out:
            raise ContractError(f"unknown config key '{here}'")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = deep_merge(out[k], v, here + ".")
        elif isinstance(out[k], dict) != isinstance(v, dict):
            raise ContractError(f"config key '{here}' expects a {'mapping' if isinstance(out[k], dict) else 'value'}")
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(text: str) -> dict:
    if "=" not in text:
        raise ContractError(f"override '{text}' is not of the form key.path=value")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ContractError(f"override '{text}': {exc}") from None
    node = value
    for part in reversed(key.strip().split(".")):
        node = {part: node}
    return node


def load_config(path=None, overrides=()) -> dict:
    cfg = load_defaults()
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                user = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ContractError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ContractError(f"config {path} is not valid YAML: {exc}") from None
        if not isinstance(user, dict):
            raise ContractError(f"config {path} must be a mapping")
        cfg = deep_merge(cfg, user)
    for o in overrides:
        cfg = deep_merge(cfg, parse_override(o))
    return cfg


def config_hash(cfg) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


_KEY_LINE = re.compile(r"^(\s*)([A-Za-z_][\w]*):(.*?)(?:#\s*(.*))?$")


def documented_keys(section: str | None = None) -> list[tuple[str, str, str]]:
    """``(dotted key, default, doc)`` for every leaf in the bundled defaults,
    read from the trailing comments of the YAML file."""
    out, stack = [], []
    for line in _defaults_text().splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        m = _KEY_LINE.match(line)
        if not m:
            continue
        indent, key, value, doc = len(m.group(1)), m.group(2), m.group(3).strip(), m.group(4) or ""
        while stack and stack[-1][0] >= indent:
            stack.pop()
        dotted = ".".join([s[1] for s in stack] + [key])
        if value or doc:
            if section is None or dotted.split(".")[0] == section:
                out.append((dotted, value or "(list)", doc.strip()))
        if not value:
            stack.append((indent, key))
    return out
