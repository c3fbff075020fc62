"""Run configuration: one YAML file with sections, plus dotted ``key=value`` overrides."""
from __future__ import annotations

import copy
import hashlib
import json
from importlib import resources
from pathlib import Path

import yaml

SECTIONS = ("backbone", "adapters", "prompts", "data", "pretrain", "stage1", "stage2", "eval")


class ConfigError(ValueError):
    pass


def default_config() -> dict:
    text = resources.files("anchorad.resources").joinpath("default.yaml").read_text()
    return yaml.safe_load(text)


def _merge(base: dict, upd: dict, path="") -> dict:
    for k, v in upd.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, path + k + ".")
        else:
            base[k] = v
    return base


def set_dotted(cfg: dict, key: str, raw: str) -> None:
    """Apply ``a.b.c=value``; the value is parsed as YAML (so ``1e-5`` stays a float)."""
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config section in {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    value = yaml.safe_load(raw)
    if isinstance(node[parts[-1]], float) and isinstance(value, (int, str)):
        try:
            value = float(value)
        except ValueError as err:
            raise ConfigError(f"{key} expects a number, got {raw!r}") from err
    node[parts[-1]] = value


def load_config(path=None, overrides=()) -> dict:
    cfg = default_config()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        user = yaml.safe_load(path.read_text()) or {}
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a mapping")
        _merge(cfg, user)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        set_dotted(cfg, key.strip(), raw.strip())
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def section(cfg: dict, name: str) -> dict:
    return copy.deepcopy(cfg[name])
