"""Experiment configuration: JSON with comments, defaults and dot-path overrides."""

from __future__ import annotations

import copy
import json
import re
from importlib import resources
from pathlib import Path
from typing import Any

EXPERIMENTS = ("snr", "covariance", "linear-reg", "averaging", "linear-sanity")
COMMANDS = ("gen", "train", "eval")


class ConfigError(ValueError):
    """The configuration cannot be parsed or fails validation."""


_STRING_OR_COMMENT = re.compile(r'"(?:\\.|[^"\\])*"|//[^\n]*|/\*.*?\*/', re.DOTALL)


def strip_comments(text: str) -> str:
    """Remove ``//`` and ``/* */`` comments that are not inside strings."""
    return _STRING_OR_COMMENT.sub(lambda m: m.group(0) if m.group(0).startswith('"') else "", text)


def parse_config_text(text: str) -> dict:
    try:
        data = json.loads(strip_comments(text))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("top-level config must be an object")
    return data


def load_config_file(path: str | Path) -> dict:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def default_config(experiment: str) -> dict:
    """The shipped default config for an experiment or a gen/train/eval command."""
    if experiment not in EXPERIMENTS + COMMANDS:
        raise ConfigError(f"unknown experiment {experiment!r}")
    text = resources.files("bce.configs").joinpath(f"{experiment}.json").read_text(encoding="utf-8")
    return parse_config_text(text)


def deep_merge(base: dict, override: dict) -> dict:
    """Recursive merge; nested dicts merge, everything else replaces.

    A dict carrying a ``"kind"`` key is a complete descriptor (model or
    prior) and replaces the default wholesale.
    """
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and "kind" not in value:
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_value(text: str) -> Any:
    """JSON literal if it parses, else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_path(cfg: dict, dotted: str, value: Any, strict: bool = True) -> None:
    """Assign ``cfg[a][b][c] = value`` for ``dotted = "a.b.c"``.

    With ``strict`` the key must already exist (typos fail loudly instead
    of silently adding an unused entry).
    """
    keys = dotted.split(".")
    node = cfg
    for i, key in enumerate(keys[:-1]):
        if key not in node or not isinstance(node[key], dict):
            if strict:
                raise ConfigError(f"unknown config key {'.'.join(keys[:i + 1])!r}")
            node[key] = {}
        node = node[key]
    if strict and keys[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[keys[-1]] = value


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    out = copy.deepcopy(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, _, raw = item.partition("=")
        set_path(out, key.strip(), parse_value(raw.strip()))
    return out


def resolve_config(experiment: str | None, path: str | Path | None, overrides: list[str]) -> dict:
    """Defaults for the experiment, merged with the file, then the overrides.

    The experiment name comes from the argument or the file's
    ``"experiment"`` key.
    """
    user = load_config_file(path) if path else {}
    name = experiment or user.get("experiment")
    if name is None:
        raise ConfigError("config does not name an experiment")
    if user.get("experiment", name) != name:
        raise ConfigError(f"config is for {user['experiment']!r}, not {name!r}")
    defaults = default_config(name)
    unknown = set(user) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = deep_merge(defaults, user)
    cfg["experiment"] = name
    return apply_overrides(cfg, overrides)


def dump_config(cfg: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
