"""Flat ``key = value`` configuration files.

Precedence is flag > config file > preset/default.  Keys use the long flag
names with dashes or underscores interchangeably (``batch-size`` ==
``batch_size``).
"""

from __future__ import annotations

import argparse
import configparser
from pathlib import Path


class ConfigError(ValueError):
    pass


def read_config(path: str | Path) -> dict[str, str]:
    text = Path(path).read_text()
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = lambda k: k.strip().replace("-", "_")
    try:
        parser.read_string("[config]\n" + text, source=str(path))
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from None
    if len(parser.sections()) != 1:
        raise ConfigError(f"{path}: sections are not supported; use flat key = value lines")
    return dict(parser["config"])


def apply_config(args: argparse.Namespace, parser: argparse.ArgumentParser,
                 values: dict[str, str]) -> None:
    """Fill every option the user left unset (None) from ``values``."""
    actions = {a.dest: a for a in parser._actions}
    for key, raw in values.items():
        if key not in actions or key in ("help", "config"):
            raise ConfigError(f"unknown config key {key!r}")
        if getattr(args, key, None) is not None:
            continue
        act = actions[key]
        if act.nargs == 0:  # store_true style
            val = raw.lower() in ("1", "true", "yes", "on")
        else:
            try:
                val = act.type(raw) if act.type else raw
            except (TypeError, ValueError):
                raise ConfigError(f"bad value for {key}: {raw!r}") from None
            if act.choices is not None and val not in act.choices:
                raise ConfigError(f"{key} must be one of {sorted(act.choices)}")
        setattr(args, key, val)
