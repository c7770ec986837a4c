"""Layered run configuration: built-in defaults < TOML file < command-line flags.

Config files are flat TOML documents with dotted keys::

    seed = 3
    attack.linf.epsilon = "1/255"
    train.epochs = 20

Every key must be known; values are coerced to the type of the default.
"""

from __future__ import annotations

import json
import sys
from fractions import Fraction
from pathlib import Path

from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised only on 3.10
    import tomli as tomllib

FRACTION = "fraction"
PAIR = "pair"

# key -> (default, type)
SCHEMA: dict[str, tuple[object, object]] = {
    "seed": (0, int),
    "data.count": (16, int),
    "data.image_size": (64, int),
    "data.seed": (0, int),
    "data.beta_range": ((0.5, 2.0), PAIR),
    "data.A_range": ((0.7, 1.0), PAIR),
    "data.depth_kind": ("random-smooth", str),
    "data.gray_light": (True, bool),
    "model.embed_dim": (24, int),
    "model.num_blocks": (4, int),
    "model.num_heads": (2, int),
    "model.patch_size": (4, int),
    "model.window_size": (8, int),
    "model.mlp_ratio": (2.0, float),
    "train.epochs": (15, int),
    "train.batch_size": (8, int),
    "train.learning_rate": (1e-5, float),
    "train.patch_size": (64, int),
    "train.samples_per_epoch": (500, int),
    "train.val_size": (8, int),
    "train.val_steps": (10, int),
    "train.attack_steps": (5, int),
    "train.attack_epsilon": (1 / 255, FRACTION),
    "finetune.adapter": ("linead", str),
    "finetune.kernel_size": (3, int),
    "finetune.defense": ("at", str),
    "finetune.lambda": (None, float),
    "attack.linf.epsilon": (1 / 255, FRACTION),
    "attack.linf.steps": (10, int),
    "attack.linf.step_size": (None, FRACTION),
    "attack.l0.pixels": (1, int),
    "attack.l0.pop_size": (40, int),
    "attack.l0.iterations": (30, int),
    "eval.sigma": (0.01, float),
    "eval.noise_reading": ("std", str),
    "eval.linf": ((1 / 255, 4 / 255), "fractions"),
    "eval.l0": ((1, 8), "ints"),
}


def defaults() -> dict:
    return {k: v for k, (v, _) in SCHEMA.items()}


def parse_fraction(text) -> float:
    """``"1/255"`` -> 0.0039..., ``"0.5"`` or ``0.5`` -> 0.5."""
    if isinstance(text, bool):
        raise ConfigError(f"not a number: {text!r}")
    if isinstance(text, (int, float)):
        return float(text)
    try:
        return float(Fraction(str(text).strip()))
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"not a number or fraction: {text!r}") from exc


def coerce(key: str, value):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key: {key!r}")
    if value is None:
        return None
    _, kind = SCHEMA[key]
    try:
        if kind is bool:
            if isinstance(value, str) and value.lower() in ("true", "false"):
                return value.lower() == "true"
            if not isinstance(value, bool):
                raise TypeError
            return value
        if kind is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if kind is float:
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if kind is str:
            if not isinstance(value, str):
                raise TypeError
            return value
        if kind == FRACTION:
            return parse_fraction(value)
        if kind == PAIR:
            lo, hi = (float(v) for v in value)
            return (lo, hi)
        if kind == "fractions":
            items = value.split(",") if isinstance(value, str) else value
            return tuple(parse_fraction(v) for v in items)
        if kind == "ints":
            items = value.split(",") if isinstance(value, str) else value
            return tuple(int(v) for v in items)
    except ConfigError as exc:
        raise ConfigError(f"{key}: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key!r}: {value!r}") from exc
    raise AssertionError(kind)


def _flatten(tree: dict, prefix: str = "") -> dict:
    flat = {}
    for k, v in tree.items():
        name = f"{prefix}{k}"
        if isinstance(v, dict):
            flat.update(_flatten(v, name + "."))
        else:
            flat[name] = v
    return flat


def read_config_file(path) -> dict:
    """Parse a TOML file into a flat ``{dotted.key: value}`` dict (validated)."""
    path = Path(path)
    try:
        tree = tomllib.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return {k: coerce(k, v) for k, v in _flatten(tree).items()}


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Resolve defaults, then the file at ``path``, then ``overrides`` (None values skipped)."""
    cfg = defaults()
    if path is not None:
        cfg.update(read_config_file(path))
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = coerce(k, v)
    return cfg


def echo_config(cfg: dict, out_dir, name: str = "resolved_config.json") -> Path:
    """Write the resolved config next to a run's outputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(json.dumps({k: cfg[k] for k in sorted(cfg)}, indent=2) + "\n")
    return path
