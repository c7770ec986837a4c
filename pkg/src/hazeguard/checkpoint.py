"""Checkpoint files for base and adapted models.

A base checkpoint holds every registry parameter plus the ``NetConfig``. An
adapter checkpoint holds only the parameters tuned by the adapter, the adapter
spec, and a reference (relative path + SHA-256) to the base checkpoint, so one
base file can carry many adapter sets.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import asdict
from pathlib import Path

import torch

from .adapters import AdapterSpec, apply_adapter
from .errors import ConfigError, ImageIOError
from .net import DehazeNet, NetConfig, build

BASE_FORMAT = "hazeguard-net/1"
ADAPTER_FORMAT = "hazeguard-adapter/1"


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_checkpoint(model: DehazeNet, path) -> Path:
    if model.adapter_spec is not None:
        raise ConfigError("adapted models are saved with save_adapter_checkpoint")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": BASE_FORMAT,
            "config": asdict(model.cfg),
            "params": {n: p.detach().cpu().clone() for n, p in model.named_parameters()},
        },
        path,
    )
    return path


def save_adapter_checkpoint(model: DehazeNet, path, base_path, meta: dict | None = None) -> Path:
    if model.adapter_spec is None:
        raise ConfigError("model carries no adapter")
    path, base_path = Path(path), Path(base_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": ADAPTER_FORMAT,
            "config": asdict(model.cfg),
            "adapter": asdict(model.adapter_spec),
            "base": {
                "path": os.path.relpath(base_path.resolve(), path.parent.resolve()),
                "sha256": file_sha256(base_path),
            },
            "params": {n: p.detach().cpu().clone() for n, p in model.named_parameters() if p.requires_grad},
            "meta": dict(meta or {}),
        },
        path,
    )
    return path


def _read(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ImageIOError(f"no such checkpoint: {path}")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a variety of unpickling errors
        raise ImageIOError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("format") not in (BASE_FORMAT, ADAPTER_FORMAT):
        raise ConfigError(f"{path} is not a hazeguard checkpoint")
    return blob


def _load_params(model: DehazeNet, params: dict, expected: list[str]) -> None:
    own = dict(model.named_parameters())
    if sorted(params) != sorted(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ConfigError(f"checkpoint parameter names differ (missing={missing}, unexpected={extra})")
    with torch.no_grad():
        for name, value in params.items():
            if tuple(value.shape) != tuple(own[name].shape):
                raise ConfigError(f"shape mismatch for {name}: {tuple(value.shape)} vs {tuple(own[name].shape)}")
            own[name].copy_(value)


def load_checkpoint(path) -> DehazeNet:
    """Load a base or adapter checkpoint (adapter files pull in their base)."""
    path = Path(path)
    blob = _read(path)
    if blob["format"] == BASE_FORMAT:
        model = build(NetConfig(**blob["config"]))
        _load_params(model, blob["params"], [n for n, _ in model.named_parameters()])
        return model

    base_ref = blob["base"]
    base_path = (path.parent / base_ref["path"]).resolve()
    if not base_path.is_file():
        raise ImageIOError(f"base checkpoint {base_path} referenced by {path} is missing")
    if file_sha256(base_path) != base_ref["sha256"]:
        raise ConfigError(f"base checkpoint {base_path} does not match the recorded digest")
    base = load_checkpoint(base_path)
    model = apply_adapter(base, AdapterSpec(**blob["adapter"]))
    _load_params(model, blob["params"], [n for n, p in model.named_parameters() if p.requires_grad])
    return model


def checkpoint_info(path) -> dict:
    """Method and defense recorded in a checkpoint, without building the model."""
    blob = _read(path)
    if blob["format"] == BASE_FORMAT:
        return {"method": "base", "defense": "none"}
    meta = blob.get("meta", {})
    return {"method": blob["adapter"]["method"], "defense": meta.get("defense", "none"), **meta}
