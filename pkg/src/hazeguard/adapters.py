"""Parameter-efficient fine-tuning strategies.

``LL``
    Train the reconstruction head only.
``SB``
    Insert a scale (init 1.0) after every block; train the scales and all
    bias vectors.
``LINEAD``
    Insert a channel-preserving ``k x k`` convolution after every block,
    initialised to the identity (Dirac kernel, zero bias); train only those.

All strategies return a new model and leave the input model untouched. Adapted
models compute exactly the same function as the base model until trained.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ConfigError, StructureError
from .net import DehazeNet

METHODS = ("LL", "SB", "LINEAD")


@dataclass(frozen=True)
class AdapterSpec:
    method: str = "LINEAD"
    kernel_size: int = 3
    per_channel_scale: bool = False

    def __post_init__(self):
        object.__setattr__(self, "method", self.method.upper())
        if self.method not in METHODS:
            raise ConfigError(f"adapter method must be one of {METHODS}, got {self.method!r}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be a positive odd integer, got {self.kernel_size}")


@dataclass(frozen=True)
class TuneStats:
    total_params: int
    tuned_params: int
    tuned_percent: float


class ScaleAdapter(nn.Module):
    def __init__(self, channels: int, per_channel: bool = False):
        super().__init__()
        shape = (1, channels, 1, 1) if per_channel else ()
        self.scale = nn.Parameter(torch.ones(shape))

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return f * self.scale


class LinearAdapter(nn.Conv2d):
    """Identity-initialised convolution with reflected same-padding."""

    def __init__(self, channels: int, kernel_size: int = 3):
        super().__init__(channels, channels, kernel_size, padding=kernel_size // 2, padding_mode="reflect")
        with torch.no_grad():
            nn.init.dirac_(self.weight)
            self.bias.zero_()

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        pad = self.kernel_size[0] // 2
        if pad and min(f.shape[-2:]) <= pad:
            # reflection needs more than `pad` samples per side
            f = nn.functional.pad(f, (pad, pad, pad, pad), mode="replicate")
            return nn.functional.conv2d(f, self.weight, self.bias)
        return super().forward(f)


def _prepare(model: DehazeNet) -> DehazeNet:
    if not isinstance(model, DehazeNet):
        raise StructureError("adapters apply to DehazeNet models")
    if model.adapter_spec is not None:
        raise StructureError(f"model already carries a {model.adapter_spec.method} adapter")
    if not model.boundaries():
        raise StructureError("model exposes no block boundaries")
    return copy.deepcopy(model)


def _freeze_except(model: DehazeNet, groups: set[str]) -> None:
    for entry, p in zip(model.registry(), model.parameters()):
        p.requires_grad_(entry.group in groups)


def apply_ll(model: DehazeNet) -> DehazeNet:
    adapted = _prepare(model)
    if not any(e.group == "final-layer" for e in adapted.registry()):
        raise StructureError("model has no final-layer parameters")
    _freeze_except(adapted, {"final-layer"})
    adapted.adapter_spec = AdapterSpec("LL")
    return adapted


def apply_sb(model: DehazeNet, per_channel: bool = False) -> DehazeNet:
    adapted = _prepare(model)
    dtype = next(adapted.parameters()).dtype
    for b in adapted.boundaries():
        adapted.adapters[b.index] = ScaleAdapter(b.channel_count, per_channel).to(dtype)
    _freeze_except(adapted, {"adapter-scale", "bias"})
    adapted.adapter_spec = AdapterSpec("SB", per_channel_scale=per_channel)
    return adapted


def apply_linead(model: DehazeNet, spec: AdapterSpec | None = None) -> DehazeNet:
    spec = spec or AdapterSpec("LINEAD")
    adapted = _prepare(model)
    dtype = next(adapted.parameters()).dtype
    for b in adapted.boundaries():
        adapted.adapters[b.index] = LinearAdapter(b.channel_count, spec.kernel_size).to(dtype)
    _freeze_except(adapted, {"adapter-linear"})
    adapted.adapter_spec = AdapterSpec("LINEAD", kernel_size=spec.kernel_size)
    return adapted


def apply_adapter(model: DehazeNet, spec: AdapterSpec) -> DehazeNet:
    if spec.method == "LL":
        return apply_ll(model)
    if spec.method == "SB":
        return apply_sb(model, spec.per_channel_scale)
    return apply_linead(model, spec)


def linead_extra_params(channels: list[int], kernel_size: int) -> int:
    return sum(c * c * kernel_size**2 + c for c in channels)


def tune_stats(model: nn.Module) -> TuneStats:
    total = sum(p.numel() for p in model.parameters())
    tuned = sum(p.numel() for p in model.parameters() if p.requires_grad)
    return TuneStats(total, tuned, 100.0 * tuned / total if total else 0.0)


def trainable_parameters(model: nn.Module) -> list[nn.Parameter]:
    return [p for p in model.parameters() if p.requires_grad]


def frozen_checksum(model: nn.Module) -> str:
    """Digest of every non-trainable parameter's bytes."""
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        if not p.requires_grad:
            h.update(name.encode())
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
