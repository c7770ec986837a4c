"""A small windowed-attention dehazing transformer.

Layout: strided patch embedding -> ``num_blocks`` pre-norm blocks (windowed
multi-head self-attention + MLP) -> 1x1 reconstruction head with pixel
shuffle -> global input residual -> clamp to ``[0, 1]``.

Each block output is a *boundary*: ``model.adapters[i]`` is applied right
after block ``i`` (an ``nn.Identity`` until an adapter strategy replaces it).
"""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ContractError, ShapeError

GROUPS = ("backbone", "final-layer", "bias", "adapter-scale", "adapter-linear")


@dataclass
class NetConfig:
    embed_dim: int = 24
    num_blocks: int = 4
    num_heads: int = 2
    patch_size: int = 4
    window_size: int = 8
    mlp_ratio: float = 2.0
    seed: int = 0

    def validate(self) -> None:
        for name in ("embed_dim", "num_blocks", "num_heads", "patch_size", "window_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")


@dataclass(frozen=True)
class RegistryEntry:
    name: str
    shape: tuple[int, ...]
    trainable: bool
    group: str

    @property
    def size(self) -> int:
        return math.prod(self.shape)


@dataclass(frozen=True)
class BlockBoundary:
    index: int
    channel_count: int


def param_group(name: str) -> str:
    if name.startswith("head."):
        return "final-layer"
    if re.fullmatch(r"adapters\.\d+\.scale", name):
        return "adapter-scale"
    if name.startswith("adapters."):
        return "adapter-linear"
    if name.endswith(".bias"):
        return "bias"
    return "backbone"


def relative_position_bias(wh: int, ww: int, num_heads: int) -> torch.Tensor:
    """Fixed distance-decay bias, one slope per head: ``-slope_h * ||p_i - p_j||``."""
    ys, xs = torch.meshgrid(torch.arange(wh), torch.arange(ww), indexing="ij")
    pos = torch.stack([ys.flatten(), xs.flatten()], dim=-1).double()
    dist = torch.cdist(pos, pos)
    slopes = torch.tensor([2.0 ** -(h + 1) for h in range(num_heads)], dtype=torch.float64)
    return -slopes[:, None, None] * dist[None]


class WindowAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, windows: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
        # windows: (B*, N, C)
        b, n, c = windows.shape
        qkv = self.qkv(windows).reshape(b, n, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim) + bias
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, window_size: int, mlp_ratio: float):
        super().__init__()
        self.window_size = window_size
        self.num_heads = num_heads
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = max(1, int(round(dim * mlp_ratio)))
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        b, c, h, w = f.shape
        wh, ww = min(self.window_size, h), min(self.window_size, w)
        if h % wh or w % ww:
            raise ShapeError(f"token grid {h}x{w} not divisible by window {wh}x{ww}")
        t = f.permute(0, 2, 3, 1)  # B,H,W,C
        win = self.norm1(t).reshape(b, h // wh, wh, w // ww, ww, c).permute(0, 1, 3, 2, 4, 5).reshape(-1, wh * ww, c)
        bias = relative_position_bias(wh, ww, self.num_heads).to(dtype=f.dtype, device=f.device)
        a = self.attn(win, bias)
        a = a.reshape(b, h // wh, w // ww, wh, ww, c).permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, c)
        t = t + a
        t = t + self.mlp(self.norm2(t))
        return t.permute(0, 3, 1, 2)


class DehazeNet(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        c, p = cfg.embed_dim, cfg.patch_size
        self.patch_embed = nn.Conv2d(3, c, kernel_size=p, stride=p)
        self.blocks = nn.ModuleList(
            TransformerBlock(c, cfg.num_heads, cfg.window_size, cfg.mlp_ratio) for _ in range(cfg.num_blocks)
        )
        self.adapters = nn.ModuleList(nn.Identity() for _ in range(cfg.num_blocks))
        self.head = nn.Conv2d(c, 3 * p * p, kernel_size=1)
        self.adapter_spec = None

    def boundaries(self) -> list[BlockBoundary]:
        return [BlockBoundary(i, self.cfg.embed_dim) for i in range(self.cfg.num_blocks)]

    def registry(self) -> list[RegistryEntry]:
        return [
            RegistryEntry(name, tuple(p.shape), p.requires_grad, param_group(name))
            for name, p in self.named_parameters()
        ]

    def features(self, x: torch.Tensor) -> torch.Tensor:
        f = self.patch_embed(x)
        for block, adapter in zip(self.blocks, self.adapters):
            f = adapter(block(f))
        return f

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected a (B, 3, H, W) batch, got {tuple(x.shape)}")
        p = self.cfg.patch_size
        if x.shape[2] % p or x.shape[3] % p:
            raise ShapeError(f"spatial dims {tuple(x.shape[2:])} not divisible by patch_size {p}")
        residual = F.pixel_shuffle(self.head(self.features(x)), p)
        return torch.clamp(x + residual, 0.0, 1.0)


def build(cfg: NetConfig | None = None) -> DehazeNet:
    """Construct a model; weights depend only on ``cfg.seed``."""
    cfg = cfg or NetConfig()
    cfg.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = DehazeNet(cfg)
    return model


def config_dict(model: DehazeNet) -> dict:
    return asdict(model.cfg)


def count_trainable(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


# ---------------------------------------------------------------------------
# numpy <-> torch helpers (images are HxWx3, batches NxHxWx3)


def to_tensor(x, dtype=torch.float32) -> torch.Tensor:
    arr = torch.as_tensor(np.asarray(x), dtype=dtype)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ShapeError(f"expected HxWx3 or NxHxWx3 array, got {tuple(arr.shape)}")
    return arr.permute(0, 3, 1, 2).contiguous()


def to_numpy(t: torch.Tensor) -> np.ndarray:
    return t.detach().permute(0, 2, 3, 1).cpu().numpy().astype(np.float64)


def model_dtype(model: nn.Module) -> torch.dtype:
    p = next(model.parameters(), None)
    return torch.get_default_dtype() if p is None else p.dtype


@torch.no_grad()
def predict(model: nn.Module, x, batch_size: int = 32) -> np.ndarray:
    """Run the model on an image or a batch of images (numpy in, numpy out)."""
    single = np.asarray(x).ndim == 3
    xt = to_tensor(x, dtype=model_dtype(model))
    outs = [model(xt[i : i + batch_size]) for i in range(0, len(xt), batch_size)]
    out = to_numpy(torch.cat(outs))
    return out[0] if single else out


def gradient_wrt_input(model: nn.Module, x, objective: Callable[[torch.Tensor], torch.Tensor]) -> np.ndarray:
    """Reverse-mode gradient of ``objective(forward(x))`` with respect to ``x``.

    ``objective`` receives the prediction as an ``HxWx3`` tensor and must return a
    scalar tensor.
    """
    xt = to_tensor(x, dtype=model_dtype(model)).requires_grad_(True)
    out = model(xt)[0].permute(1, 2, 0)
    value = objective(out)
    if not isinstance(value, torch.Tensor):
        value = torch.as_tensor(value, dtype=out.dtype)
    if value.numel() != 1:
        raise ContractError(f"objective must be scalar, got shape {tuple(value.shape)}")
    value = value.reshape(())
    if not value.requires_grad:
        return np.zeros(np.asarray(x).shape)
    (grad,) = torch.autograd.grad(value, xt, allow_unused=True)
    if grad is None:
        return np.zeros(np.asarray(x).shape)
    return to_numpy(grad)[0]
