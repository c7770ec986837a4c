"""Atmospheric scattering model and synthetic hazy/clean dataset generation."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DomainError, ImageIOError, ShapeError
from .imaging import load_image, quantize, save_image

DEPTH_KINDS = ("linear-ramp", "radial", "random-smooth")
MANIFEST_FORMAT = "hazeguard-dataset/1"
DEPTH_NEAR, DEPTH_FAR = 0.1, 1.2


@dataclass(frozen=True)
class ScatterParams:
    A: tuple[float, float, float]
    beta: float

    def __post_init__(self):
        if len(self.A) != 3 or any(not 0.0 <= a <= 1.0 for a in self.A):
            raise DomainError(f"atmospheric light must be 3 values in [0,1], got {self.A}")
        if self.beta < 0:
            raise DomainError(f"beta must be >= 0, got {self.beta}")


@dataclass
class SynthConfig:
    count: int = 16
    image_size: int = 64
    beta_range: tuple[float, float] = (0.5, 2.0)
    A_range: tuple[float, float] = (0.7, 1.0)
    depth_kind: str = "random-smooth"
    seed: int = 0
    gray_light: bool = True

    def validate(self) -> None:
        if self.count < 1:
            raise ConfigError("count must be >= 1")
        if self.image_size < 8:
            raise ConfigError("image_size must be >= 8")
        lo, hi = self.beta_range
        if not 0 <= lo <= hi:
            raise ConfigError(f"invalid beta_range {self.beta_range}")
        lo, hi = self.A_range
        if not 0 <= lo <= hi <= 1:
            raise ConfigError(f"invalid A_range {self.A_range}")
        if self.depth_kind not in DEPTH_KINDS:
            raise ConfigError(f"depth_kind must be one of {DEPTH_KINDS}, got {self.depth_kind!r}")


def transmission(depth, beta: float) -> np.ndarray:
    if beta < 0:
        raise DomainError(f"beta must be >= 0, got {beta}")
    d = np.asarray(depth, dtype=np.float64)
    if np.any(d < 0):
        raise DomainError("depth must be nonnegative")
    return np.exp(-beta * d)


def apply_haze(x, depth, params: ScatterParams) -> np.ndarray:
    """Hazy observation ``x * t + A * (1 - t)`` with ``t = exp(-beta * depth)``."""
    x = np.asarray(x, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != 3 or d.shape != x.shape[:2]:
        raise ShapeError(f"image {x.shape} and depth {d.shape} do not align")
    t = transmission(d, params.beta)[..., None]
    A = np.asarray(params.A, dtype=np.float64)
    return x * t + A * (1.0 - t)


def invert_haze(y, depth, params: ScatterParams) -> np.ndarray:
    """Closed-form clean estimate from known scattering parameters."""
    y = np.asarray(y, dtype=np.float64)
    t = transmission(depth, params.beta)[..., None]
    A = np.asarray(params.A, dtype=np.float64)
    return (y - A * (1.0 - t)) / t


# ---------------------------------------------------------------------------
# procedural scenes and depth fields


def _smooth_field(rng: np.random.Generator, size: int, n_waves: int = 4) -> tuple[np.ndarray, list]:
    yy, xx = np.mgrid[0:size, 0:size] / size
    waves = []
    out = np.zeros((size, size))
    for _ in range(n_waves):
        fx, fy = rng.uniform(-2.5, 2.5, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.3, 1.0)
        waves.append([float(fx), float(fy), float(phase), float(amp)])
        out += amp * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    return out, waves


def _waves_field(waves: Sequence[Sequence[float]], size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = np.zeros((size, size))
    for fx, fy, phase, amp in waves:
        out += amp * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    return out


def _rescale(field: np.ndarray, lo: float, hi: float) -> np.ndarray:
    span = field.max() - field.min()
    if span <= 0:
        return np.full_like(field, (lo + hi) / 2)
    return lo + (hi - lo) * (field - field.min()) / span


def depth_from_params(kind: str, params: dict, size: int) -> np.ndarray:
    """Rebuild a depth map from the parameters stored in a manifest."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    if kind == "linear-ramp":
        ang = params["angle"]
        raw = np.cos(ang) * xx + np.sin(ang) * yy
    elif kind == "radial":
        cx, cy = params["center"]
        raw = -np.hypot(xx - cx, yy - cy)
    elif kind == "random-smooth":
        raw = _waves_field(params["waves"], size)
    else:
        raise ConfigError(f"unknown depth kind {kind!r}")
    return _rescale(raw, DEPTH_NEAR, DEPTH_FAR)


def _sample_depth(rng: np.random.Generator, kind: str, size: int) -> tuple[np.ndarray, dict]:
    if kind == "linear-ramp":
        params = {"angle": float(rng.uniform(0, 2 * np.pi))}
    elif kind == "radial":
        params = {"center": [float(v) for v in rng.uniform(0.2, 0.8, size=2)]}
    else:
        _, waves = _smooth_field(rng, size, n_waves=3)
        params = {"waves": waves}
    return depth_from_params(kind, params, size), params


def procedural_scene(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth colour field with a handful of flat-coloured rectangles and discs."""
    img = np.stack([_rescale(_smooth_field(rng, size)[0], *sorted(rng.uniform(0, 1, 2))) for _ in range(3)], axis=-1)
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(int(rng.integers(3, 7))):
        colour = rng.uniform(0, 1, 3)
        if rng.random() < 0.5:
            x0, y0 = rng.integers(0, size - 2, 2)
            w, h = rng.integers(2, max(3, size // 2), 2)
            mask = (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)
        else:
            cx, cy = rng.uniform(0, size, 2)
            r = rng.uniform(size / 16, size / 4)
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        img[mask] = colour
    return np.clip(img, 0.0, 1.0)


def synthesize_pair(cfg: SynthConfig, index: int) -> tuple[np.ndarray, np.ndarray, dict]:
    """Deterministic (clean, hazy, record) triple for image ``index``."""
    rng = np.random.default_rng([cfg.seed, index])
    clean = procedural_scene(rng, cfg.image_size)
    depth, depth_params = _sample_depth(rng, cfg.depth_kind, cfg.image_size)
    beta = float(rng.uniform(*cfg.beta_range))
    if cfg.gray_light:
        a = float(rng.uniform(*cfg.A_range))
        A = (a, a, a)
    else:
        A = tuple(float(v) for v in rng.uniform(*cfg.A_range, size=3))
    params = ScatterParams(A=A, beta=beta)
    hazy = apply_haze(clean, depth, params)
    record = {
        "index": index,
        "A": list(A),
        "beta": beta,
        "depth_kind": cfg.depth_kind,
        "depth_params": depth_params,
    }
    return clean, hazy, record


def generate_dataset(cfg: SynthConfig, out_dir) -> dict:
    """Write ``clean/NNNN.png``, ``hazy/NNNN.png`` and ``manifest.json`` under ``out_dir``."""
    cfg.validate()
    out = Path(out_dir)
    try:
        (out / "clean").mkdir(parents=True, exist_ok=True)
        (out / "hazy").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ImageIOError(f"cannot create dataset directory {out}: {exc}") from exc

    pairs = []
    for i in range(cfg.count):
        clean, hazy, record = synthesize_pair(cfg, i)
        name = f"{i:04d}.png"
        save_image(clean, out / "clean" / name)
        save_image(hazy, out / "hazy" / name)
        record.update(clean=f"clean/{name}", hazy=f"hazy/{name}")
        pairs.append(record)

    manifest = {
        "format": MANIFEST_FORMAT,
        "config": asdict(cfg),
        "image_size": cfg.image_size,
        "pairs": pairs,
    }
    try:
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise ImageIOError(f"cannot write manifest in {out}: {exc}") from exc
    return manifest


@dataclass
class HazeDataset:
    """In-memory paired dataset: ``hazy[i]`` is the input, ``clean[i]`` the target."""

    hazy: list[np.ndarray]
    clean: list[np.ndarray]
    records: list[dict] = field(default_factory=list)
    manifest_hash: str = ""

    def __len__(self) -> int:
        return len(self.hazy)

    def subset(self, indices: Sequence[int]) -> "HazeDataset":
        return HazeDataset(
            hazy=[self.hazy[i] for i in indices],
            clean=[self.clean[i] for i in indices],
            records=[self.records[i] for i in indices] if self.records else [],
            manifest_hash=self.manifest_hash,
        )

    def params(self, i: int) -> tuple[np.ndarray, ScatterParams]:
        rec = self.records[i]
        depth = depth_from_params(rec["depth_kind"], rec["depth_params"], self.clean[i].shape[0])
        return depth, ScatterParams(A=tuple(rec["A"]), beta=rec["beta"])


def manifest_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_dataset(root) -> HazeDataset:
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise ImageIOError(f"no manifest.json in {root}")
    manifest = json.loads(mpath.read_text())
    hazy, clean = [], []
    for rec in manifest["pairs"]:
        hazy.append(load_image(root / rec["hazy"]))
        clean.append(load_image(root / rec["clean"]))
    return HazeDataset(hazy=hazy, clean=clean, records=manifest["pairs"], manifest_hash=manifest_hash(mpath))


def in_memory_dataset(cfg: SynthConfig, quantized: bool = True) -> HazeDataset:
    """Same pairs :func:`generate_dataset` writes, without touching the disk."""
    cfg.validate()
    hazy, clean, records = [], [], []
    for i in range(cfg.count):
        c, h, rec = synthesize_pair(cfg, i)
        if quantized:
            c, h = quantize(c), quantize(h)
        clean.append(c)
        hazy.append(h)
        records.append(rec)
    digest = hashlib.sha256(json.dumps({"config": asdict(cfg), "pairs": records}, sort_keys=True).encode()).hexdigest()
    return HazeDataset(hazy=hazy, clean=clean, records=records, manifest_hash=digest)
