"""Clean training, adversarial training (AT) and TRADES fine-tuning loops."""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

from .adapters import AdapterSpec, apply_adapter, frozen_checksum, trainable_parameters
from .attacks import LinfBudget, pgd_perturb
from .checkpoint import save_adapter_checkpoint, save_checkpoint
from .errors import ConfigError, ShapeError, StructureError
from .haze import HazeDataset
from .imaging import psnr
from .net import DehazeNet, model_dtype, to_numpy, to_tensor

log = logging.getLogger(__name__)

DEFENSES = ("none", "AT", "TRADES")
DEFAULT_LAMBDA = 0.5


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 8
    learning_rate: float = 1e-5
    patch_size: int = 64
    samples_per_epoch: int = 500
    defense: str = "none"
    lam: float | None = None
    attack_budget: LinfBudget = field(default_factory=lambda: LinfBudget(epsilon=1 / 255, steps=5))
    seed: int = 0
    val_size: int = 8
    val_steps: int = 10

    def __post_init__(self):
        aliases = {"none": "none", "at": "AT", "trades": "TRADES"}
        if str(self.defense).lower() not in aliases:
            raise ConfigError(f"defense must be one of {DEFENSES}, got {self.defense!r}")
        self.defense = aliases[str(self.defense).lower()]
        if self.lam is not None and self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        for name in ("batch_size", "patch_size", "samples_per_epoch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")

    @property
    def trades_lambda(self) -> float:
        return DEFAULT_LAMBDA if self.lam is None else float(self.lam)


@dataclass
class EpochRecord:
    epoch: int
    base_loss: float
    reg_loss: float
    clean_psnr: float
    adv_psnr: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "base_loss", "reg_loss", "clean_psnr", "adv_psnr"])
            for r in self.records:
                writer.writerow([r.epoch, repr(r.base_loss), repr(r.reg_loss), repr(r.clean_psnr), repr(r.adv_psnr)])

    def to_list(self) -> list[dict]:
        return [asdict(r) for r in self.records]


def base_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over every element."""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    return (pred - target).abs().mean()


def trades_loss(model, x: torch.Tensor, y: torch.Tensor, z: torch.Tensor, lam: float):
    """``l1(T(x), y) + lam * l1(T(x), T(clip(x + z)))``; returns (total, base, reg)."""
    pred = model(x)
    pred_adv = model(torch.clamp(x + z.to(x.dtype), 0.0, 1.0))
    base = base_loss(pred, y)
    reg = base_loss(pred, pred_adv)
    return base + lam * reg, base, reg


def step_seed(seed: int, epoch: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, step]).generate_state(1)[0])


def _attack_for_training(model, x: torch.Tensor, y: torch.Tensor, budget: LinfBudget, seed: int) -> torch.Tensor:
    budget = LinfBudget(budget.epsilon, budget.steps, budget.step_size, seed, budget.random_init)
    was_training = model.training
    model.eval()
    try:
        delta, _ = pgd_perturb(model, x, y, budget)
    finally:
        model.train(was_training)
    return delta.to(x.dtype)


def make_optimizer(model, lr: float) -> torch.optim.Optimizer:
    params = trainable_parameters(model)
    if not params:
        raise StructureError("model has no trainable parameters")
    return torch.optim.Adam(params, lr=lr)


def clean_step(model, optimizer, batch, cfg: TrainConfig, seed: int = 0) -> dict:
    x, y = batch
    optimizer.zero_grad(set_to_none=True)
    loss = base_loss(model(x), y)
    loss.backward()
    optimizer.step()
    return {"base": loss.item(), "reg": 0.0, "total": loss.item()}


def at_step(model, optimizer, batch, cfg: TrainConfig, seed: int = 0) -> dict:
    """Attack the current weights, then take one step on the perturbed inputs."""
    x, y = batch
    z = _attack_for_training(model, x, y, cfg.attack_budget, seed)
    x_adv = torch.clamp(x + z, 0.0, 1.0)
    optimizer.zero_grad(set_to_none=True)
    loss = base_loss(model(x_adv), y)
    loss.backward()
    optimizer.step()
    return {"base": loss.item(), "reg": 0.0, "total": loss.item()}


def trades_step(model, optimizer, batch, cfg: TrainConfig, seed: int = 0) -> dict:
    x, y = batch
    z = _attack_for_training(model, x, y, cfg.attack_budget, seed)
    optimizer.zero_grad(set_to_none=True)
    total, base, reg = trades_loss(model, x, y, z, cfg.trades_lambda)
    total.backward()
    optimizer.step()
    return {"base": base.item(), "reg": reg.item(), "total": total.item()}


STEPS = {"none": clean_step, "AT": at_step, "TRADES": trades_step}


def patch_sampler(
    dataset: HazeDataset, patch_size: int, samples_per_epoch: int, seed: int, epoch: int = 0
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Random co-located (hazy, clean) crops; deterministic in ``(seed, epoch)``."""
    if len(dataset) == 0:
        raise ConfigError("dataset is empty")
    for img in dataset.hazy:
        if img.shape[0] < patch_size or img.shape[1] < patch_size:
            raise ConfigError(f"patch_size {patch_size} exceeds image size {img.shape[:2]}")
    rng = np.random.default_rng([seed, epoch])
    for _ in range(samples_per_epoch):
        i = int(rng.integers(len(dataset)))
        h, w = dataset.hazy[i].shape[:2]
        r = int(rng.integers(h - patch_size + 1))
        c = int(rng.integers(w - patch_size + 1))
        yield (
            dataset.hazy[i][r : r + patch_size, c : c + patch_size],
            dataset.clean[i][r : r + patch_size, c : c + patch_size],
        )


def _batches(pairs, batch_size: int, dtype) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    buf = []
    for pair in pairs:
        buf.append(pair)
        if len(buf) == batch_size:
            yield to_tensor(np.stack([p[0] for p in buf]), dtype), to_tensor(np.stack([p[1] for p in buf]), dtype)
            buf = []
    if buf:
        yield to_tensor(np.stack([p[0] for p in buf]), dtype), to_tensor(np.stack([p[1] for p in buf]), dtype)


def validate(model, dataset: HazeDataset, budget: LinfBudget) -> tuple[float, float]:
    """Mean clean and attacked PSNR, one image per forward pass."""
    was_training = model.training
    model.eval()
    clean, attacked = [], []
    dtype = model_dtype(model)
    try:
        x = to_tensor(np.stack(dataset.hazy), torch.float64)
        y = to_tensor(np.stack(dataset.clean), torch.float64)
        delta, _ = pgd_perturb(model, x, y, budget)
        with torch.no_grad():
            for i in range(len(dataset)):
                pred = to_numpy(model(x[i : i + 1].to(dtype)))[0]
                adv = torch.clamp(x[i : i + 1] + delta[i : i + 1], 0.0, 1.0)
                pred_adv = to_numpy(model(adv.to(dtype)))[0]
                clean.append(psnr(pred, dataset.clean[i]))
                attacked.append(psnr(pred_adv, dataset.clean[i]))
    finally:
        model.train(was_training)
    return float(np.mean(clean)), float(np.mean(attacked))


def run_training(
    model: DehazeNet,
    dataset: HazeDataset,
    cfg: TrainConfig,
    val_dataset: HazeDataset | None = None,
    checkpoint_fn=None,
) -> TrainLog:
    """Train ``model`` in place for ``cfg.epochs`` epochs with ``cfg.defense``."""
    if cfg.defense != "TRADES" and cfg.lam is not None:
        warnings.warn(f"lambda={cfg.lam} is ignored with defense={cfg.defense}", stacklevel=2)
    step_fn = STEPS[cfg.defense]
    dtype = model_dtype(model)
    optimizer = make_optimizer(model, cfg.learning_rate) if cfg.epochs else None
    val = val_dataset if val_dataset is not None else dataset.subset(range(min(cfg.val_size, len(dataset))))
    val_budget = LinfBudget(epsilon=cfg.attack_budget.epsilon, steps=cfg.val_steps, seed=cfg.seed)
    trainlog = TrainLog()
    model.train()
    for epoch in range(cfg.epochs):
        base_losses, reg_losses = [], []
        pairs = patch_sampler(dataset, cfg.patch_size, cfg.samples_per_epoch, cfg.seed, epoch)
        for step, batch in enumerate(_batches(pairs, cfg.batch_size, dtype)):
            losses = step_fn(model, optimizer, batch, cfg, step_seed(cfg.seed, epoch, step))
            base_losses.append(losses["base"])
            reg_losses.append(losses["reg"])
        clean_psnr, adv_psnr = validate(model, val, val_budget)
        rec = EpochRecord(epoch + 1, float(np.mean(base_losses)), float(np.mean(reg_losses)), clean_psnr, adv_psnr)
        trainlog.records.append(rec)
        log.info(
            "epoch %d  base=%.5f reg=%.5f clean=%.3f dB adv=%.3f dB",
            rec.epoch, rec.base_loss, rec.reg_loss, rec.clean_psnr, rec.adv_psnr,
        )
        if checkpoint_fn is not None:
            checkpoint_fn(model, rec, trainlog)
    model.eval()
    return trainlog


def pretrain(model: DehazeNet, dataset: HazeDataset, cfg: TrainConfig, out_dir=None, val_dataset=None) -> TrainLog:
    """Clean training of a base model (no adapter); saves ``epoch_NNN.pt``/``best.pt``/``final.pt``."""
    if model.adapter_spec is not None:
        raise StructureError("pretrain expects a base model")
    cfg = TrainConfig(**{**asdict_shallow(cfg), "defense": "none"})
    state = {"best": -np.inf}

    def on_epoch(m, rec, _log):
        out = Path(out_dir)
        save_checkpoint(m, out / f"epoch_{rec.epoch:03d}.pt")
        if rec.clean_psnr > state["best"]:
            state["best"] = rec.clean_psnr
            save_checkpoint(m, out / "best.pt")

    trainlog = run_training(model, dataset, cfg, val_dataset, on_epoch if out_dir else None)
    if out_dir:
        save_checkpoint(model, Path(out_dir) / "final.pt")
        _write_log(trainlog, out_dir)
    return trainlog


def finetune(
    model: DehazeNet,
    adapter: AdapterSpec,
    dataset: HazeDataset,
    cfg: TrainConfig,
    out_dir=None,
    base_path=None,
    val_dataset: HazeDataset | None = None,
) -> tuple[DehazeNet, TrainLog]:
    """Attach ``adapter`` to a copy of ``model`` and train it with ``cfg.defense``.

    With ``out_dir`` set, an adapter checkpoint is written after every epoch
    (``epoch_NNN.pt``) plus ``best.pt`` for the best attacked validation PSNR.
    """
    adapted = apply_adapter(model, adapter)
    before = frozen_checksum(adapted)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if base_path is None:
            base_path = save_checkpoint(model, out / "base.pt")
    state = {"best": -np.inf}
    meta = {"defense": cfg.defense}
    if cfg.defense == "TRADES":
        meta["lambda"] = cfg.trades_lambda

    def on_epoch(m, rec, _log):
        save_adapter_checkpoint(m, out / f"epoch_{rec.epoch:03d}.pt", base_path, meta)
        if rec.adv_psnr > state["best"]:
            state["best"] = rec.adv_psnr
            save_adapter_checkpoint(m, out / "best.pt", base_path, meta)

    trainlog = run_training(adapted, dataset, cfg, val_dataset, on_epoch if out_dir is not None else None)
    if frozen_checksum(adapted) != before:
        raise StructureError("frozen parameters changed during fine-tuning")
    if out_dir is not None:
        save_adapter_checkpoint(adapted, out / "final.pt", base_path, meta)
        _write_log(trainlog, out)
    return adapted, trainlog


def asdict_shallow(cfg: TrainConfig) -> dict:
    return {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}


def _write_log(trainlog: TrainLog, out_dir) -> None:
    out = Path(out_dir)
    trainlog.write_csv(out / "trainlog.csv")
    (out / "trainlog.json").write_text(json.dumps(trainlog.to_list(), indent=2) + "\n")
