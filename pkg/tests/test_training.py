import copy
import json

import numpy as np
import pytest
import torch

from helpers import interior_image, param_direction_check, rel_err, shrink_head
from hazeguard.adapters import AdapterSpec, apply_linead, frozen_checksum
from hazeguard.attacks import LinfBudget
from hazeguard.errors import ConfigError, ShapeError
from hazeguard.haze import SynthConfig, apply_haze, in_memory_dataset
from hazeguard.net import predict, to_tensor
from hazeguard.training import (
    TrainConfig,
    _attack_for_training,
    at_step,
    base_loss,
    clean_step,
    finetune,
    make_optimizer,
    patch_sampler,
    pretrain,
    trades_loss,
    trades_step,
)


@pytest.fixture(scope="module")
def small_data():
    return in_memory_dataset(SynthConfig(count=4, image_size=16, seed=7))


def small_cfg(**kw):
    base = dict(epochs=2, batch_size=4, learning_rate=1e-3, patch_size=16, samples_per_epoch=8, val_size=2, val_steps=2)
    base.update(kw)
    return TrainConfig(**base)


def batch(rng, n=2, size=16):
    x = rng.random((n, size, size, 3))
    y = np.clip(x + 0.1, 0, 1)
    return to_tensor(x), to_tensor(y)


def test_base_loss_closed_forms():
    t = torch.rand(2, 3, 8, 8) * 0.5
    assert base_loss(t, t).item() == 0.0
    assert base_loss(t + 0.2, t).item() == pytest.approx(0.2, abs=1e-6)
    pred = torch.stack([torch.full((3, 4, 4), 0.1), torch.full((3, 4, 4), 0.3)])
    assert base_loss(pred, torch.zeros_like(pred)).item() == pytest.approx(0.2)
    with pytest.raises(ShapeError):
        base_loss(t, t[:1])


def test_config_validation():
    assert TrainConfig(defense="trades").defense == "TRADES"
    assert TrainConfig().trades_lambda == 0.5
    with pytest.raises(ConfigError):
        TrainConfig(defense="fgsm")
    with pytest.raises(ConfigError):
        TrainConfig(lam=-1.0)


def test_at_step_vanishing_budget_matches_clean_step(tiny_model, rng):
    xb = batch(rng)
    a, b = copy.deepcopy(tiny_model), copy.deepcopy(tiny_model)
    cfg = TrainConfig(learning_rate=1e-3, defense="AT", attack_budget=LinfBudget(epsilon=1e-12, steps=5))
    at_step(a, make_optimizer(a, 1e-3), xb, cfg, seed=1)
    clean_step(b, make_optimizer(b, 1e-3), xb, cfg)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.max(torch.abs(pa - pb)).item() <= 1e-7


def test_at_step_keeps_frozen_params_and_feeds_feasible_inputs(tiny_model, rng):
    model = apply_linead(tiny_model)
    before = frozen_checksum(model)
    seen = []
    model.register_forward_pre_hook(lambda m, args: seen.append(args[0].detach().clone()))
    cfg = TrainConfig(learning_rate=1e-3, defense="AT", attack_budget=LinfBudget(epsilon=8 / 255, steps=2))
    at_step(model, make_optimizer(model, 1e-3), batch(rng), cfg, seed=0)
    assert frozen_checksum(model) == before
    assert seen and all(float(s.min()) >= 0 and float(s.max()) <= 1 for s in seen)


def test_at_step_reduces_adversarial_loss(tiny_model, rng):
    x, y = batch(rng, n=4)
    cfg = TrainConfig(learning_rate=1e-3, defense="AT")

    def adv_loss(m):
        z = _attack_for_training(m, x, y, cfg.attack_budget, seed=3)
        with torch.no_grad():
            return base_loss(m(torch.clamp(x + z, 0, 1)), y).item()

    before = adv_loss(tiny_model)
    at_step(tiny_model, make_optimizer(tiny_model, 1e-3), (x, y), cfg, seed=3)
    assert adv_loss(tiny_model) < before


def test_trades_degenerate_cases(tiny_model, rng):
    x, y = batch(rng)
    z = torch.rand_like(x) * 0.1
    total, base, _ = trades_loss(tiny_model, x, y, z, 0.0)
    assert total.item() == base_loss(tiny_model(x), y).item()
    total, base, reg = trades_loss(tiny_model, x, y, torch.zeros_like(x), 1.0)
    assert reg.item() == 0.0 and total.item() == base.item()


def test_trades_step_lambda_zero_reports_clean_loss(tiny_model, rng):
    xb = batch(rng)
    expected = base_loss(tiny_model(xb[0]), xb[1]).item()
    cfg = TrainConfig(learning_rate=1e-3, defense="TRADES", lam=0.0)
    losses = trades_step(tiny_model, make_optimizer(tiny_model, 1e-3), xb, cfg, seed=0)
    assert losses["total"] == pytest.approx(expected, abs=1e-7)


def test_trades_gradient_matches_finite_differences(tiny_model64, rng):
    model = apply_linead(shrink_head(tiny_model64))
    with torch.no_grad():
        for p in model.adapters.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=torch.Generator().manual_seed(2), dtype=p.dtype))
    x = to_tensor(interior_image(rng, 8), torch.float64)
    y = to_tensor(rng.random((8, 8, 3)), torch.float64)
    z = torch.as_tensor(rng.choice([-0.1, 0.1], size=x.shape))
    names = [e.name for e in model.registry() if e.group == "adapter-linear"]
    for seed in range(5):
        analytic, fd = param_direction_check(model, lambda m: trades_loss(m, x, y, z, 1.0)[0], names, h=1e-6, seed=seed)
        assert rel_err(analytic, fd) < 1e-3


def test_patch_sampler_count_and_determinism(small_data):
    pairs = list(patch_sampler(small_data, 8, 13, seed=4, epoch=1))
    assert len(pairs) == 13
    again = list(patch_sampler(small_data, 8, 13, seed=4, epoch=1))
    assert all(np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1]) for a, b in zip(pairs, again))
    other = list(patch_sampler(small_data, 8, 13, seed=4, epoch=2))
    assert not all(np.array_equal(a[0], b[0]) for a, b in zip(pairs, other))
    with pytest.raises(ConfigError):
        next(patch_sampler(small_data, 17, 1, seed=0))


def test_patch_sampler_alignment():
    data = in_memory_dataset(SynthConfig(count=3, image_size=16, seed=5), quantized=False)
    for hazy, clean in patch_sampler(data, 8, 10, seed=0):
        matched = False
        for i in range(len(data)):
            depth, params = data.params(i)
            for r in range(9):
                for c in range(9):
                    if np.array_equal(data.clean[i][r : r + 8, c : c + 8], clean):
                        resynth = apply_haze(clean, depth[r : r + 8, c : c + 8], params)
                        matched |= np.max(np.abs(resynth - hazy)) < 1e-12
        assert matched


def test_finetune_zero_epochs_is_identity(tiny_model, small_data, rng):
    x = rng.random((2, 16, 16, 3))
    adapted, trainlog = finetune(tiny_model, AdapterSpec("SB"), small_data, small_cfg(epochs=0))
    np.testing.assert_array_equal(predict(adapted, x), predict(tiny_model, x))
    assert trainlog.records == []


def test_finetune_freeze_checkpoints_and_reproducibility(tiny_model, small_data, tmp_path):
    cfg = small_cfg(defense="AT")
    a, log_a = finetune(tiny_model, AdapterSpec("LINEAD"), small_data, cfg, out_dir=tmp_path / "a")
    b, log_b = finetune(tiny_model, AdapterSpec("LINEAD"), small_data, cfg, out_dir=tmp_path / "b")
    assert log_a.to_list() == log_b.to_list()
    assert [r.epoch for r in log_a.records] == [1, 2]
    base_frozen = {n: p for n, p in tiny_model.state_dict().items()}
    for name, p in a.named_parameters():
        if not p.requires_grad and name in base_frozen:
            assert torch.equal(p, base_frozen[name])
    files = {p.name for p in (tmp_path / "a").iterdir()}
    assert {"epoch_001.pt", "epoch_002.pt", "best.pt", "final.pt", "trainlog.csv", "trainlog.json"} <= files
    assert len(json.loads((tmp_path / "a" / "trainlog.json").read_text())) == 2
    header = (tmp_path / "a" / "trainlog.csv").read_text().splitlines()[0]
    assert header == "epoch,base_loss,reg_loss,clean_psnr,adv_psnr"


def test_lambda_without_trades_warns(tiny_model, small_data):
    with pytest.warns(UserWarning):
        finetune(tiny_model, AdapterSpec("LL"), small_data, small_cfg(epochs=1, lam=0.5))


def test_pretrain_writes_checkpoints(tiny_model, small_data, tmp_path):
    trainlog = pretrain(tiny_model, small_data, small_cfg(defense="AT"), out_dir=tmp_path)
    assert len(trainlog.records) == 2
    assert {"epoch_001.pt", "best.pt", "final.pt"} <= {p.name for p in tmp_path.iterdir()}
