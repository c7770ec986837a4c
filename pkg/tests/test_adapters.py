import numpy as np
import pytest
import torch

from helpers import interior_image, param_direction_check, rel_err, shrink_head
from hazeguard.adapters import (
    AdapterSpec,
    apply_linead,
    apply_ll,
    apply_sb,
    frozen_checksum,
    linead_extra_params,
    trainable_parameters,
    tune_stats,
)
from hazeguard.errors import ConfigError, StructureError
from hazeguard.net import build, predict, to_tensor
from hazeguard.training import base_loss, make_optimizer


@pytest.fixture
def base():
    return build()


def test_ll_freezes_all_but_head(base, rng):
    x = rng.random((3, 32, 32, 3))
    adapted = apply_ll(base)
    np.testing.assert_array_equal(predict(base, x), predict(adapted, x))
    head = base.head.weight.numel() + base.head.bias.numel()
    assert tune_stats(adapted).tuned_params == head
    assert {e.group for e in adapted.registry() if e.trainable} == {"final-layer"}


def test_ll_optimizer_leaves_backbone_unchanged(base, rng):
    adapted = apply_ll(base)
    before = adapted.patch_embed.weight.detach().clone()
    opt = make_optimizer(adapted, 1e-2)
    x = to_tensor(rng.random((2, 16, 16, 3)))
    base_loss(adapted(x), torch.zeros_like(x)).backward()
    opt.step()
    assert torch.equal(adapted.patch_embed.weight, before)
    assert not torch.equal(adapted.head.weight, base.head.weight)


def test_sb_identity_at_init_exact(base, rng):
    x = rng.random((4, 32, 32, 3))
    adapted = apply_sb(base)
    assert np.max(np.abs(predict(adapted, x) - predict(base, x))) == 0.0
    assert {e.group for e in adapted.registry() if e.trainable} == {"adapter-scale", "bias"}
    scales = [e for e in adapted.registry() if e.group == "adapter-scale"]
    assert len(scales) == base.cfg.num_blocks and all(e.shape == () for e in scales)


def test_sb_tuned_count_matches_manual_count(base):
    adapted = apply_sb(base)
    cfg = base.cfg
    c, hidden = cfg.embed_dim, int(round(cfg.embed_dim * cfg.mlp_ratio))
    # per block: norm1.bias, qkv.bias, proj.bias, norm2.bias, mlp.0.bias, mlp.2.bias
    per_block = c + 3 * c + c + c + hidden + c
    manual = cfg.num_blocks * per_block + c + cfg.num_blocks  # + patch_embed.bias + scales
    stats = tune_stats(adapted)
    assert stats.tuned_params == manual
    assert stats.tuned_percent == pytest.approx(100 * manual / stats.total_params)


def test_linead_identity_and_accounting(base, rng):
    x = rng.random((4, 32, 32, 3))
    adapted = apply_linead(base, AdapterSpec("LINEAD", kernel_size=3))
    assert np.max(np.abs(predict(adapted, x) - predict(base, x))) <= 1e-6
    c = base.cfg.embed_dim
    extra = linead_extra_params([c] * base.cfg.num_blocks, 3)
    assert extra == base.cfg.num_blocks * (c * c * 9 + c)
    stats = tune_stats(adapted)
    assert stats.total_params == tune_stats(base).total_params + extra
    assert stats.tuned_params == extra
    f = torch.rand(1, c, 8, 8)
    assert adapted.adapters[0](f).shape == f.shape


def test_linead_rejects_even_kernel():
    with pytest.raises(ConfigError):
        AdapterSpec("LINEAD", kernel_size=4)


def test_linead_live_after_one_step(base, rng):
    adapted = apply_linead(base)
    x = to_tensor(rng.random((2, 32, 32, 3)))
    y = to_tensor(rng.random((2, 32, 32, 3)))
    opt = make_optimizer(adapted, 1e-2)
    base_loss(adapted(x), y).backward()
    opt.step()
    with torch.no_grad():
        assert not torch.equal(adapted(x), base(x))


def test_stats_ordering_and_base_full(base):
    assert tune_stats(base).tuned_percent == 100.0
    ll, sb, lin = tune_stats(apply_ll(base)), tune_stats(apply_sb(base)), tune_stats(apply_linead(base))
    # same ordering as the published backbones: SB < LL < LINEAD
    assert sb.tuned_percent < ll.tuned_percent < lin.tuned_percent
    assert ll.tuned_params < lin.tuned_params


def test_accounting_matches_optimizer(base):
    for fn in (apply_ll, apply_sb, apply_linead):
        adapted = fn(base)
        opt = make_optimizer(adapted, 1e-3)
        visible = sum(p.numel() for g in opt.param_groups for p in g["params"])
        assert visible == tune_stats(adapted).tuned_params


def test_double_adaptation_rejected(base):
    with pytest.raises(StructureError):
        apply_sb(apply_ll(base))


def test_identity_at_init_random_suite(base, rng):
    x = rng.random((100, 32, 32, 3))
    ref = predict(base, x)
    assert np.max(np.abs(predict(apply_sb(base), x) - ref)) == 0.0
    assert np.max(np.abs(predict(apply_linead(base), x) - ref)) <= 1e-6


def test_freeze_integrity_over_steps(base, rng):
    for fn in (apply_ll, apply_sb, apply_linead):
        adapted = fn(base)
        before = frozen_checksum(adapted)
        opt = make_optimizer(adapted, 1e-2)
        for _ in range(3):
            x = to_tensor(rng.random((2, 16, 16, 3)))
            opt.zero_grad()
            base_loss(adapted(x), torch.zeros_like(x)).backward()
            opt.step()
        assert frozen_checksum(adapted) == before


@pytest.mark.parametrize("group,fn", [("adapter-scale", apply_sb), ("adapter-linear", apply_linead)])
def test_adapter_gradients_match_finite_differences(tiny_model64, rng, group, fn):
    model = fn(shrink_head(tiny_model64))
    # move away from the identity init so the check is not degenerate
    with torch.no_grad():
        for p in trainable_parameters(model):
            p.add_(0.05 * torch.randn(p.shape, generator=torch.Generator().manual_seed(1), dtype=p.dtype))
    x = to_tensor(interior_image(rng, 8), torch.float64)
    w = torch.as_tensor(rng.standard_normal((1, 3, 8, 8)))
    names = [e.name for e in model.registry() if e.group == group]
    for seed in range(5):
        analytic, fd = param_direction_check(model, lambda m: (m(x) * w).sum(), names, seed=seed)
        assert rel_err(analytic, fd) < 1e-3
