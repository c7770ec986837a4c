import json

import numpy as np
import pytest

from helpers import IdentityNet
from hazeguard.attacks import exhaustive_one_pixel
from hazeguard.errors import ConfigError
from hazeguard.evaluation import (
    EvalCondition,
    default_grid,
    evaluate,
    load_summary,
    render_table,
    write_report,
)
from hazeguard.haze import HazeDataset, SynthConfig, in_memory_dataset
from hazeguard.imaging import PSNR_CAP
from hazeguard.net import NetConfig, build


class Identity(IdentityNet):
    adapter_spec = None


def pairs_dataset(hazy, clean):
    return HazeDataset(hazy=list(hazy), clean=list(clean), records=[{} for _ in hazy], manifest_hash="test")


@pytest.fixture(scope="module")
def data():
    return in_memory_dataset(SynthConfig(count=3, image_size=16, seed=4))


FAST_L0 = {"pop_size": 8, "iterations": 3}


def test_condition_validation():
    with pytest.raises(ConfigError):
        EvalCondition("linf", 0.0)
    with pytest.raises(ConfigError):
        EvalCondition("l0", 1.5)
    with pytest.raises(ConfigError):
        EvalCondition("gaussian", -0.1)
    with pytest.raises(ConfigError):
        EvalCondition("blur", 1)
    assert EvalCondition("linf", 4 / 255).label == "linf 4/255"


def test_default_grid_matches_table_columns():
    labels = [c.label for c in default_grid(0.01)]
    assert labels == ["clean", "gaussian 0.01", "linf 1/255", "linf 4/255", "l0 1px", "l0 8px"]


def test_identity_on_unhazed_pairs_hits_cap(rng):
    x = [rng.random((16, 16, 3)) for _ in range(3)]
    report = evaluate(Identity(), pairs_dataset(x, x), [EvalCondition("clean")])
    assert report.rows[0].mean_psnr == PSNR_CAP


def test_completeness_and_mean_consistency(tiny_model, data):
    conds = default_grid()
    report = evaluate(tiny_model, data, conds, model_id="m", l0_options=FAST_L0)
    assert [r.condition for r in report.rows] == conds
    for row in report.rows:
        assert len(row.records) == len(data)
        assert [r["index"] for r in row.records] == list(range(len(data)))
        assert abs(row.mean_psnr - np.mean([r["psnr"] for r in row.records])) <= 1e-9
    clean = report.row("m", "clean")
    for label in ("linf 1/255", "linf 4/255"):
        attacked = report.row("m", label)
        assert attacked.mean_psnr <= clean.mean_psnr
    for a, b in zip(report.row("m", "linf 1/255").records, report.row("m", "linf 4/255").records):
        assert b["objective"] >= a["objective"]
    for a, b in zip(report.row("m", "l0 1px").records, report.row("m", "l0 8px").records):
        assert b["objective"] >= a["objective"]
    assert report.metadata["manifest_hash"] == data.manifest_hash
    assert report.baseline["mean_psnr"] > 0


def test_l0_report_objective_near_oracle(rng):
    model = build(NetConfig(embed_dim=8, num_blocks=2, num_heads=2, patch_size=2, window_size=2, seed=11))
    x = rng.random((4, 4, 3))
    y = np.clip(x + 0.05, 0, 1)
    report = evaluate(model, pairs_dataset([x], [y]), [EvalCondition("l0", 1)])
    oracle, _ = exhaustive_one_pixel(model, x, y)
    assert report.rows[0].records[0]["objective"] >= 0.95 * oracle


def test_failures_are_recorded_not_raised(tiny_model, rng):
    good = rng.random((16, 16, 3))
    bad = rng.random((10, 16, 3))  # not divisible by the patch grid
    report = evaluate(tiny_model, pairs_dataset([good, bad], [good, bad[:, :, :]]), [EvalCondition("clean"), EvalCondition("linf", 1 / 255)])
    for row in report.rows:
        assert row.records[0]["status"] == "ok"
        assert row.records[1]["status"].startswith("error")
        assert row.mean_psnr == row.records[0]["psnr"]


def test_empty_dataset_rejected(tiny_model):
    with pytest.raises(ConfigError):
        evaluate(tiny_model, pairs_dataset([], []), [EvalCondition("clean")])


def test_report_files_are_reproducible(tiny_model, data, tmp_path):
    conds = [EvalCondition("clean"), EvalCondition("gaussian", 0.05, 2), EvalCondition("linf", 1 / 255, 2)]
    for name in ("a", "b"):
        write_report(evaluate(tiny_model, data, conds, model_id="m"), tmp_path / name)
    for f in ("report.json", "report.csv", "report.txt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    blob = json.loads((tmp_path / "a" / "report.json").read_text())
    assert blob["metadata"]["noise_reading"] == "std"


def test_table_has_one_line_per_model(tiny_model, data, tmp_path):
    conds = [EvalCondition("clean"), EvalCondition("linf", 1 / 255)]
    write_report(evaluate(tiny_model, data, conds, model_id="m"), tmp_path)
    for src in ("report.json", "report.csv"):
        rows, _ = load_summary(tmp_path / src)
        table = render_table(rows).splitlines()
        assert len(table) == 3  # header, rule, one data line
        assert len(table[2].split()) == 3 + 2 * len(conds)
