"""Grid evaluation of dehazing models under clean, noisy and attacked inputs.

Every prediction that feeds a reported metric is computed one image per
forward pass, so a number in a report does not depend on how images were
batched. Attacks inside one condition family are warm-started from the
previous (smaller) budget with the same seed, which makes the reported
objectives monotone in the budget image by image.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import (
    L0Budget,
    LinfBudget,
    gaussian_baseline,
    l0_attack,
    linf_search,
    pad_candidate,
)
from .errors import ConfigError, HazeguardError, SizeError
from .haze import HazeDataset
from .imaging import metrics, psnr
from .net import predict

log = logging.getLogger(__name__)

KINDS = ("clean", "gaussian", "linf", "l0")
REPORT_FORMAT = "hazeguard-report/1"


def format_budget(value: float) -> str:
    """``4/255`` for multiples of 1/255, otherwise the shortest float repr."""
    scaled = value * 255
    if abs(scaled - round(scaled)) < 1e-9 and round(scaled) > 0:
        return f"{int(round(scaled))}/255"
    return repr(float(value))


@dataclass(frozen=True)
class EvalCondition:
    kind: str
    parameter: float | int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"condition kind must be one of {KINDS}, got {self.kind!r}")
        p = self.parameter
        if self.kind == "linf" and not (p is not None and p > 0):
            raise ConfigError(f"linf condition needs epsilon > 0, got {p}")
        if self.kind == "l0" and not (p is not None and int(p) == p and p >= 1):
            raise ConfigError(f"l0 condition needs an integer pixel count >= 1, got {p}")
        if self.kind == "gaussian" and not (p is not None and p >= 0):
            raise ConfigError(f"gaussian condition needs sigma >= 0, got {p}")
        if self.kind == "l0":
            object.__setattr__(self, "parameter", int(p))
        elif self.kind == "clean":
            object.__setattr__(self, "parameter", None)
        else:
            object.__setattr__(self, "parameter", float(p))

    @property
    def label(self) -> str:
        if self.kind == "clean":
            return "clean"
        if self.kind == "l0":
            return f"l0 {self.parameter}px"
        if self.kind == "linf":
            return f"linf {format_budget(self.parameter)}"
        return f"gaussian {self.parameter:g}"

    def to_record(self) -> dict:
        return {"kind": self.kind, "parameter": self.parameter, "seed": self.seed, "label": self.label}


def default_grid(sigma: float = 0.01, seed: int = 0) -> list[EvalCondition]:
    """The column set of the robustness table: clean, Gaussian, two l-inf and two l0 budgets."""
    return [
        EvalCondition("clean", seed=seed),
        EvalCondition("gaussian", sigma, seed),
        EvalCondition("linf", 1 / 255, seed),
        EvalCondition("linf", 4 / 255, seed),
        EvalCondition("l0", 1, seed),
        EvalCondition("l0", 8, seed),
    ]


@dataclass
class EvalRow:
    model_id: str
    method: str
    defense: str
    condition: EvalCondition
    records: list[dict]
    # attack outputs kept in memory for inspection; never serialized
    results: list | None = field(default=None, repr=False, compare=False)

    @property
    def ok_records(self) -> list[dict]:
        return [r for r in self.records if r["status"] == "ok"]

    @property
    def mean_psnr(self) -> float:
        ok = self.ok_records
        return float(np.mean([r["psnr"] for r in ok])) if ok else math.nan

    @property
    def mean_ssim(self) -> float:
        vals = [r["ssim"] for r in self.ok_records if r["ssim"] is not None]
        return float(np.mean(vals)) if vals else math.nan

    def to_record(self) -> dict:
        return {
            "model_id": self.model_id,
            "method": self.method,
            "defense": self.defense,
            "condition": self.condition.to_record(),
            "mean_psnr": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
            "n_ok": len(self.ok_records),
            "records": self.records,
        }


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    baseline: dict = field(default_factory=dict)

    def extend(self, other: "EvalReport") -> "EvalReport":
        """Merge the rows of a report computed on the same dataset."""
        if self.metadata and other.metadata.get("manifest_hash") != self.metadata.get("manifest_hash"):
            raise ConfigError("cannot merge reports computed on different datasets")
        if not self.metadata:
            self.metadata, self.baseline = dict(other.metadata), dict(other.baseline)
        self.rows.extend(other.rows)
        return self

    def row(self, model_id: str, label: str) -> EvalRow:
        for r in self.rows:
            if r.model_id == model_id and r.condition.label == label:
                return r
        raise KeyError((model_id, label))

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "metadata": self.metadata,
            "baseline": self.baseline,
            "rows": [r.to_record() for r in self.rows],
        }

    def summary(self) -> list[dict]:
        return [
            {
                "model_id": r.model_id,
                "method": r.method,
                "defense": r.defense,
                "condition": r.condition.label,
                "kind": r.condition.kind,
                "parameter": r.condition.parameter,
                "seed": r.condition.seed,
                "mean_psnr": r.mean_psnr,
                "mean_ssim": r.mean_ssim,
                "n_ok": len(r.ok_records),
                "n_images": len(r.records),
            }
            for r in self.rows
        ]


def _record(index: int, pred: np.ndarray, target: np.ndarray, objective: float | None = None) -> dict:
    try:
        m = metrics(pred, target)
        rec = {"index": index, "status": "ok", "psnr": m.psnr, "ssim": m.ssim}
    except SizeError:
        # below the SSIM window; PSNR and the objective are still meaningful
        rec = {"index": index, "status": "ok", "psnr": psnr(pred, target), "ssim": None}
    if objective is not None:
        rec["objective"] = objective
    return rec


def _failure(index: int, exc: Exception) -> dict:
    log.warning("image %d failed: %s", index, exc)
    return {"index": index, "status": f"error: {type(exc).__name__}: {exc}", "psnr": None, "ssim": None}


def _image_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


class _NoOp:
    """Stands in for a model that returns its input unchanged."""


def _predict(model, x):
    return np.asarray(x, dtype=np.float64) if isinstance(model, _NoOp) else predict(model, x)


def _eval_inputs(model, dataset: HazeDataset, inputs) -> list[dict]:
    records = []
    for i, x in enumerate(inputs):
        try:
            records.append(_record(i, _predict(model, x), dataset.clean[i]))
        except Exception as exc:  # per-image failures are reported, not raised
            records.append(_failure(i, exc))
    return records


def _eval_linf(model, dataset, cond, steps, warm):
    budget = LinfBudget(epsilon=cond.parameter, steps=steps, seed=cond.seed)
    inits = [None] * len(dataset)
    if warm is not None:
        inits = [None if w is None else w.perturbation for w in warm]
    try:
        init = None
        if warm is not None:
            init = np.stack([np.zeros_like(x) if d is None else d for x, d in zip(dataset.hazy, inits)])
        return linf_search(model, np.stack(dataset.hazy), np.stack(dataset.clean), budget, init)
    except Exception:
        # fall back to one image at a time so a single bad image cannot sink the column
        results = []
        for i in range(len(dataset)):
            try:
                init = None if inits[i] is None else inits[i][None]
                results.append(linf_search(model, dataset.hazy[i][None], dataset.clean[i][None], budget, init)[0])
            except Exception as exc:
                results.append(exc)
        return results


def _eval_l0(model, dataset, cond, l0_cfg, warm):
    budget = L0Budget(pixels=cond.parameter, seed=cond.seed, **l0_cfg)
    results = []
    for i in range(len(dataset)):
        try:
            init = None
            if warm is not None and warm[i] is not None:
                init = pad_candidate(warm[i].candidate, cond.parameter)
            results.append(l0_attack(model, dataset.hazy[i], dataset.clean[i], budget, init))
        except Exception as exc:
            results.append(exc)
    return results


def _attack_records(model, dataset, results) -> list[dict]:
    records = []
    for i, res in enumerate(results):
        if isinstance(res, Exception):
            records.append(_failure(i, res))
            continue
        try:
            records.append(_record(i, predict(model, res.adversarial_input), dataset.clean[i], res.objective_value))
        except Exception as exc:
            records.append(_failure(i, exc))
    return records


def evaluate(
    model,
    dataset: HazeDataset,
    conditions: list[EvalCondition],
    model_id: str = "model",
    method: str | None = None,
    defense: str = "none",
    linf_steps: int = 10,
    l0_options: dict | None = None,
    noise_reading: str = "std",
) -> EvalReport:
    """Evaluate one model on every condition; returns a one-model report."""
    if len(dataset) == 0:
        raise ConfigError("dataset is empty")
    if len(set(conditions)) != len(conditions):
        raise ConfigError("duplicate evaluation conditions")
    l0_cfg = dict(l0_options or {})
    if method is None:
        method = "base" if model.adapter_spec is None else model.adapter_spec.method
    model.eval()

    # attacks run in increasing budget order so each can warm-start from the last
    order = sorted(range(len(conditions)), key=lambda k: (KINDS.index(conditions[k].kind), conditions[k].seed, conditions[k].parameter or 0))
    last: dict[tuple[str, int], list] = {}
    rows: dict[int, EvalRow] = {}
    for k in order:
        cond = conditions[k]
        log.info("evaluating %s on %s", model_id, cond.label)
        if cond.kind == "clean":
            records = _eval_inputs(model, dataset, dataset.hazy)
        elif cond.kind == "gaussian":
            noisy = [gaussian_baseline(x, cond.parameter, _image_seed(cond.seed, i)) for i, x in enumerate(dataset.hazy)]
            records = _eval_inputs(model, dataset, noisy)
        else:
            key = (cond.kind, cond.seed)
            warm = last.get(key)
            if warm is not None:
                warm = [None if isinstance(r, Exception) else r for r in warm]
            if cond.kind == "linf":
                results = _eval_linf(model, dataset, cond, linf_steps, warm)
            else:
                results = _eval_l0(model, dataset, cond, l0_cfg, warm)
            last[key] = results
            records = _attack_records(model, dataset, results)
        rows[k] = EvalRow(model_id, method, defense, cond, records, results if cond.kind in ("linf", "l0") else None)

    baseline = EvalRow("no-op", "none", "none", EvalCondition("clean"), _eval_inputs(_NoOp(), dataset, dataset.hazy))
    metadata = {
        "manifest_hash": dataset.manifest_hash,
        "version": __version__,
        "n_images": len(dataset),
        "seeds": sorted({c.seed for c in conditions}),
        "noise_reading": noise_reading,
        "linf_steps": linf_steps,
        "l0_options": {k: l0_cfg[k] for k in sorted(l0_cfg)},
    }
    return EvalReport(
        rows=[rows[k] for k in range(len(conditions))],
        metadata=metadata,
        baseline={
            "description": "no-op baseline: PSNR/SSIM of the hazy input against the clean image",
            "mean_psnr": baseline.mean_psnr,
            "mean_ssim": baseline.mean_ssim,
        },
    )


def _clean_json(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _clean_json(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_clean_json(v) for v in value]
    return value


def write_report(report: EvalReport, out_dir) -> dict[str, Path]:
    """Write report.json, report.csv and report.txt into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": out / "report.json", "csv": out / "report.csv", "txt": out / "report.txt"}
    paths["json"].write_text(json.dumps(_clean_json(report.to_dict()), indent=2, sort_keys=True) + "\n")
    summary = report.summary()
    with open(paths["csv"], "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(summary[0]) if summary else ["model_id"])
        writer.writeheader()
        writer.writerows(summary)
    paths["txt"].write_text(render_table(summary, report.baseline))
    return paths


def load_summary(path) -> tuple[list[dict], dict]:
    """Summary rows and baseline block from a report.json or report.csv."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"no such report: {path}")
    if path.suffix == ".json":
        blob = json.loads(path.read_text())
        if blob.get("format") != REPORT_FORMAT:
            raise ConfigError(f"{path} is not a hazeguard report")
        rows = [
            {
                "model_id": r["model_id"],
                "method": r["method"],
                "defense": r["defense"],
                "condition": r["condition"]["label"],
                "kind": r["condition"]["kind"],
                "parameter": r["condition"]["parameter"],
                "mean_psnr": r["mean_psnr"],
                "mean_ssim": r["mean_ssim"],
            }
            for r in blob["rows"]
        ]
        return rows, blob.get("baseline", {})
    if path.suffix == ".csv":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        for r in rows:
            for key in ("mean_psnr", "mean_ssim"):
                r[key] = float(r[key]) if r[key] not in ("", None) else None
            r["parameter"] = float(r["parameter"]) if r.get("parameter") not in ("", None) else None
        return rows, {}
    raise ConfigError(f"unsupported report format: {path.suffix}")


def _fmt(v, digits) -> str:
    return "n/a" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.{digits}f}"


def render_table(summary: list[dict], baseline: dict | None = None) -> str:
    """Aligned text table: one line per model, PSNR and SSIM for each condition."""
    models, conditions = [], []
    cells = {}
    for r in summary:
        key = (r["model_id"], r["method"], r["defense"])
        if key not in models:
            models.append(key)
        if r["condition"] not in conditions:
            conditions.append(r["condition"])
        cells[(key, r["condition"])] = (r["mean_psnr"], r["mean_ssim"])

    header = ["model", "method", "defense"]
    for c in conditions:
        header += [f"{c} PSNR", f"{c} SSIM"]
    lines = [header]
    for key in models:
        line = list(key)
        for c in conditions:
            p, s = cells.get((key, c), (None, None))
            line += [_fmt(p, 2), _fmt(s, 4)]
        lines.append(line)
    widths = [max(len(str(row[j])) for row in lines) for j in range(len(header))]

    def fmt_row(row):
        return "  ".join(str(v).rjust(w) if j >= 3 else str(v).ljust(w) for j, (v, w) in enumerate(zip(row, widths)))

    out = [fmt_row(lines[0]), "  ".join("-" * w for w in widths)]
    out += [fmt_row(r) for r in lines[1:]]
    if baseline and baseline.get("mean_psnr") is not None:
        out.append("")
        out.append(f"# no-op baseline (hazy vs clean): PSNR {_fmt(baseline['mean_psnr'], 2)}  SSIM {_fmt(baseline['mean_ssim'], 4)}")
    return "\n".join(out) + "\n"


def plot_curves(summary: list[dict], out_dir) -> list[Path]:
    """PSNR-vs-budget curves for the l-inf and l0 families (needs matplotlib)."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise HazeguardError("plotting needs matplotlib (pip install 'artifact[plot]')") from exc
    out = Path(out_dir)
    written = []
    for kind, xlabel in (("linf", "epsilon (x 1/255)"), ("l0", "pixels")):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        drawn = False
        for model in dict.fromkeys(r["model_id"] for r in summary):
            pts = sorted(
                (float(r["parameter"]) * (255 if kind == "linf" else 1), r["mean_psnr"])
                for r in summary
                if r["model_id"] == model and r["kind"] == kind and r["mean_psnr"] is not None
            )
            if pts:
                ax.plot(*zip(*pts), marker="o", label=model)
                drawn = True
        if not drawn:
            plt.close(fig)
            continue
        ax.set_xlabel(xlabel)
        ax.set_ylabel("mean PSNR (dB)")
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = out / f"psnr_vs_{kind}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written

