"""Attacks on image-to-image models.

All attacks maximise the L1 dissimilarity ``||T(x + delta) - y||_1`` between the
prediction on the perturbed input and the clean target ``y``.

* :func:`linf_attack` - signed-gradient ascent projected onto the L-inf ball.
* :func:`l0_attack` - differential-evolution search over a few pixel rewrites.
* :func:`gaussian_baseline` - random noise reference.

Every search keeps the unperturbed input as a candidate and returns the best
candidate seen, so an attack can never make the prediction closer to ``y`` in
the objective. The returned objective is recomputed with one image per forward
pass so that results do not depend on how candidates were batched.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, DomainError, ShapeError
from .imaging import save_image
from .net import model_dtype, to_numpy, to_tensor


@dataclass(frozen=True)
class LinfBudget:
    epsilon: float = 1 / 255
    steps: int = 10
    step_size: float | None = None  # defaults to epsilon / 4
    seed: int = 0
    random_init: bool = True

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.step_size is not None and not self.step_size > 0:
            raise ConfigError(f"step_size must be > 0, got {self.step_size}")

    @property
    def alpha(self) -> float:
        return self.epsilon / 4 if self.step_size is None else self.step_size


@dataclass(frozen=True)
class L0Budget:
    pixels: int = 1
    pop_size: int = 40
    iterations: int = 30
    seed: int = 0
    mutation: float = 0.5
    crossover: float = 0.7

    def __post_init__(self):
        if self.pixels < 1:
            raise ConfigError(f"pixels must be >= 1, got {self.pixels}")
        if self.pop_size < 4:
            raise ConfigError("differential evolution needs pop_size >= 4")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")


@dataclass
class AttackResult:
    perturbation: np.ndarray
    objective_value: float
    adversarial_input: np.ndarray
    trace: list[float]
    budget: dict = field(default_factory=dict)
    # encoded pixel tuples (row, col, r, g, b) for l0 results, used for warm starts
    candidate: np.ndarray | None = None

    def to_record(self) -> dict:
        return {
            "objective_value": self.objective_value,
            "trace": list(self.trace),
            "budget": self.budget,
            "linf_norm": float(np.max(np.abs(self.perturbation))),
            "modified_pixels": int(np.count_nonzero(np.any(self.perturbation != 0, axis=-1))),
            "candidate": None if self.candidate is None else self.candidate.tolist(),
        }

    def save(self, out_dir, stem: str = "attack") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(json.dumps(self.to_record(), indent=2) + "\n")
        save_image(self.adversarial_input, out / f"{stem}.png")


def _check_xy(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"input {x.shape} and target {y.shape} differ")
    if x.ndim not in (3, 4) or x.shape[-1] != 3:
        raise ShapeError(f"expected HxWx3 images, got {x.shape}")
    return x, y


def l1_objective(model, adv, y) -> float:
    """``||T(adv) - y||_1`` for a single image, evaluated on its own."""
    with torch.no_grad():
        out = model(to_tensor(adv, dtype=model_dtype(model)))
    return float(np.abs(to_numpy(out)[0] - y).sum())


def _batch_objective(model, adv: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    out = model(adv.to(model_dtype(model)))
    return (out.double() - y).abs().flatten(1).sum(dim=1)


# ---------------------------------------------------------------------------
# L-inf projected signed-gradient ascent


def pgd_perturb(model, xt: torch.Tensor, yt: torch.Tensor, budget: LinfBudget, init=None):
    """Core ascent loop on ``(N, 3, H, W)`` tensors.

    Returns the best perturbation per image (float64, zero included as a
    candidate) and the per-image best-so-far traces.
    """
    eps, alpha = float(budget.epsilon), float(budget.alpha)
    xt = xt.detach().double()
    yt = yt.detach().double()
    n = xt.shape[0]
    if init is not None:
        delta = torch.as_tensor(init, dtype=torch.float64).reshape(xt.shape).clamp(-eps, eps)
    elif budget.random_init:
        gen = torch.Generator().manual_seed(int(budget.seed))
        delta = (torch.rand(xt.shape, generator=gen, dtype=torch.float64) * 2 - 1) * eps
    else:
        delta = torch.zeros_like(xt)

    dtype = model_dtype(model)
    with torch.no_grad():
        best_val = _batch_objective(model, xt.to(dtype), yt)
    best_delta = torch.zeros_like(xt)
    traces = [[float(v)] for v in best_val]
    for k in range(budget.steps + 1):
        last = k == budget.steps
        adv = torch.clamp(xt + delta, 0.0, 1.0).to(dtype).requires_grad_(not last)
        with torch.set_grad_enabled(not last):
            vals = _batch_objective(model, adv, yt)
            if not last:
                (grad,) = torch.autograd.grad(vals.sum(), adv)
        vals = vals.detach()
        improved = vals > best_val
        best_val = torch.where(improved, vals, best_val)
        best_delta[improved] = delta[improved]
        for i in range(n):
            traces[i].append(float(best_val[i]))
        if not last:
            # ascent step on the float64 perturbation, then project onto the ball
            delta = (delta + alpha * grad.double().sign()).clamp(-eps, eps)
    return best_delta, traces


def linf_search(model, x, y, budget: LinfBudget, init=None) -> list[AttackResult]:
    """Batched L-inf attack; ``x``, ``y`` (and ``init``) are ``NxHxWx3`` arrays."""
    x, y = _check_xy(x, y)
    if x.ndim == 3:
        x, y = x[None], y[None]
    eps, alpha = float(budget.epsilon), float(budget.alpha)
    init_t = None if init is None else to_tensor(np.asarray(init, dtype=np.float64).reshape(x.shape), dtype=torch.float64)
    was_training = model.training
    model.eval()
    try:
        best_delta, traces = pgd_perturb(
            model, to_tensor(x, dtype=torch.float64), to_tensor(y, dtype=torch.float64), budget, init_t
        )
    finally:
        model.train(was_training)
    n = len(x)

    deltas = to_numpy(best_delta)
    init_np = None if init is None else np.clip(np.asarray(init, dtype=np.float64).reshape(x.shape), -eps, eps)
    results = []
    for i in range(n):
        # final pick among zero, warm start and search best with per-image evaluation
        cands = [np.zeros_like(x[i])]
        if init_np is not None:
            cands.append(init_np[i])
        cands.append(deltas[i])
        best, best_obj = None, -math.inf
        for d in cands:
            obj = l1_objective(model, np.clip(x[i] + d, 0.0, 1.0), y[i])
            if obj > best_obj:
                best, best_obj = d, obj
        trace = [min(v, best_obj) for v in traces[i]]
        trace[-1] = best_obj
        trace = list(np.maximum.accumulate(trace))
        results.append(
            AttackResult(
                perturbation=best,
                objective_value=best_obj,
                adversarial_input=np.clip(x[i] + best, 0.0, 1.0),
                trace=[float(v) for v in trace],
                budget={"kind": "linf", "epsilon": eps, "steps": budget.steps, "step_size": alpha, "seed": budget.seed},
            )
        )
    return results


def linf_attack(model, x, y, budget: LinfBudget, init=None) -> AttackResult:
    x, y = _check_xy(x, y)
    if x.ndim != 3:
        raise ShapeError("linf_attack takes a single image; use linf_search for batches")
    return linf_search(model, x[None], y[None], budget, None if init is None else np.asarray(init)[None])[0]


# ---------------------------------------------------------------------------
# L0 differential evolution


def decode_candidate(x: np.ndarray, cand: np.ndarray) -> np.ndarray:
    """Apply encoded ``(row, col, r, g, b)`` tuples to a copy of ``x``."""
    h, w = x.shape[:2]
    adv = x.copy()
    for r, c, *rgb in np.asarray(cand, dtype=np.float64).reshape(-1, 5):
        ri = int(np.rint(np.clip(r, 0, h - 1)))
        ci = int(np.rint(np.clip(c, 0, w - 1)))
        adv[ri, ci] = np.clip(rgb, 0.0, 1.0)
    return adv


def zero_candidate(x: np.ndarray, pixels: int) -> np.ndarray:
    """Rewrite pixel (0, 0) with its own value ``pixels`` times (no change)."""
    return np.tile(np.concatenate([[0.0, 0.0], x[0, 0]]), pixels)


def pad_candidate(cand: np.ndarray, pixels: int) -> np.ndarray:
    """Extend a solution to ``pixels`` tuples by repeating its last tuple."""
    tuples = np.asarray(cand, dtype=np.float64).reshape(-1, 5)
    if len(tuples) > pixels:
        raise ConfigError(f"candidate has {len(tuples)} tuples, more than {pixels}")
    pad = np.repeat(tuples[-1:], pixels - len(tuples), axis=0)
    return np.concatenate([tuples, pad]).ravel()


def l0_attack(model, x, y, budget: L0Budget, init=None, batch_size: int = 64) -> AttackResult:
    """Black-box pixel-rewrite search (DE/rand/1/bin) on a single image.

    ``init`` is an optional array of encoded candidates (``k x 5*pixels``) seeded
    into the initial population.
    """
    x, y = _check_xy(x, y)
    if x.ndim != 3:
        raise ShapeError("l0_attack takes a single image")
    h, w = x.shape[:2]
    if budget.pixels > h * w:
        raise ConfigError(f"pixels={budget.pixels} exceeds image size {h}x{w}")
    dim = 5 * budget.pixels
    lower = np.tile([0.0, 0.0, 0.0, 0.0, 0.0], budget.pixels)
    upper = np.tile([h - 1.0, w - 1.0, 1.0, 1.0, 1.0], budget.pixels)
    rng = np.random.default_rng(budget.seed)

    dtype = model_dtype(model)
    yt = to_tensor(y, dtype=torch.float64)

    def evaluate(pop: np.ndarray) -> np.ndarray:
        advs = np.stack([decode_candidate(x, c) for c in pop])
        out = []
        with torch.no_grad():
            for i in range(0, len(advs), batch_size):
                chunk = to_tensor(advs[i : i + batch_size], dtype=dtype)
                out.append(_batch_objective(model, chunk, yt).numpy())
        return np.concatenate(out)

    was_training = model.training
    model.eval()
    try:
        pop = lower + rng.random((budget.pop_size, dim)) * (upper - lower)
        seeds = []
        if init is not None:
            seeds = [np.asarray(c, dtype=np.float64).ravel() for c in np.atleast_2d(init)]
            for s in seeds:
                if s.shape != (dim,):
                    raise ConfigError(f"init candidate must have {dim} entries, got {s.shape}")
            for j, s in enumerate(seeds[: budget.pop_size]):
                pop[j] = np.clip(s, lower, upper)
        fit = evaluate(pop)
        zero = zero_candidate(x, budget.pixels)
        best_cand, best_val = zero, float(evaluate(zero[None])[0])
        j = int(np.argmax(fit))
        if fit[j] > best_val:
            best_cand, best_val = pop[j].copy(), float(fit[j])
        trace = [best_val]

        n = budget.pop_size
        for _ in range(budget.iterations):
            trials = np.empty_like(pop)
            for i in range(n):
                a, b, c = rng.choice([k for k in range(n) if k != i], size=3, replace=False)
                mutant = pop[a] + budget.mutation * (pop[b] - pop[c])
                cross = rng.random(dim) < budget.crossover
                cross[rng.integers(dim)] = True
                trials[i] = np.clip(np.where(cross, mutant, pop[i]), lower, upper)
            tfit = evaluate(trials)
            better = tfit > fit
            pop[better] = trials[better]
            fit[better] = tfit[better]
            j = int(np.argmax(fit))
            if fit[j] > best_val:
                best_cand, best_val = pop[j].copy(), float(fit[j])
            trace.append(best_val)

        # final pick with per-image evaluation: zero change, warm starts, search best
        final_cand, final_val = None, -math.inf
        for cand in [zero, *seeds, best_cand]:
            val = l1_objective(model, decode_candidate(x, cand), y)
            if val > final_val:
                final_cand, final_val = cand, val
    finally:
        model.train(was_training)

    trace = [min(v, final_val) for v in trace]
    trace[-1] = final_val
    adv = decode_candidate(x, final_cand)
    return AttackResult(
        perturbation=adv - x,
        objective_value=final_val,
        adversarial_input=adv,
        trace=[float(v) for v in np.maximum.accumulate(trace)],
        budget={
            "kind": "l0",
            "pixels": budget.pixels,
            "pop_size": budget.pop_size,
            "iterations": budget.iterations,
            "seed": budget.seed,
        },
        candidate=np.asarray(final_cand, dtype=np.float64),
    )


def exhaustive_one_pixel(model, x, y, levels: int = 5) -> tuple[float, np.ndarray]:
    """Brute-force optimum over every pixel and a ``levels``-per-channel value grid."""
    x, y = _check_xy(x, y)
    h, w = x.shape[:2]
    grid = np.linspace(0.0, 1.0, levels)
    rgb = np.stack(np.meshgrid(grid, grid, grid, indexing="ij"), axis=-1).reshape(-1, 3)
    best_val, best = -math.inf, None
    for r in range(h):
        for c in range(w):
            cands = np.concatenate([np.tile([r, c], (len(rgb), 1)), rgb], axis=1)
            advs = np.stack([decode_candidate(x, cd) for cd in cands])
            with torch.no_grad():
                vals = _batch_objective(model, to_tensor(advs, dtype=model_dtype(model)), to_tensor(y, dtype=torch.float64))
            k = int(torch.argmax(vals))
            if float(vals[k]) > best_val:
                best_val, best = float(vals[k]), cands[k]
    return best_val, best


# ---------------------------------------------------------------------------
# Gaussian noise reference

NOISE_READINGS = ("std", "variance")


def noise_sigma(level: float = 0.01, reading: str = "std") -> float:
    """Standard deviation for a noise level stated as ``N(0, level)``.

    ``reading="std"`` takes ``level`` as the standard deviation; ``"variance"``
    takes it as the variance.
    """
    if reading not in NOISE_READINGS:
        raise ConfigError(f"noise reading must be one of {NOISE_READINGS}, got {reading!r}")
    if level < 0:
        raise DomainError("noise level must be >= 0")
    return float(level) if reading == "std" else math.sqrt(level)


def gaussian_baseline(x, sigma: float, seed: int = 0) -> np.ndarray:
    if sigma < 0:
        raise DomainError(f"sigma must be >= 0, got {sigma}")
    x = np.asarray(x, dtype=np.float64)
    if sigma == 0:
        return x.copy()
    noise = np.random.default_rng(seed).normal(0.0, sigma, size=x.shape)
    return np.clip(x + noise, 0.0, 1.0)
