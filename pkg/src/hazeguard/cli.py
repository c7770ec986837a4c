"""Command-line entry point: ``hazeguard <subcommand> [options]``.

Exit status is 0 on success, 2 for usage errors and 1 for runtime failures.
Run directories default to ``$HAZEGUARD_OUT/<subcommand>-seed<seed>`` (or
``./runs/...`` when the variable is unset) and always receive the resolved
configuration as ``resolved_config.json``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path


from .adapters import AdapterSpec
from .attacks import NOISE_READINGS, L0Budget, LinfBudget, l0_attack, linf_attack, noise_sigma
from .checkpoint import checkpoint_info, load_checkpoint
from .config import echo_config, load_config
from .errors import HazeguardError
from .evaluation import EvalCondition, evaluate, load_summary, plot_curves, render_table, write_report
from .haze import DEPTH_KINDS, SynthConfig, generate_dataset, load_dataset
from .imaging import load_image, save_image
from .net import NetConfig, build, predict
from .training import TrainConfig, finetune, pretrain

OUT_ENV = "HAZEGUARD_OUT"
log = logging.getLogger("hazeguard")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML file with dotted keys")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", help=f"run directory (default: ${OUT_ENV}/<command>-seed<seed>)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hazeguard", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", help="write a synthetic hazy/clean dataset")
    _common(p)
    p.add_argument("--count", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--depth-kind", choices=list(DEPTH_KINDS))

    p = sub.add_parser("train", help="clean pretraining of a base model")
    _common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("finetune", help="attach an adapter and fine-tune with a defense")
    _common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True, help="base checkpoint")
    p.add_argument("--adapter", choices=["ll", "sb", "linead"])
    p.add_argument("--defense", choices=["none", "at", "trades"])
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--epsilon", help="training attack budget, e.g. 1/255")
    p.add_argument("--steps", type=int, help="training attack steps")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("attack", help="attack one image and save PNG/JSON outputs")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="dataset directory; use with --index")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--image", help="hazy PNG (instead of --dataset)")
    p.add_argument("--target", help="clean PNG paired with --image")
    p.add_argument("--kind", choices=["linf", "l0"], default="linf")
    p.add_argument("--epsilon")
    p.add_argument("--pixels", type=int)
    p.add_argument("--steps", type=int)

    p = sub.add_parser("evaluate", help="evaluate checkpoints on the condition grid")
    _common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", action="append", required=True, help="repeatable")
    p.add_argument("--sigma", type=float, help="Gaussian noise level (see --noise-reading)")
    p.add_argument("--noise-reading", choices=list(NOISE_READINGS))
    p.add_argument("--epsilon", help="comma-separated l-inf budgets, e.g. 1/255,4/255")
    p.add_argument("--pixels", help="comma-separated l0 budgets, e.g. 1,8")
    p.add_argument("--steps", type=int, help="l-inf attack steps")
    p.add_argument("--plot", action="store_true", help="also write PSNR-vs-budget plots")

    p = sub.add_parser("report", help="render a report.json/report.csv as a text table")
    p.add_argument("report")
    p.add_argument("--out-dir", help="write report.txt (and plots) here")
    p.add_argument("--plot", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _run_dir(args, cfg) -> Path:
    if args.out_dir:
        return Path(args.out_dir)
    root = Path(os.environ.get(OUT_ENV, "runs"))
    seed = cfg["data.seed"] if args.command == "synthesize" else cfg["seed"]
    return root / f"{args.command}-seed{seed}"


def _overrides(args) -> dict:
    get = lambda name: getattr(args, name, None)  # noqa: E731
    o = {
        "train.epochs": get("epochs"),
        "train.learning_rate": get("lr"),
        "finetune.adapter": get("adapter"),
        "finetune.defense": get("defense"),
        "finetune.lambda": get("lam"),
        "eval.sigma": get("sigma"),
        "eval.noise_reading": get("noise_reading"),
        "data.count": get("count"),
        "data.image_size": get("image_size"),
        "data.depth_kind": get("depth_kind"),
    }
    if args.command == "synthesize":
        o["data.seed"] = get("seed")
    else:
        o["seed"] = get("seed")
    if args.command == "finetune":
        o["train.attack_epsilon"] = get("epsilon")
        o["train.attack_steps"] = get("steps")
    elif args.command == "attack":
        o["attack.linf.epsilon"] = get("epsilon")
        o["attack.linf.steps"] = get("steps")
        o["attack.l0.pixels"] = get("pixels")
    elif args.command == "evaluate":
        o["eval.linf"] = get("epsilon")
        o["eval.l0"] = get("pixels")
        o["attack.linf.steps"] = get("steps")
    return o


def synth_config(cfg: dict) -> SynthConfig:
    return SynthConfig(
        count=cfg["data.count"],
        image_size=cfg["data.image_size"],
        beta_range=cfg["data.beta_range"],
        A_range=cfg["data.A_range"],
        depth_kind=cfg["data.depth_kind"],
        seed=cfg["data.seed"],
        gray_light=cfg["data.gray_light"],
    )


def train_config(cfg: dict, defense: str = "none", lam=None) -> TrainConfig:
    return TrainConfig(
        epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        learning_rate=cfg["train.learning_rate"],
        patch_size=cfg["train.patch_size"],
        samples_per_epoch=cfg["train.samples_per_epoch"],
        defense=defense,
        lam=lam,
        attack_budget=LinfBudget(epsilon=cfg["train.attack_epsilon"], steps=cfg["train.attack_steps"]),
        seed=cfg["seed"],
        val_size=cfg["train.val_size"],
        val_steps=cfg["train.val_steps"],
    )


def cmd_synthesize(args, cfg, run_dir) -> int:
    manifest = generate_dataset(synth_config(cfg), run_dir)
    echo_config(cfg, run_dir)
    data = load_dataset(run_dir)
    print(f"wrote {len(manifest['pairs'])} pairs to {run_dir} (manifest {data.manifest_hash[:16]})")
    return 0


def cmd_train(args, cfg, run_dir) -> int:
    data = load_dataset(args.dataset)
    model = build(
        NetConfig(
            embed_dim=cfg["model.embed_dim"],
            num_blocks=cfg["model.num_blocks"],
            num_heads=cfg["model.num_heads"],
            patch_size=cfg["model.patch_size"],
            window_size=cfg["model.window_size"],
            mlp_ratio=cfg["model.mlp_ratio"],
            seed=cfg["seed"],
        )
    )
    echo_config(cfg, run_dir)
    trainlog = pretrain(model, data, train_config(cfg), out_dir=run_dir)
    last = trainlog.records[-1] if trainlog.records else None
    if last:
        print(f"trained {last.epoch} epochs: clean {last.clean_psnr:.2f} dB, attacked {last.adv_psnr:.2f} dB")
    print(f"checkpoints in {run_dir}")
    return 0


def cmd_finetune(args, cfg, run_dir) -> int:
    data = load_dataset(args.dataset)
    base = load_checkpoint(args.checkpoint)
    spec = AdapterSpec(cfg["finetune.adapter"], kernel_size=cfg["finetune.kernel_size"])
    tcfg = train_config(cfg, cfg["finetune.defense"], cfg["finetune.lambda"])
    echo_config(cfg, run_dir)
    _, trainlog = finetune(base, spec, data, tcfg, out_dir=run_dir, base_path=args.checkpoint)
    for r in trainlog.records:
        print(f"epoch {r.epoch}: base {r.base_loss:.5f} reg {r.reg_loss:.5f} clean {r.clean_psnr:.2f} dB adv {r.adv_psnr:.2f} dB")
    print(f"adapter checkpoints in {run_dir}")
    return 0


def cmd_attack(args, cfg, run_dir) -> int:
    model = load_checkpoint(args.checkpoint)
    if args.image:
        if not args.target:
            raise HazeguardError("--image needs --target (the clean reference)")
        x, y = load_image(args.image), load_image(args.target)
    elif args.dataset:
        data = load_dataset(args.dataset)
        if not 0 <= args.index < len(data):
            raise HazeguardError(f"--index {args.index} out of range for {len(data)} images")
        x, y = data.hazy[args.index], data.clean[args.index]
    else:
        raise HazeguardError("give --dataset or --image/--target")
    if args.kind == "linf":
        budget = LinfBudget(epsilon=cfg["attack.linf.epsilon"], steps=cfg["attack.linf.steps"], step_size=cfg["attack.linf.step_size"], seed=cfg["seed"])
        result = linf_attack(model, x, y, budget)
    else:
        budget = L0Budget(pixels=cfg["attack.l0.pixels"], pop_size=cfg["attack.l0.pop_size"], iterations=cfg["attack.l0.iterations"], seed=cfg["seed"])
        result = l0_attack(model, x, y, budget)
    echo_config(cfg, run_dir)
    result.save(run_dir, "adversarial")
    save_image(predict(model, x), run_dir / "prediction_clean.png")
    save_image(predict(model, result.adversarial_input), run_dir / "prediction_attacked.png")
    print(f"objective {result.objective_value:.6f}; outputs in {run_dir}")
    return 0


def eval_conditions(cfg: dict) -> list[EvalCondition]:
    seed = cfg["seed"]
    sigma = noise_sigma(cfg["eval.sigma"], cfg["eval.noise_reading"])
    conds = [EvalCondition("clean", seed=seed), EvalCondition("gaussian", sigma, seed)]
    conds += [EvalCondition("linf", e, seed) for e in cfg["eval.linf"]]
    conds += [EvalCondition("l0", p, seed) for p in cfg["eval.l0"]]
    return conds


def cmd_evaluate(args, cfg, run_dir) -> int:
    data = load_dataset(args.dataset)
    conditions = eval_conditions(cfg)
    l0_options = {"pop_size": cfg["attack.l0.pop_size"], "iterations": cfg["attack.l0.iterations"]}
    report = None
    for ckpt in args.checkpoint:
        path = Path(ckpt)
        info = checkpoint_info(path)
        part = evaluate(
            load_checkpoint(path),
            data,
            conditions,
            model_id=f"{path.parent.name}/{path.stem}",
            method=info["method"],
            defense=info["defense"],
            linf_steps=cfg["attack.linf.steps"],
            l0_options=l0_options,
            noise_reading=cfg["eval.noise_reading"],
        )
        report = part if report is None else report.extend(part)
    echo_config(cfg, run_dir)
    paths = write_report(report, run_dir)
    if args.plot:
        plot_curves(report.summary(), run_dir)
    print(paths["txt"].read_text(), end="")
    return 0


def cmd_report(args) -> int:
    rows, baseline = load_summary(args.report)
    table = render_table(rows, baseline)
    print(table, end="")
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(table)
        if args.plot:
            plot_curves(rows, out)
    elif args.plot:
        plot_curves(rows, Path(args.report).parent)
    return 0


COMMANDS = {
    "synthesize": cmd_synthesize,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            return cmd_report(args)
        cfg = load_config(args.config, _overrides(args))
        run_dir = _run_dir(args, cfg)
        run_dir.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, cfg, run_dir)
    except (HazeguardError, OSError, json.JSONDecodeError) as exc:
        print(f"hazeguard {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
