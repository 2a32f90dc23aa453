"""Command-line entry points: generate, train, eval, ablate, sweep, replay.

Exit codes: 0 success, 2 usage error, 1 runtime failure. Every command that
writes results leaves a ``manifest.json`` under ``--out`` from which
``maxico replay`` can re-run it.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import TrainConfig, dump_config, fingerprint, from_flat, load_config, to_flat
from .data import export_directory, generate_synthetic, holdout_split, load_directory, split_semi
from .metrics import evaluate
from .model import FusionSegNet
from .trainer import CheckpointError, Trainer, TrainingDiverged, config_from_checkpoint, load_checkpoint

log = logging.getLogger("maxico")

SEED_ENV = "MAXICO_SEED"
LABEL_CHOICES = (25, 50, 100)

# (name, multi_scale_arch, text_enabled, vit_cnn_fusion, ms_loss)
MODULE_GRID = (
    ("baseline", False, False, False, False),
    ("+multi_scale_arch", True, False, False, False),
    ("+text", True, True, False, False),
    ("+vit_cnn_fusion", True, True, True, False),
    ("+ms_loss", True, True, True, True),
)
# (name, intra_model, inter_model, temporal); None marks the supervised-only row
AXES_GRID = (
    ("sup_only", None, None, None),
    ("intra", True, False, False),
    ("inter", False, True, False),
    ("temporal", False, False, True),
    ("intra+inter", True, True, False),
    ("intra+temporal", True, False, True),
    ("inter+temporal", False, True, True),
    ("intra+inter+temporal", True, True, True),
)
SWEEP_PARAMS = ("beta_infer", "fusion_levels")


class UsageError(Exception):
    pass


# helpers


def parse_values(text: str, step: float | None = None) -> list[float]:
    """``0.2,0.4,0.6`` or an inclusive range ``0.2..0.8`` (with ``step``, default 1)."""
    text = text.strip()
    if ".." in text:
        lo_s, hi_s = text.split("..", 1)
        lo, hi = float(lo_s), float(hi_s)
        step = 1.0 if step is None else step
        if step <= 0 or hi < lo:
            raise UsageError(f"bad range {text!r} with step {step}")
        n = int(round((hi - lo) / step)) + 1
        return [round(lo + i * step, 10) for i in range(n)]
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"cannot parse values {text!r}") from exc


def resolve_config(args) -> TrainConfig:
    """Defaults, then ``--config`` file, then ``--set`` pairs, then ``--steps``, then MAXICO_SEED."""
    try:
        config = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
        overrides = {}
        for item in getattr(args, "set", None) or []:
            if "=" not in item:
                raise UsageError(f"--set expects key=value, got {item!r}")
            key, value = item.split("=", 1)
            overrides[key.strip()] = value.strip()
        if getattr(args, "steps", None) is not None:
            overrides["train.total_steps"] = str(args.steps)
        env_seed = os.environ.get(SEED_ENV)
        if env_seed is not None:
            overrides["train.seed"] = env_seed
        return from_flat(overrides, config) if overrides else config
    except KeyError as exc:
        raise UsageError(exc.args[0]) from exc
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def write_manifest(out: Path, command: str, argv: list[str], config: TrainConfig | None, seeds: list[int]):
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": argv,
        "config": to_flat(config) if config is not None else None,
        "config_hash": fingerprint(config) if config is not None else None,
        "seeds": seeds,
        "out": str(out),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def load_dataset(path) -> list:
    path = Path(path)
    if not path.is_dir():
        raise UsageError(f"--data {path} is not a directory")
    dataset = load_directory(path)
    if not dataset:
        raise UsageError(f"--data {path} holds no samples")
    return dataset


def split_for_training(dataset, config: TrainConfig, label_fraction: float):
    """Held-out test split first (fixed by ``split_seed``), then the label split of the rest."""
    labeled_pool = [s for s in dataset if s.labeled]
    train, test = holdout_split(labeled_pool, config.holdout_fraction, config.split_seed)
    labeled, unlabeled = split_semi(train, label_fraction, config.seed)
    return labeled, unlabeled, test


def train_run(config: TrainConfig, dataset, label_fraction: float, semi: bool, out_dir=None):
    labeled, unlabeled, test = split_for_training(dataset, config, label_fraction)
    if not test:
        raise UsageError("holdout split is empty; raise train.holdout_fraction or add samples")
    trainer = Trainer(config, labeled, unlabeled if semi else None, test, out_dir)
    trainer.run()
    return trainer, test


def model_from_state(state: dict, config: TrainConfig) -> FusionSegNet:
    model = FusionSegNet(config.model, config.fusion, seed=config.seed)
    model.load_state_dict(state["model"])
    return model.eval()


def write_csv(path: Path, rows: list[dict]):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def plot_curve(path: Path, xs, ys, xlabel: str, ylabel: str = "Dice (%)"):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(xs, ys, marker="o")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def summarise(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    sd = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return float(arr.mean()), sd


# commands


def cmd_generate(args, argv):
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} is not empty; pass --force to overwrite")
    dataset = generate_synthetic(args.n, args.seed)
    export_directory(dataset, out)
    fg = np.mean([s.mask.mean() for s in dataset])
    print(f"wrote {len(dataset)} samples to {out} (mean foreground fraction {fg:.3f})")
    write_manifest(out, "generate", argv, None, [args.seed])
    return 0


def cmd_train(args, argv):
    config = resolve_config(args)
    if args.mode == "semi" and args.labels == 100:
        raise UsageError("--mode semi needs --labels 25 or 50")
    fraction = args.labels / 100
    config = from_flat({"train.label_fraction": repr(fraction)}, config)
    dataset = load_dataset(args.data)
    out = Path(args.out)
    write_manifest(out, "train", argv, config, [config.seed])
    (out / "config.txt").write_text(dump_config(config))
    trainer, test = train_run(config, dataset, fraction, args.mode == "semi", out)
    trainer.save(out / "checkpoint.pt")
    report = trainer.evaluate(test)
    report.save(out)
    print(f"{args.mode} run, {args.labels}% labels, {config.total_steps} steps: "
          f"held-out Dice {report.dice_percent:.2f}  mIoU {report.miou_percent:.2f}")
    return 0


def cmd_eval(args, argv):
    if args.beta is not None and not 0.0 <= args.beta <= 1.0:
        raise UsageError("--beta must lie in [0, 1]")
    state = load_checkpoint(args.checkpoint)
    config = config_from_checkpoint(state)
    if fingerprint(config) != state["fingerprint"]:
        raise CheckpointError(f"{args.checkpoint}: stored config does not match its fingerprint")
    if args.config or args.set or args.steps is not None:
        expected = resolve_config(args)
        if fingerprint(expected) != state["fingerprint"]:
            raise CheckpointError(
                f"{args.checkpoint} was trained with config {state['fingerprint']}, "
                f"the given config options resolve to {fingerprint(expected)}"
            )
    model = model_from_state(state, config)
    dataset = load_dataset(args.data)
    if args.split == "test":
        _, _, dataset = split_for_training(dataset, config, config.label_fraction)
    else:
        dataset = [s for s in dataset if s.labeled]
    report = evaluate(model, dataset, args.beta, state["fingerprint"], config.seed)
    if args.out:
        out = Path(args.out)
        write_manifest(out, "eval", argv, config, [config.seed])
        report.save(out)
    beta = "-" if report.beta is None else f"{report.beta:g}"
    print(f"Dice {report.dice_percent:.2f}  mIoU {report.miou_percent:.2f}  "
          f"(beta {beta}, {len(dataset)} samples, config {state['fingerprint']})")
    return 0


def _seeds(args) -> list[int]:
    if args.seeds is not None:
        return [int(s) for s in parse_values(args.seeds)]
    if os.environ.get(SEED_ENV) is not None:
        return [int(os.environ[SEED_ENV])]
    return [0, 1, 2]


def ablation_grid(study: str, base: TrainConfig):
    """(row name, flag columns, config, semi) for every cell of the chosen study."""
    rows = []
    if study == "modules":
        for name, ms, text, fusion, loss in MODULE_GRID:
            cfg = from_flat({"model.multi_scale_arch": str(ms), "model.text_enabled": str(text),
                             "model.vit_cnn_fusion": str(fusion), "train.ms_loss": str(loss)}, base)
            flags = {"multi_scale_arch": ms, "text": text, "vit_cnn_fusion": fusion, "loss": loss}
            rows.append((name, flags, cfg, False))
    elif study == "axes":
        for name, intra, inter, temporal in AXES_GRID:
            if intra is None:
                flags = {"intra_model": False, "inter_model": False, "temporal": False}
                rows.append((name, flags, base, False))
                continue
            cfg = from_flat({"axes.intra_model": str(intra), "axes.inter_model": str(inter),
                             "axes.temporal": str(temporal)}, base)
            rows.append((name, {"intra_model": intra, "inter_model": inter, "temporal": temporal}, cfg, True))
    else:
        raise UsageError(f"unknown study {study!r}; choose modules or axes")
    return rows


def cmd_ablate(args, argv):
    base = resolve_config(args)
    seeds = _seeds(args)
    labels = args.labels if args.labels is not None else (100 if args.study == "modules" else 50)
    if args.study == "axes" and labels == 100:
        raise UsageError("the axes study needs unlabeled data; use --labels 25 or 50")
    grid = ablation_grid(args.study, base)
    dataset = load_dataset(args.data)
    out = Path(args.out)
    write_manifest(out, "ablate", argv, base, seeds)
    rows = []
    for name, flags, cfg, semi in grid:
        dice, miou = [], []
        for seed in seeds:
            run_cfg = from_flat({"train.seed": str(seed)}, cfg)
            run_dir = out / "runs" / name / f"seed{seed}"
            trainer, test = train_run(run_cfg, dataset, labels / 100, semi, run_dir)
            report = trainer.evaluate(test)
            report.save(run_dir)
            dice.append(report.dice_percent)
            miou.append(report.miou_percent)
        (dm, ds), (mm, ms) = summarise(dice), summarise(miou)
        row = {"row": name, **{k: int(v) for k, v in flags.items()}, "labels": labels, "seeds": len(seeds),
               "dice_mean": dm, "dice_sd": ds, "miou_mean": mm, "miou_sd": ms,
               "dice": f"{dm:.2f}±{ds:.2f}", "miou": f"{mm:.2f}±{ms:.2f}"}
        rows.append(row)
        print(f"{name:22s} Dice {row['dice']:>12s}  mIoU {row['miou']:>12s}")
    path = out / f"ablation_{args.study}.csv"
    write_csv(path, rows)
    print(f"wrote {path}")
    return 0


def cmd_sweep(args, argv):
    values = parse_values(args.values, args.step)
    if not values:
        raise UsageError("--values is empty")
    if args.param == "beta_infer" and any(not 0.0 <= v <= 1.0 for v in values):
        raise UsageError("beta values must lie in [0, 1]")
    if args.param == "fusion_levels" and any(v != int(v) or not 1 <= v <= 4 for v in values):
        raise UsageError("fusion_levels values must be integers in 1..4")
    base = resolve_config(args)
    dataset = load_dataset(args.data)
    out = Path(args.out)
    write_manifest(out, "sweep", argv, base, [base.seed])
    rows = []
    if args.param == "beta_infer":
        if args.checkpoint:
            state = load_checkpoint(args.checkpoint)
            config = config_from_checkpoint(state)
            model = model_from_state(state, config)
            _, _, test = split_for_training(dataset, config, config.label_fraction)
        else:
            trainer, test = train_run(base, dataset, base.label_fraction, False, out / "run")
            trainer.save(out / "run" / "checkpoint.pt")
            model = trainer.model
        for beta in values:
            report = evaluate(model, test, beta)
            rows.append({"beta_infer": beta, "dice": report.dice_percent, "miou": report.miou_percent})
    else:
        for level in values:
            cfg = from_flat({"fusion.levels": str(int(level))}, base)
            trainer, test = train_run(cfg, dataset, cfg.label_fraction, False, out / f"levels{int(level)}")
            report = trainer.evaluate(test)
            rows.append({"fusion_levels": int(level), "dice": report.dice_percent, "miou": report.miou_percent})
    for row in rows:
        print(f"{args.param} = {row[args.param]:g}: Dice {row['dice']:.2f}  mIoU {row['miou']:.2f}")
    write_csv(out / f"sweep_{args.param}.csv", rows)
    plot_curve(out / f"sweep_{args.param}.png", [r[args.param] for r in rows], [r["dice"] for r in rows],
               args.param)
    print(f"wrote {out / f'sweep_{args.param}.csv'} and .png")
    return 0


def cmd_replay(args, argv):
    manifest = json.loads(Path(args.manifest).read_text())
    original = list(manifest["argv"])
    # drop flags whose effect is already folded into the stored config
    replay, skip = [], False
    for token in original:
        if skip:
            skip = False
            continue
        if token in ("--config", "--set", "--steps", "--out"):
            skip = True
            continue
        if token.startswith(("--config=", "--set=", "--steps=", "--out=")):
            continue
        replay.append(token)
    out = Path(args.out) if args.out else Path(manifest["out"])
    replay += ["--out", str(out)]
    if manifest["config"] is not None:
        out.mkdir(parents=True, exist_ok=True)
        cfg_path = out / "replay_config.txt"
        cfg_path.write_text("".join(f"{k} = {v}\n" for k, v in manifest["config"].items()))
        replay += ["--config", str(cfg_path)]
    if manifest["command"] == "generate":
        replay.append("--force")
    saved = os.environ.pop(SEED_ENV, None)
    try:
        return main(replay)
    finally:
        if saved is not None:
            os.environ[SEED_ENV] = saved


# parser


def _add_config_args(p):
    p.add_argument("--config", help="flat 'section.key = value' config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--steps", type=int, help="shorthand for --set train.total_steps=N")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maxico", description="Text-aware ViT-CNN fusion segmentation "
                                     "with multi-axis consistency for semi-supervised training.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic image/mask/caption dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("train", help="train one model and score it on the held-out split")
    p.add_argument("--data", required=True)
    p.add_argument("--labels", type=int, choices=LABEL_CHOICES, default=100)
    p.add_argument("--mode", choices=("full", "semi"), default="full")
    p.add_argument("--out", required=True)
    _add_config_args(p)

    p = sub.add_parser("eval", help="score a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--beta", type=float)
    p.add_argument("--split", choices=("test", "all"), default="test")
    p.add_argument("--out")
    _add_config_args(p)

    p = sub.add_parser("ablate", help="module or consistency-axis ablation grid")
    p.add_argument("--study", required=True, choices=("modules", "axes"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", help="comma list or range, default 0,1,2")
    p.add_argument("--labels", type=int, choices=LABEL_CHOICES)
    _add_config_args(p)

    p = sub.add_parser("sweep", help="Dice as a function of beta_infer or fusion_levels")
    p.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    p.add_argument("--values", required=True, help="comma list or inclusive range lo..hi")
    p.add_argument("--step", type=float, help="range step (default 1)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", help="reuse a trained model for the beta_infer sweep")
    _add_config_args(p)

    p = sub.add_parser("replay", help="re-run a command from its manifest.json")
    p.add_argument("manifest")
    p.add_argument("--out", help="write results here instead of the original directory")
    return parser


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "sweep": cmd_sweep, "replay": cmd_replay}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"maxico {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, TrainingDiverged, ValueError, OSError) as exc:
        print(f"maxico {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
