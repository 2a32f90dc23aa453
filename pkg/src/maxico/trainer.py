"""Supervised and semi-supervised optimisation loops with checkpointing."""
from __future__ import annotations

import csv
import json
import logging
import math
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig, dump_config, fingerprint, from_flat, parse_text
from .consistency import TemporalBuffer, current_conditions, pseudo_labels
from .data import Sample, draw_transform
from .fusion import sample_beta
from .losses import final_loss, lambda_schedule, multiscale_supervised_loss, unsupervised_loss
from .metrics import evaluate
from .model import FusionSegNet

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOG_FIELDS = ("step", "l_sup", "l_unsup", "lambda", "beta", "dice_eval", "miou_eval")
STREAMS = ("labeled", "unlabeled", "aug_labeled", "aug_unlabeled", "beta")


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


def cosine_lr(step: int, base_lr: float, total_steps: int, cycles: int = 1, min_lr: float = 0.0) -> float:
    cycle_len = total_steps / cycles
    phase = (step % cycle_len) / cycle_len
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * phase))


def _batch(samples: list[Sample], transforms, dtype):
    images = np.stack([t.apply(s.image) for s, t in zip(samples, transforms)])
    x = torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).to(dtype)
    y = None
    if samples[0].mask is not None:
        y = torch.from_numpy(np.ascontiguousarray(np.stack([t.apply(s.mask) for s, t in zip(samples, transforms)])))
    return x, y, [s.caption for s in samples]


class Trainer:
    """Owns the model, optimiser, RNG streams and temporal buffer of one run.

    With ``unlabeled`` empty or None every step is supervised only.
    """

    def __init__(self, config: TrainConfig, labeled: list[Sample], unlabeled: list[Sample] | None = None,
                 eval_set: list[Sample] | None = None, out_dir=None, dtype=torch.float32):
        if not labeled:
            raise ValueError("training needs at least one labeled sample")
        if any(s.mask is None for s in labeled):
            raise ValueError("labeled set contains samples without masks")
        if unlabeled and config.axes.any is False:
            raise ValueError("semi-supervised training needs at least one consistency axis")
        self.config = config
        self.labeled = labeled
        self.unlabeled = [s for s in (unlabeled or [])]
        if any(s.mask is not None for s in self.unlabeled):
            # training code never sees ground truth of unlabeled samples
            self.unlabeled = [Sample(s.id, s.image, None, s.caption) for s in self.unlabeled]
        self.eval_set = eval_set
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.dtype = dtype
        self.model = FusionSegNet(config.model, config.fusion, seed=config.seed).to(dtype)
        self.optimizer = torch.optim.Adam(self.model.trainable_parameters(), lr=config.learning_rate)
        self.rngs = {name: np.random.default_rng([config.seed, i + 1]) for i, name in enumerate(STREAMS)}
        self.buffer = TemporalBuffer(config.buffer_depth)
        self.step = 0
        self.history: list[dict] = []
        self.clip_events = 0

    @property
    def semi(self):
        return bool(self.unlabeled)

    def lr_at(self, step: int) -> float:
        c = self.config
        return cosine_lr(step, c.learning_rate, c.total_steps, c.lr_cycles, c.min_lr)

    def _draw(self, pool, stream, aug_stream):
        n = min(self.config.batch_size, len(pool))
        idx = self.rngs[stream].choice(len(pool), size=n, replace=False)
        samples = [pool[i] for i in idx]
        transforms = [draw_transform(self.rngs[aug_stream]) for _ in samples]
        return samples, transforms

    def train_step(self) -> dict:
        cfg = self.config
        model = self.model
        model.train()
        for group in self.optimizer.param_groups:
            group["lr"] = self.lr_at(self.step)
        beta = None
        if cfg.model.vit_cnn_fusion and cfg.fusion.mode == "npf":
            beta = sample_beta(cfg.fusion, self.rngs["beta"])

        samples, transforms = self._draw(self.labeled, "labeled", "aug_labeled")
        x, y, captions = _batch(samples, transforms, self.dtype)
        bundle = model(x, captions, beta)
        l_sup = multiscale_supervised_loss(bundle, y, cfg.loss, cfg.ms_loss)

        row = {"step": self.step, "l_sup": l_sup.item(), "l_unsup": "", "lambda": "",
               "beta": "" if beta is None else beta, "dice_eval": "", "miou_eval": ""}
        if self.semi:
            u_samples, u_transforms = self._draw(self.unlabeled, "unlabeled", "aug_unlabeled")
            xu, _, u_captions = _batch(u_samples, u_transforms, self.dtype)
            u_bundle = model(xu, u_captions, beta)
            ids = [s.id for s in u_samples]
            pseudo, _ = pseudo_labels(u_bundle, cfg.axes, self.buffer, ids, self.step, u_transforms)
            contributors = [p for _, p in current_conditions(u_bundle, cfg.axes)]
            l_unsup = unsupervised_loss(contributors, pseudo)
            row["l_unsup"] = l_unsup.item()
            row["lambda"] = lambda_schedule(self.step, cfg.loss)
            try:
                loss = final_loss(l_sup, l_unsup, self.step, cfg.loss)
            except FloatingPointError:
                loss = torch.tensor(float("nan"))
        else:
            loss = l_sup
        if not torch.isfinite(loss):
            self._dump_divergence(row)
            raise TrainingDiverged(f"non-finite loss at step {self.step}: {row}")

        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip > 0:
            norm = torch.nn.utils.clip_grad_norm_(self.model.trainable_parameters(), cfg.grad_clip)
            if norm > cfg.grad_clip:
                self.clip_events += 1
                log.debug("step %d: gradient norm %.3f clipped to %.1f", self.step, float(norm), cfg.grad_clip)
        self.optimizer.step()

        if self.semi and cfg.axes.temporal:
            for i, (s, t) in enumerate(zip(u_samples, u_transforms)):
                self.buffer.push(s.id, self.step, t.invert(u_bundle.final[i].detach(), spatial=(-2, -1)))

        self.step += 1
        if self.eval_set and cfg.eval_every and self.step % cfg.eval_every == 0:
            report = evaluate(self.model, self.eval_set)
            row["dice_eval"], row["miou_eval"] = report.dice_percent, report.miou_percent
        self.history.append(row)
        if self.out_dir is not None:
            self._append_log(row)
        return row

    def run(self, steps: int | None = None) -> list[dict]:
        end = self.config.total_steps if steps is None else self.step + steps
        while self.step < end:
            self.train_step()
        return self.history

    def _append_log(self, row):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / "metrics.csv"
        new = not path.exists()
        with open(path, "a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            if new:
                writer.writeheader()
            writer.writerow(row)

    def _dump_divergence(self, row):
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        dump = {"row": row, "lr": self.lr_at(self.step), "fingerprint": fingerprint(self.config),
                "recent": self.history[-20:]}
        (self.out_dir / "divergence.json").write_text(json.dumps(dump, indent=2, default=str))

    def evaluate(self, dataset: list[Sample], beta: float | None = None):
        return evaluate(self.model, dataset, beta, fingerprint(self.config), self.config.seed)

    # checkpointing

    def state_dict(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "config": dump_config(self.config),
            "fingerprint": fingerprint(self.config),
            "step": self.step,
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "rngs": {k: json.dumps(g.bit_generator.state) for k, g in self.rngs.items()},
            "torch_rng": torch.get_rng_state(),
            "buffer": self.buffer.state_dict(),
            "history": json.dumps(self.history),
            "clip_events": self.clip_events,
        }

    def load_state_dict(self, state: dict) -> None:
        if state["fingerprint"] != fingerprint(self.config):
            raise CheckpointError("checkpoint was written for a different configuration")
        self.model.load_state_dict(state["model"])
        self.optimizer.load_state_dict(state["optimizer"])
        for k, g in self.rngs.items():
            g.bit_generator.state = json.loads(state["rngs"][k])
        torch.set_rng_state(state["torch_rng"])
        self.buffer.load_state_dict(state["buffer"])
        self.step = int(state["step"])
        self.history = json.loads(state["history"])
        self.clip_events = int(state["clip_events"])

    def save(self, path) -> None:
        save_checkpoint(self.state_dict(), path)

    @classmethod
    def from_checkpoint(cls, path, labeled, unlabeled=None, eval_set=None, out_dir=None) -> "Trainer":
        state = load_checkpoint(path)
        trainer = cls(config_from_checkpoint(state), labeled, unlabeled, eval_set, out_dir)
        trainer.load_state_dict(state)
        return trainer


def save_checkpoint(state: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(state, tmp)
    tmp.replace(path)


def load_checkpoint(path) -> dict:
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        reason = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        raise CheckpointError(f"{path} is not a readable checkpoint ({reason})") from exc
    if not isinstance(state, dict) or "format_version" not in state:
        raise CheckpointError(f"{path} is not a maxico checkpoint")
    if state["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path} has format version {state['format_version']}, this build reads {CHECKPOINT_VERSION}"
        )
    return state


def config_from_checkpoint(state: dict) -> TrainConfig:
    return from_flat(parse_text(state["config"]))


def model_from_checkpoint(path) -> tuple[FusionSegNet, TrainConfig]:
    state = load_checkpoint(path)
    config = config_from_checkpoint(state)
    model = FusionSegNet(config.model, config.fusion, seed=config.seed)
    model.load_state_dict(state["model"])
    model.eval()
    return model, config


def train_supervised(config: TrainConfig, dataset: list[Sample], eval_set=None, out_dir=None) -> Trainer:
    trainer = Trainer(config, dataset, None, eval_set, out_dir)
    trainer.run()
    return trainer


def train_semi(config: TrainConfig, labeled: list[Sample], unlabeled: list[Sample], eval_set=None,
               out_dir=None) -> Trainer:
    if not labeled or not unlabeled:
        raise ValueError("semi-supervised training needs non-empty labeled and unlabeled sets")
    trainer = Trainer(config, labeled, unlabeled, eval_set, out_dir)
    trainer.run()
    return trainer
