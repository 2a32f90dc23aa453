"""Dice / IoU scores and the evaluation loop."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import Sample


def _check(pred, target):
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ in shape")
    return pred, target


def per_class_dice(pred, target, num_classes: int) -> np.ndarray:
    """Dice for every class; a class absent from both maps scores 1."""
    pred, target = _check(pred, target)
    out = np.empty(num_classes)
    for k in range(num_classes):
        p, t = pred == k, target == k
        denom = p.sum() + t.sum()
        out[k] = 1.0 if denom == 0 else 2.0 * (p & t).sum() / denom
    return out


def per_class_iou(pred, target, num_classes: int) -> np.ndarray:
    pred, target = _check(pred, target)
    out = np.empty(num_classes)
    for k in range(num_classes):
        p, t = pred == k, target == k
        union = (p | t).sum()
        out[k] = 1.0 if union == 0 else (p & t).sum() / union
    return out


def dice_score(pred, target, num_classes: int = 2) -> float:
    """Mean Dice over foreground classes 1..K-1."""
    return float(per_class_dice(pred, target, num_classes)[1:].mean())


def miou_score(pred, target, num_classes: int = 2) -> float:
    """Mean IoU over foreground classes 1..K-1."""
    return float(per_class_iou(pred, target, num_classes)[1:].mean())


@dataclass
class EvalReport:
    dice_percent: float
    miou_percent: float
    per_sample: list[dict] = field(default_factory=list)
    fingerprint: str = ""
    seed: int = 0
    beta: float | None = None

    def as_dict(self):
        return {"dice_percent": self.dice_percent, "miou_percent": self.miou_percent,
                "num_samples": len(self.per_sample), "fingerprint": self.fingerprint,
                "seed": self.seed, "beta": self.beta}

    def save(self, directory, stem="eval"):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / f"{stem}.txt", "w") as fh:
            for k, v in self.as_dict().items():
                fh.write(f"{k} = {v!r}\n" if isinstance(v, float) else f"{k} = {v}\n")
        with open(directory / f"{stem}_samples.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["id", "dice", "miou"])
            writer.writeheader()
            writer.writerows(self.per_sample)


def images_to_tensor(samples: list[Sample], dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.image for s in samples])).permute(0, 3, 1, 2).to(dtype)


@torch.no_grad()
def predict(model, samples: list[Sample], beta: float | None, batch_size: int = 16) -> list[np.ndarray]:
    """Argmax of the final prediction P for every sample."""
    was_training = model.training
    model.eval()
    preds = []
    dtype = next(model.parameters()).dtype
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        bundle = model(images_to_tensor(chunk, dtype), [s.caption for s in chunk], beta)
        preds.extend(bundle.final.argmax(dim=1).numpy())
    model.train(was_training)
    return preds


def evaluate(model, dataset: list[Sample], beta: float | None = None, fingerprint: str = "",
             seed: int = 0) -> EvalReport:
    if not dataset:
        raise ValueError("cannot evaluate on an empty dataset")
    missing = [s.id for s in dataset if s.mask is None]
    if missing:
        raise ValueError(f"evaluation needs masks; {len(missing)} samples lack one (e.g. {missing[0]})")
    if beta is None and model.config.vit_cnn_fusion and model.fusion.mode == "npf":
        beta = model.fusion.beta_infer
    k = model.config.num_classes
    rows = []
    for s, pred in zip(dataset, predict(model, dataset, beta)):
        rows.append({"id": s.id, "dice": dice_score(pred, s.mask, k), "miou": miou_score(pred, s.mask, k)})
    dice = 100.0 * float(np.mean([r["dice"] for r in rows]))
    miou = 100.0 * float(np.mean([r["miou"] for r in rows]))
    return EvalReport(dice, miou, rows, fingerprint, seed, beta)
