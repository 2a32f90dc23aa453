"""Multi-axis consistency: condition enumeration, hard-label thresholding and
the probabilistic pseudo-label vote."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .fusion import PredictionBundle

FUSED_FINAL = "fused"
CNN_BRANCH = "cnn"
CURRENT = 0
THRESHOLD = 0.5


@dataclass(frozen=True)
class Condition:
    """theta = [model, scale, time]; ``time`` 0 is the current step, k >= 1 is k visits ago."""

    model: str
    scale: int
    time: int = CURRENT

    @property
    def current(self):
        return self.time == CURRENT


@dataclass(frozen=True)
class AxisToggles:
    intra_model: bool = True
    inter_model: bool = True
    temporal: bool = True

    @property
    def any(self):
        return self.intra_model or self.inter_model or self.temporal

    def as_tuple(self):
        return (self.intra_model, self.inter_model, self.temporal)


class TemporalBuffer:
    """Per-sample ring of detached soft labels from earlier visits.

    Entries are stored in the sample's canonical (un-augmented) orientation,
    newest first, each tagged with the step that produced it.
    """

    def __init__(self, depth: int = 1):
        if depth < 1:
            raise ValueError("buffer depth must be at least 1")
        self.depth = depth
        self._store: dict[str, deque] = {}

    def __len__(self):
        return len(self._store)

    def push(self, sample_id: str, step: int, soft: torch.Tensor) -> None:
        ring = self._store.setdefault(sample_id, deque(maxlen=self.depth))
        if ring and ring[0][0] >= step:
            raise ValueError(f"buffer for {sample_id} already holds step {ring[0][0]} >= {step}")
        ring.appendleft((step, soft.detach().clone()))

    def history(self, sample_id: str, before_step: int) -> list[tuple[int, torch.Tensor]]:
        """Entries strictly older than ``before_step``, newest first."""
        return [(s, t) for s, t in self._store.get(sample_id, ()) if s < before_step]

    def state_dict(self):
        return {"depth": self.depth,
                "entries": {k: [(s, t) for s, t in ring] for k, ring in self._store.items()}}

    def load_state_dict(self, state):
        self.depth = state["depth"]
        self._store = {k: deque(v, maxlen=self.depth) for k, v in state["entries"].items()}


def upsample_soft(q: torch.Tensor, size) -> torch.Tensor:
    """Bilinear upsampling followed by re-normalisation over classes."""
    if tuple(q.shape[-2:]) == tuple(size):
        return q
    up = F.interpolate(q, size=size, mode="bilinear", align_corners=False).clamp_min(0)
    return up / up.sum(dim=1, keepdim=True)


def current_conditions(bundle: PredictionBundle, toggles: AxisToggles) -> list[tuple[Condition, torch.Tensor]]:
    """Current-step contributors at full resolution; these carry gradient.

    P always takes part as the anchor.
    """
    size = bundle.final.shape[-2:]
    out = [(Condition(FUSED_FINAL, 1), bundle.final)]
    if toggles.intra_model:
        for s, q in enumerate(bundle.scale_preds, start=2):
            out.append((Condition(FUSED_FINAL, s), upsample_soft(q, size)))
    if toggles.inter_model and bundle.cnn_pred is not None:
        out.append((Condition(CNN_BRANCH, 1), bundle.cnn_pred))
    return out


def enumerate_conditions(bundle: PredictionBundle, toggles: AxisToggles, buffer: TemporalBuffer | None = None,
                         sample_id: str | None = None, index: int = 0, step: int = 0,
                         transform=None) -> list[tuple[Condition, torch.Tensor]]:
    """All (condition, soft label) pairs voting for batch element ``index``.

    Historical entries are mapped into the current augmentation with
    ``transform`` (a ``data.Transform``) before they join.
    """
    if not toggles.any:
        raise ValueError("at least one consistency axis must be enabled")
    theta = [(c, p[index]) for c, p in current_conditions(bundle, toggles)]
    if toggles.temporal and buffer is not None and sample_id is not None:
        for k, (_, soft) in enumerate(buffer.history(sample_id, step), start=1):
            if transform is not None:
                soft = transform.apply(soft, spatial=(-2, -1))
            theta.append((Condition(FUSED_FINAL, 1, k), soft))
    return theta


def harden(soft: torch.Tensor) -> torch.Tensor:
    """1 where the class probability is >= 0.5, else 0 (entry-wise)."""
    return (soft >= THRESHOLD).to(soft.dtype)


def vote(hard_labels: list[torch.Tensor]) -> torch.Tensor:
    """Mean of the hard labels over all conditions."""
    if not hard_labels:
        raise ValueError("vote needs at least one hard label")
    shapes = {tuple(h.shape) for h in hard_labels}
    if len(shapes) != 1:
        raise ValueError(f"hard labels disagree in shape: {sorted(shapes)}")
    total = hard_labels[0].clone()
    for h in hard_labels[1:]:
        total = total + h
    return total / len(hard_labels)


def consistency_gap(a: torch.Tensor, b: torch.Tensor) -> float:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return float(torch.linalg.vector_norm((a - b).double()))


@torch.no_grad()
def pseudo_labels(bundle: PredictionBundle, toggles: AxisToggles, buffer: TemporalBuffer | None,
                  sample_ids: list[str], step: int, transforms=None) -> tuple[torch.Tensor, list[int]]:
    """Vote one pseudo-label per batch element; returns the (B, K, H, W) stack and each |Theta|."""
    labels, sizes = [], []
    for i, sid in enumerate(sample_ids):
        t = transforms[i] if transforms is not None else None
        theta = enumerate_conditions(bundle, toggles, buffer, sid, i, step, t)
        labels.append(vote([harden(p.detach()) for _, p in theta]))
        sizes.append(len(theta))
    return torch.stack(labels), sizes
