"""Fine-tuning loop: AdamW over attached adapters against the matching loss.

Each step assembles a batch of (prompt, target distribution) pairs, takes the
weighted mean of per-pair losses, and optionally stops once the loss sits
within early_stop_ratio of the batch's entropy floor.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

from .lora import LoraConfig
from .model import TransformerLM
from .numerics import NumericError, Rng, backward, zero_grads
from .objective import TargetDistribution, dm_loss, loss_floor
from .optim import AdamW

__all__ = ["TrainConfig", "TrainPair", "FinetuneError", "FinetuneResult", "finetune"]

_STOP_MODES = ("auto", "always", "never")


class FinetuneError(RuntimeError):
    """Fine-tuning aborted (bad config, missing adapters, non-finite loss)."""


@dataclass
class TrainConfig:
    lr: float = 5e-5
    batch_size: int = 32
    max_steps: int = 50
    early_stop_ratio: float = 0.20
    early_stop: str = "auto"          # auto: only when a proxy target is present
    seed: int = 0
    lora: LoraConfig = dc_field(default_factory=LoraConfig)
    weight_decay: float = 0.0
    target_chunk: int = 48            # rows per teacher-forced pass

    def __post_init__(self):
        for name in ("lr", "batch_size", "max_steps", "target_chunk"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.early_stop_ratio <= 1.0:
            raise ValueError(f"early_stop_ratio must be in (0, 1], "
                             f"got {self.early_stop_ratio}")
        if self.early_stop not in _STOP_MODES:
            raise ValueError(f"early_stop must be one of {_STOP_MODES}")


@dataclass(frozen=True)
class TrainPair:
    """One concrete training instance: a rendered prompt and its target."""

    task: str
    prompt: str
    dist: TargetDistribution


@dataclass
class FinetuneResult:
    losses: list[float]
    floors: list[float]
    steps: int
    stopped_early: bool

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


def _batch_counts(n_pairs: int, batch_size: int, rng: Rng) -> dict[int, int]:
    """Pair index -> multiplicity for one batch.

    Fewer pairs than the batch: cycle deterministically so every pair appears
    each step. More pairs: draw a random subset without replacement.
    """
    counts: dict[int, int] = {}
    if n_pairs <= batch_size:
        for i in range(batch_size):
            idx = i % n_pairs
            counts[idx] = counts.get(idx, 0) + 1
    else:
        for idx in rng.permutation(n_pairs)[:batch_size]:
            counts[int(idx)] = 1
    return counts


def finetune(model: TransformerLM, pairs: list[TrainPair], cfg: TrainConfig,
             rng: Rng | None = None) -> FinetuneResult:
    """Train the attached adapters toward the pair targets; base stays frozen.

    Per step: mean of per-pair losses weighted by batch multiplicity, gradient
    accumulation pair by pair, then one AdamW update. Early stop triggers
    before the update once loss <= (1 + early_stop_ratio) * mean floor.
    """
    if not model.adapters:
        raise FinetuneError("finetune requires attached adapters")
    if not pairs:
        raise FinetuneError("finetune needs at least one training pair")
    rng = rng if rng is not None else Rng(cfg.seed).substream("finetune/batch")
    stop_on = cfg.early_stop == "always" or (
        cfg.early_stop == "auto" and any(p.dist.empirical_proxy for p in pairs))
    floors = [loss_floor(p.dist) for p in pairs]
    trainable = model.trainable()
    opt = AdamW(trainable, lr=cfg.lr, weight_decay=cfg.weight_decay)
    losses: list[float] = []
    batch_floors: list[float] = []
    stopped = False
    step = 0
    while step < cfg.max_steps:
        counts = _batch_counts(len(pairs), cfg.batch_size, rng)
        loss_val = 0.0
        floor_val = 0.0
        for idx, count in counts.items():
            pair = pairs[idx]
            w = count / cfg.batch_size
            try:
                part = dm_loss(model, pair.prompt, pair.dist, chunk=cfg.target_chunk) * w
            except NumericError as exc:
                zero_grads(trainable)
                raise FinetuneError(f"non-finite loss at step {step} "
                                    f"(task {pair.task!r})") from exc
            val = part.item()
            if not math.isfinite(val):
                zero_grads(trainable)
                raise FinetuneError(f"non-finite loss at step {step} "
                                    f"(task {pair.task!r})")
            backward(part)  # accumulate grads pair by pair
            loss_val += val
            floor_val += w * floors[idx]
        losses.append(loss_val)
        batch_floors.append(floor_val)
        step += 1
        if stop_on and loss_val <= (1.0 + cfg.early_stop_ratio) * floor_val:
            zero_grads(trainable)
            stopped = True
            break
        opt.step()
        opt.zero_grad()
    return FinetuneResult(losses=losses, floors=batch_floors, steps=step,
                          stopped_early=stopped)
