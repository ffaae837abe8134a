"""Low-rank adapters over selected weight matrices of a frozen base model.

An adapted matrix computes W + (alpha/rank) * a @ b with a [d_in, r] Gaussian
and b [r, d_out] zeros, so a freshly attached model is output-identical to its
base. Only a and b train; every base parameter is frozen on attach.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Rng, Tensor, mul, matmul, add
from .model import TransformerLM

__all__ = ["LoraConfig", "LoraAdapter", "AdapterError", "attach_adapters", "detach_adapters"]

DEFAULT_TARGETS = ("wq", "wk", "wv", "wo", "w1", "w2")


class AdapterError(ValueError):
    """Adapter configuration does not match the model."""


@dataclass
class LoraConfig:
    rank: int = 4
    alpha: float = 4.0          # scale alpha/rank == 1 at the default rank
    targets: tuple[str, ...] = DEFAULT_TARGETS
    init_std: float = 0.02

    def __post_init__(self):
        if self.rank < 1:
            raise AdapterError(f"rank must be >= 1, got {self.rank}")
        if self.alpha <= 0:
            raise AdapterError(f"alpha must be positive, got {self.alpha}")
        if not self.targets:
            raise AdapterError("targets must name at least one weight matrix")


class LoraAdapter:
    """One adapted matrix: frozen base plus a trainable rank-r update."""

    def __init__(self, name: str, base: Tensor, rank: int, alpha: float,
                 rng: Rng, init_std: float):
        if base.ndim != 2:
            raise AdapterError(f"target {name!r} is not a matrix (shape {base.shape})")
        d_in, d_out = base.shape
        self.name = name
        self.base = base
        self.rank = rank
        self.alpha = float(alpha)
        self.a = Tensor(rng.normal((d_in, rank), std=init_std), requires_grad=True)
        self.b = Tensor(np.zeros((rank, d_out)), requires_grad=True)

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def trainable(self) -> list[Tensor]:
        return [self.a, self.b]

    def n_trainable(self) -> int:
        return self.a.size + self.b.size

    def effective(self) -> Tensor:
        """Differentiable W + scale * a @ b; gradients reach only a and b."""
        return add(self.base, mul(matmul(self.a, self.b), self.scale))

    def merge(self) -> Tensor:
        """Dense merged weight as a fresh constant tensor."""
        return Tensor(self.base.data + self.scale * (self.a.data @ self.b.data))


def _resolve_targets(model: TransformerLM, targets: tuple[str, ...]) -> list[str]:
    names = []
    for target in targets:
        if target in model.params:
            matched = [target]
        else:
            matched = [n for n in model.params if n.endswith("." + target)]
        if not matched:
            raise AdapterError(f"target {target!r} matches no model parameter")
        for n in matched:
            if model.params[n].ndim != 2:
                raise AdapterError(f"target {n!r} is not a matrix (shape {model.params[n].shape})")
        names.extend(matched)
    # preserve first-seen order, drop duplicates
    seen: dict[str, None] = {}
    for n in names:
        seen.setdefault(n)
    return list(seen)


def attach_adapters(model: TransformerLM, config: LoraConfig, rng: Rng) -> list[Tensor]:
    """Freeze the whole base model and attach fresh adapters; returns the
    trainable a/b tensors. Target names may be fully qualified ("layer0.wq")
    or family suffixes ("wq", expanded across layers)."""
    if model.adapters:
        raise AdapterError("model already has adapters attached")
    names = _resolve_targets(model, config.targets)
    for p in model.params.values():
        p.requires_grad = False
    trainable: list[Tensor] = []
    for n in names:
        ad = LoraAdapter(n, model.params[n], config.rank, config.alpha, rng, config.init_std)
        model.adapters[n] = ad
        trainable.extend(ad.trainable())
    return trainable


def detach_adapters(model: TransformerLM) -> None:
    """Drop adapters and unfreeze the base parameters."""
    model.adapters.clear()
    for p in model.params.values():
        p.requires_grad = True
