"""Distribution-matching objective over an enumerable set of target strings.

The loss is the cross-entropy -sum_y p*(y) log p_model(y | prompt) over exact
sequence probabilities, which decomposes as KL(p* || p_model) + H(p*). Its
floor H(p*) is reached exactly when the model matches the target weights.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

from . import numerics as nm
from .model import EOS_ID, TransformerLM, encode, sequence_log_probs
from .numerics import Tensor

__all__ = [
    "DistributionError", "TargetDistribution", "validate_prefix_free",
    "dm_loss", "loss_floor",
]

_WEIGHT_TOL = 1e-9


class DistributionError(ValueError):
    """Target distribution violates its contract (weights, duplicates, prefixes)."""


def validate_prefix_free(sequences: Sequence[Sequence[int]]) -> list[tuple[int, int]]:
    """Report every ordered index pair (i, j) where sequence i is a prefix of
    sequence j. Duplicates count: an equal pair is reported in both orders."""
    seqs = [tuple(s) for s in sequences]
    violations = []
    for i, a in enumerate(seqs):
        for j, b in enumerate(seqs):
            if i != j and len(a) <= len(b) and b[: len(a)] == a:
                violations.append((i, j))
    return violations


@dataclass
class TargetDistribution:
    """Weighted target strings plus their token encodings (EOS appended).

    entries hold the raw completion strings exactly as the model should emit
    them. empirical_proxy marks distributions estimated from samples (e.g. a
    name frequency table) rather than enumerating the true outcome set.
    """

    entries: list[tuple[str, float]]
    empirical_proxy: bool = False
    _encoded: list[list[int]] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self.entries:
            raise DistributionError("target distribution has no entries")
        total = 0.0
        seen = set()
        for text, w in self.entries:
            if w < 0:
                raise DistributionError(f"negative weight {w} for target {text!r}")
            if text in seen:
                raise DistributionError(f"duplicate target {text!r}")
            seen.add(text)
            total += w
        if abs(total - 1.0) > _WEIGHT_TOL:
            raise DistributionError(f"weights sum to {total!r}, expected 1 within {_WEIGHT_TOL}")
        self._encoded = [[*encode(text), EOS_ID] for text, _ in self.entries]
        bad = validate_prefix_free(self._encoded)
        if bad:
            i, j = bad[0]
            raise DistributionError(
                f"targets are not prefix-free even with EOS: {self.entries[i][0]!r} "
                f"prefixes {self.entries[j][0]!r} ({len(bad)} violation(s))")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def strings(self) -> list[str]:
        return [t for t, _ in self.entries]

    @property
    def weights(self) -> list[float]:
        return [w for _, w in self.entries]

    def encoded(self) -> list[list[int]]:
        return [list(s) for s in self._encoded]

    @classmethod
    def uniform(cls, strings: Sequence[str], empirical_proxy: bool = False) -> "TargetDistribution":
        n = len(strings)
        if n == 0:
            raise DistributionError("uniform distribution over zero strings")
        return cls([(s, 1.0 / n) for s in strings], empirical_proxy=empirical_proxy)

    @classmethod
    def from_counts(cls, counts: Sequence[tuple[str, float]],
                    empirical_proxy: bool = True) -> "TargetDistribution":
        total = float(sum(c for _, c in counts))
        if total <= 0:
            raise DistributionError("counts must have positive total")
        return cls([(s, c / total) for s, c in counts], empirical_proxy=empirical_proxy)


def loss_floor(dist: TargetDistribution) -> float:
    """Entropy of the target weights in nats; zero-weight entries contribute 0."""
    return -sum(w * math.log(w) for w in dist.weights if w > 0.0)


def dm_loss(model: TransformerLM, prompt, dist: TargetDistribution,
            chunk: int = 64) -> Tensor:
    """Differentiable scalar -sum_y p*(y) log p_model(y | prompt).

    Targets are scored in chunks to bound the working set; the chunk split does
    not change the value beyond float reassociation (~1e-15).
    """
    encoded = dist.encoded()
    weights = dist.weights
    total: Tensor | None = None
    for start in range(0, len(encoded), chunk):
        rows = encoded[start: start + chunk]
        w = weights[start: start + chunk]
        slp = sequence_log_probs(model, prompt, rows)
        part = (slp * w).sum() * -1.0
        total = part if total is None else total + part
    return total
