"""Diversity metrics over sampled generations: brace parsing, empirical
distributions, entropy / coverage, and exact KL against an enumerable target.

Entropy is in nats. KL uses the model's unnormalized sequence probabilities
restricted to the target set; pass renormalize=True to report the KL against
the distribution renormalized over that set instead.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np

from . import numerics as nm
from .model import TransformerLM, sequence_log_probs
from .objective import TargetDistribution

__all__ = [
    "MetricError", "parse_braced", "EmpiricalDistribution", "empirical",
    "field_distributions", "entropy", "coverage", "kl_to_target",
    "MetricReport", "plot_table", "write_plot_csv", "write_reports",
]


class MetricError(ValueError):
    """Metric undefined for the given inputs (e.g. no valid samples)."""


def _brace_spans(raw: str) -> list[tuple[int, int]]:
    """(start, end) index pairs of top-level balanced {...} groups, in order."""
    spans = []
    depth = 0
    start = -1
    for i, c in enumerate(raw):
        if c == "{":
            if depth == 0:
                start = i
            depth += 1
        elif c == "}" and depth > 0:
            depth -= 1
            if depth == 0:
                spans.append((start, i))
    return spans


def parse_braced(raw: str, fields: int | None = None) -> str | list[str] | None:
    """Extract brace-wrapped content; None means the output is invalid.

    Single mode (fields=None): content of the first balanced {...}, trimmed.
    Multi mode (fields=k): list of all top-level {...} contents, but only when
    exactly k complete groups are present; a missing or extra field invalidates
    the whole record.
    """
    spans = _brace_spans(raw)
    if fields is None:
        if not spans:
            return None
        s, e = spans[0]
        return raw[s + 1: e].strip()
    if len(spans) != fields:
        return None
    return [raw[s + 1: e].strip() for s, e in spans]


@dataclass
class EmpiricalDistribution:
    """Counts over parsed outputs; invalid samples are excluded from the
    normalized distribution but tracked for the invalid rate."""

    counts: dict[str, int]
    invalid: int = 0

    @property
    def n_valid(self) -> int:
        return sum(self.counts.values())

    @property
    def n_total(self) -> int:
        return self.n_valid + self.invalid

    @property
    def invalid_rate(self) -> float:
        return self.invalid / self.n_total if self.n_total else 0.0

    def probs(self) -> dict[str, float]:
        n = self.n_valid
        if n == 0:
            raise MetricError("no valid samples: distribution undefined")
        return {k: c / n for k, c in self.counts.items()}


_FIELD_SEP = "\n"


def empirical(samples: Sequence[str], fields: int | None = None,
              fold_case: bool = False) -> EmpiricalDistribution:
    """Parse raw generations and count outcomes; multi-field records key on the
    newline-joined field list."""
    counts: dict[str, int] = {}
    invalid = 0
    for raw in samples:
        parsed = parse_braced(raw, fields)
        if parsed is None:
            invalid += 1
            continue
        key = parsed if isinstance(parsed, str) else _FIELD_SEP.join(parsed)
        if fold_case:
            key = key.casefold()
        counts[key] = counts.get(key, 0) + 1
    return EmpiricalDistribution(counts, invalid)


def field_distributions(samples: Sequence[str], fields: int,
                        fold_case: bool = False) -> list[EmpiricalDistribution]:
    """Per-field empirical distributions for k-field records. A record invalid
    in any field is invalid for every field (whole-record contract)."""
    per = [dict() for _ in range(fields)]
    invalid = 0
    for raw in samples:
        parsed = parse_braced(raw, fields)
        if parsed is None:
            invalid += 1
            continue
        for i, value in enumerate(parsed):
            if fold_case:
                value = value.casefold()
            per[i][value] = per[i].get(value, 0) + 1
    return [EmpiricalDistribution(c, invalid) for c in per]


def entropy(dist: EmpiricalDistribution) -> float:
    """Shannon entropy in nats of the valid-sample distribution."""
    probs = dist.probs().values()
    return -sum(p * math.log(p) for p in probs if p > 0.0)


def coverage(dist: EmpiricalDistribution) -> int:
    """Number of distinct valid parsed outputs (0 for an all-invalid set)."""
    return len(dist.counts)


def kl_to_target(model: TransformerLM, prompt, target: TargetDistribution,
                 renormalize: bool = False, chunk: int = 64) -> float:
    """Exact KL(p* || p_model) over the enumerated target set.

    Uses teacher-forced sequence probabilities without renormalizing the model
    over the set (matching the training objective); renormalize=True divides
    the model mass by its total on the set before comparing.
    """
    encoded = target.encoded()
    weights = target.weights
    slp = np.empty(len(encoded))
    with nm.no_grad():
        for start in range(0, len(encoded), chunk):
            rows = encoded[start: start + chunk]
            slp[start: start + len(rows)] = sequence_log_probs(model, prompt, rows).data
    if not np.isfinite(slp).all():
        raise MetricError("model assigns zero probability to a target (log-prob not finite)")
    kl = sum(w * (math.log(w) - lp) for w, lp in zip(weights, slp) if w > 0.0)
    if renormalize:
        kl += math.log(float(np.exp(slp).sum()))
    return float(kl)


# ---- Reporting ----

@dataclass
class MetricReport:
    """One evaluated (task, prompt instance) with its headline numbers."""

    task: str
    instance: str
    n_samples: int
    entropy: float | None
    coverage: int
    invalid_rate: float
    kl: float | None = None

    def json_line(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_samples(cls, task: str, instance: str, samples: Sequence[str],
                     fields: int | None = None, fold_case: bool = False,
                     kl: float | None = None) -> "MetricReport":
        dist = empirical(samples, fields, fold_case)
        ent = entropy(dist) if dist.n_valid else None
        return cls(task, instance, len(samples), ent, coverage(dist), dist.invalid_rate, kl)


def plot_table(dist: EmpiricalDistribution) -> list[tuple[str, int]]:
    """(label, count) rows sorted by descending count, ties by label."""
    return sorted(dist.counts.items(), key=lambda kv: (-kv[1], kv[0]))


def write_plot_csv(path, dist: EmpiricalDistribution) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "count"])
        writer.writerows(plot_table(dist))


def write_reports(path, reports: Sequence[MetricReport]) -> None:
    """Line-delimited JSON, one report per line."""
    with open(path, "w") as fh:
        for r in reports:
            fh.write(r.json_line() + "\n")
