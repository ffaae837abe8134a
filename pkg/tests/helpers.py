"""Shared test utilities: finite-difference gradient checks and a lookup-table
language model with exactly controllable sequence probabilities."""
from __future__ import annotations

import math

import numpy as np

from dmtune import numerics as nm
from dmtune.model import BOS_ID, EOS_ID, VOCAB_SIZE, encode
from dmtune.numerics import Tensor

REL_TOL = 1e-4
ABS_FLOOR = 1e-8  # below this the FD signal is pure roundoff; treat as matching zero


def finite_diff_grad(fn, param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar fn() w.r.t. every entry of param."""
    grad = np.zeros_like(param.data)
    flat = param.data.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        with nm.no_grad():
            up = fn()
        flat[i] = keep - h
        with nm.no_grad():
            down = fn()
        flat[i] = keep
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Elementwise relative error with an absolute floor for near-zero grads."""
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    rel = np.where(diff < ABS_FLOOR, 0.0, diff / np.maximum(scale, 1e-300))
    return float(rel.max()) if rel.size else 0.0


def grad_check(fn, params: list[Tensor], h: float = 1e-5) -> float:
    """Backprop fn() once, then compare every param grad to finite differences.
    Returns the worst relative error across all params."""
    for p in params:
        p.grad = None
    nm.reset_tape()
    loss = fn()
    nm.backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = finite_diff_grad(lambda: fn().item(), p, h)
        worst = max(worst, max_rel_error(analytic, numeric))
    return worst


class TableLM:
    """Duck-typed stand-in for TransformerLM with hand-set conditionals.

    table maps a context tuple of token ids (BOS-anchored) to a dict
    {next_token_id: prob}. Unlisted contexts fall back to uniform over the
    listed fallback set, keeping every sequence probability well-defined.
    """

    def __init__(self, table: dict[tuple[int, ...], dict[int, float]],
                 fallback: dict[int, float] | None = None,
                 max_context: int = 256):
        self.table = table
        self.fallback = fallback or {EOS_ID: 1.0}
        self.max_context = max_context
        self.config = type("Cfg", (), {"max_context": max_context, "vocab_size": VOCAB_SIZE})()

    def _row_logits(self, context: tuple[int, ...]) -> np.ndarray:
        dist = self.table.get(context, self.fallback)
        row = np.full(VOCAB_SIZE, -1e30)
        for tok, p in dist.items():
            row[tok] = math.log(p) if p > 0 else -1e30
        return row

    def full_logits(self, ids: np.ndarray, last_only: bool = False):
        ids = np.asarray(ids)
        b, t = ids.shape
        if last_only:
            out = np.stack([self._row_logits(tuple(int(x) for x in row)) for row in ids])
            return Tensor(out)
        out = np.empty((b, t, VOCAB_SIZE))
        for r in range(b):
            row = [int(x) for x in ids[r]]
            for j in range(t):
                out[r, j] = self._row_logits(tuple(row[: j + 1]))
        return Tensor(out)


def completion_table(prompt: str, weighted: list[tuple[str, float]]) -> TableLM:
    """TableLM whose p(text + EOS | prompt) equals each weight exactly.

    Builds the prefix tree of the EOS-terminated completions; each node's
    conditionals are subtree masses, so the chain product telescopes to the
    completion weight.
    """
    prompt_ids = tuple([BOS_ID, *encode(prompt)])
    masses: dict[tuple[int, ...], dict[int, float]] = {}
    for text, w in weighted:
        ids = [*encode(text), EOS_ID]
        ctx = prompt_ids
        for tok in ids:
            node = masses.setdefault(ctx, {})
            node[tok] = node.get(tok, 0.0) + w
            ctx = ctx + (tok,)
    table = {}
    for ctx, node in masses.items():
        total = sum(node.values())
        table[ctx] = {tok: m / total for tok, m in node.items()}
    return TableLM(table)
