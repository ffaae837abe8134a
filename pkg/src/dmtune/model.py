"""Character-level tokenizer and a small decoder-only transformer LM.

The vocabulary is fixed: printable ASCII 32..126 plus BOS/EOS/PAD. The default
2-layer model (~122k params) is an architecture stand-in: the interfaces treat
it as an opaque sequence model, so nothing downstream depends on its size.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import numerics as nm
from .numerics import Rng, Tensor
from .optim import AdamW

__all__ = [
    "VOCAB_SIZE", "BOS_ID", "EOS_ID", "PAD_ID",
    "EncodingError", "LengthError", "encode", "decode", "is_encodable",
    "ModelConfig", "TransformerLM",
    "sequence_log_prob", "sequence_log_probs", "sample", "sample_many", "pretrain",
]

_CHAR_LO, _CHAR_HI = 32, 126          # printable ASCII, inclusive
_N_CHARS = _CHAR_HI - _CHAR_LO + 1    # 95
BOS_ID = _N_CHARS                     # 95
EOS_ID = _N_CHARS + 1                 # 96
PAD_ID = _N_CHARS + 2                 # 97
VOCAB_SIZE = _N_CHARS + 3             # 98


class EncodingError(ValueError):
    """Text contains a character outside printable ASCII."""


class LengthError(ValueError):
    """A sequence does not fit the model context window."""


def is_encodable(text: str) -> bool:
    return all(_CHAR_LO <= ord(c) <= _CHAR_HI for c in text)


def encode(text: str) -> list[int]:
    """Map printable-ASCII text to token ids; names the offending char on failure."""
    ids = []
    for i, c in enumerate(text):
        o = ord(c)
        if not _CHAR_LO <= o <= _CHAR_HI:
            raise EncodingError(f"unencodable character {c!r} at offset {i}")
        ids.append(o - _CHAR_LO)
    return ids


def decode(ids: Sequence[int]) -> str:
    """Inverse of encode: drops BOS/PAD, stops at the first EOS."""
    chars = []
    for t in ids:
        t = int(t)
        if t == EOS_ID:
            break
        if t in (BOS_ID, PAD_ID):
            continue
        if not 0 <= t < _N_CHARS:
            raise EncodingError(f"token id {t} outside vocabulary")
        chars.append(chr(t + _CHAR_LO))
    return "".join(chars)


@dataclass
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    max_context: int = 256
    vocab_size: int = VOCAB_SIZE

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "d_ff", "max_context", "vocab_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")


@lru_cache(maxsize=8)
def _causal_keep(t: int) -> np.ndarray:
    # keep[i, j] true where j may influence i
    return np.tril(np.ones((t, t), dtype=bool))


_MASK_FILL = -1e30  # softmax of this underflows to exactly 0.0, so masked grads stay 0


class TransformerLM:
    """Pre-norm decoder-only transformer with a tied output projection.

    Weight layout is row-vector convention: activations are [batch, T, d] and
    weights are [d_in, d_out]. Params live in an insertion-ordered dict; LoRA
    adapters, when attached, shadow entries of that dict by name.
    """

    def __init__(self, config: ModelConfig, rng: Rng, init_std: float = 0.02):
        self.config = config
        c = config
        draw = lambda *shape: rng.normal(shape, std=init_std)
        p: dict[str, Tensor] = {}
        p["tok_emb"] = Tensor(draw(c.vocab_size, c.d_model), requires_grad=True)
        p["pos_emb"] = Tensor(draw(c.max_context, c.d_model), requires_grad=True)
        for i in range(c.n_layers):
            for w in ("wq", "wk", "wv", "wo"):
                p[f"layer{i}.{w}"] = Tensor(draw(c.d_model, c.d_model), requires_grad=True)
            p[f"layer{i}.w1"] = Tensor(draw(c.d_model, c.d_ff), requires_grad=True)
            p[f"layer{i}.b1"] = Tensor(np.zeros(c.d_ff), requires_grad=True)
            p[f"layer{i}.w2"] = Tensor(draw(c.d_ff, c.d_model), requires_grad=True)
            p[f"layer{i}.b2"] = Tensor(np.zeros(c.d_model), requires_grad=True)
            for ln in ("ln1", "ln2"):
                p[f"layer{i}.{ln}.g"] = Tensor(np.ones(c.d_model), requires_grad=True)
                p[f"layer{i}.{ln}.b"] = Tensor(np.zeros(c.d_model), requires_grad=True)
        p["ln_f.g"] = Tensor(np.ones(c.d_model), requires_grad=True)
        p["ln_f.b"] = Tensor(np.zeros(c.d_model), requires_grad=True)
        self.params = p
        self.adapters: dict[str, object] = {}

    @property
    def max_context(self) -> int:
        return self.config.max_context

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def n_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def trainable(self) -> list[Tensor]:
        out = [t for t in self.params.values() if t.requires_grad]
        for ad in self.adapters.values():
            out.extend(ad.trainable())
        return out

    def _eff(self, name: str) -> Tensor:
        ad = self.adapters.get(name)
        return ad.effective() if ad is not None else self.params[name]

    def _attention(self, i: int, h: Tensor, batch: int, t: int, last_q: bool = False) -> Tensor:
        c = self.config
        dh = c.d_model // c.n_heads
        k = h @ self._eff(f"layer{i}.wk")
        v = h @ self._eff(f"layer{i}.wv")
        # [B, T, D] -> [B, H, T, dh]
        split = lambda x: x.reshape(batch, t, c.n_heads, dh).transpose(0, 2, 1, 3)
        k, v = split(k), split(v)
        scale = 1.0 / np.sqrt(dh)
        if last_q:
            # final position only; its causal row sees every key, so no mask
            q = (nm.last_step(h) @ self._eff(f"layer{i}.wq")).reshape(batch, c.n_heads, 1, dh)
            weights = nm.softmax((q @ k.transpose(0, 1, 3, 2)) * scale, axis=-1)
            ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(batch, c.d_model)
            return ctx @ self._eff(f"layer{i}.wo")
        q = split(h @ self._eff(f"layer{i}.wq"))
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        scores = nm.masked_fill(scores, _causal_keep(t), _MASK_FILL)
        weights = nm.softmax(scores, axis=-1)
        ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(batch, t, c.d_model)
        return ctx @ self._eff(f"layer{i}.wo")

    def _mlp(self, i: int, h: Tensor) -> Tensor:
        hidden = nm.gelu(h @ self._eff(f"layer{i}.w1") + self.params[f"layer{i}.b1"])
        return hidden @ self._eff(f"layer{i}.w2") + self.params[f"layer{i}.b2"]

    def full_logits(self, ids: np.ndarray, last_only: bool = False) -> Tensor:
        """Teacher-forced logits [B, T, V] for a [B, T] id matrix.

        With last_only, returns [B, V] logits for the final position only.
        """
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise nm.ShapeError(f"full_logits expects [B, T] ids, got shape {ids.shape}")
        b, t = ids.shape
        if t > self.config.max_context:
            raise LengthError(f"sequence length {t} exceeds max_context {self.config.max_context}")
        p = self.params
        x = nm.embedding(p["tok_emb"], ids) + nm.embedding(p["pos_emb"], np.arange(t))
        final = self.config.n_layers - 1
        for i in range(self.config.n_layers):
            h = nm.layer_norm(x, p[f"layer{i}.ln1.g"], p[f"layer{i}.ln1.b"])
            if last_only and i == final:
                # blocks are position-wise after attention, so narrow to [B, D] here
                x = nm.last_step(x) + self._attention(i, h, b, t, last_q=True)
            else:
                x = x + self._attention(i, h, b, t)
            x = x + self._mlp(i, nm.layer_norm(x, p[f"layer{i}.ln2.g"], p[f"layer{i}.ln2.b"]))
        x = nm.layer_norm(x, p["ln_f.g"], p["ln_f.b"])
        return x @ nm.transpose(p["tok_emb"])  # tied output projection

    def forward(self, prefix: Sequence[int]) -> Tensor:
        """Log-distribution over the next token given a BOS-anchored prefix."""
        row = np.asarray([[BOS_ID, *prefix]])
        logits = self.full_logits(row, last_only=True)
        return nm.log_softmax(logits, axis=-1).reshape(self.config.vocab_size)


# ---- Sequence scoring ----

def _as_ids(prompt) -> list[int]:
    return encode(prompt) if isinstance(prompt, str) else [int(t) for t in prompt]


def sequence_log_probs(model: TransformerLM, prompt, targets: Sequence[Sequence[int]]) -> Tensor:
    """Joint log-probability of each target continuation after the prompt.

    Each target must end with EOS. One teacher-forced pass scores all rows:
    rows are [BOS] + prompt + target, right-padded with PAD, and only the
    target positions contribute. Returns a differentiable [n] tensor.
    """
    prompt_ids = _as_ids(prompt)
    if not targets:
        raise ValueError("sequence_log_probs needs at least one target")
    tlists = [[int(t) for t in tgt] for tgt in targets]
    for tgt in tlists:
        if not tgt or tgt[-1] != EOS_ID:
            raise ValueError("each target must be non-empty and end with EOS")
    np_len = len(prompt_ids)
    max_t = max(len(t) for t in tlists)
    total = np_len + max_t  # input rows drop the final token, so this is the model length
    if total > model.max_context:
        raise LengthError(
            f"prompt {np_len} + target {max_t} tokens exceed max_context {model.max_context}")
    n = len(tlists)
    inp = np.full((n, total), PAD_ID, dtype=np.int64)
    tgt_idx = np.zeros((n, total), dtype=np.int64)
    mask = np.zeros((n, total), dtype=np.float64)
    for r, tgt in enumerate(tlists):
        row = [BOS_ID, *prompt_ids, *tgt]
        k = len(row) - 1
        inp[r, :k] = row[:-1]
        tgt_idx[r, :k] = row[1:]
        mask[r, np_len: np_len + len(tgt)] = 1.0
    logits = model.full_logits(inp)
    logp = nm.log_softmax(logits, axis=-1)
    picked = nm.gather_last(logp, tgt_idx)
    return (picked * mask).sum(axis=1)


def sequence_log_prob(model: TransformerLM, prompt, target: Sequence[int]) -> Tensor:
    """Scalar joint log-probability of one target (must end with EOS)."""
    return sequence_log_probs(model, prompt, [target]).reshape(())


# ---- Sampling ----

def _prep_sampling(model, prompt, temperature, max_new_tokens):
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    prefix = [BOS_ID, *_as_ids(prompt)]
    if len(prefix) >= model.max_context:
        raise LengthError(f"prompt of {len(prefix) - 1} tokens leaves no room to generate")
    room = model.max_context - len(prefix)
    return prefix, min(max_new_tokens, room), temperature < 1e-6


def sample(model: TransformerLM, prompt, temperature: float = 1.0,
           max_new_tokens: int = 32, rng: Rng | None = None) -> str:
    """Draw one continuation; temperature below 1e-6 switches to argmax."""
    prefix, budget, greedy = _prep_sampling(model, prompt, temperature, max_new_tokens)
    if not greedy and rng is None:
        raise ValueError("stochastic sampling needs an rng")
    ids = list(prefix)
    out: list[int] = []
    with nm.no_grad():
        for _ in range(budget):
            logits = model.full_logits(np.asarray([ids]), last_only=True)
            if greedy:
                nxt = int(np.argmax(logits.data[0]))
            else:
                logp = nm.log_softmax(logits * (1.0 / temperature), axis=-1)
                nxt = nm.sample_categorical(logp.data[0], rng)
            if nxt == EOS_ID:
                break
            out.append(nxt)
            ids.append(nxt)
    return decode(out)


def sample_many(model: TransformerLM, prompt, n: int, temperature: float = 1.0,
                max_new_tokens: int = 32, rng: Rng | None = None,
                chunk: int = 256) -> list[str]:
    """Draw n continuations of one prompt, batching rows for throughput.

    Draw order is fixed by (seed, chunk): within a chunk every row gets one
    uniform per step, finished rows included, so results are reproducible.
    """
    prefix, budget, greedy = _prep_sampling(model, prompt, temperature, max_new_tokens)
    if not greedy and rng is None:
        raise ValueError("stochastic sampling needs an rng")
    results: list[str] = []
    with nm.no_grad():
        for start in range(0, n, chunk):
            rows = min(chunk, n - start)
            ids = np.tile(np.asarray(prefix, dtype=np.int64), (rows, 1))
            done = np.zeros(rows, dtype=bool)
            for _ in range(budget):
                logits = model.full_logits(ids, last_only=True)
                if greedy:
                    nxt = np.argmax(logits.data, axis=-1)
                else:
                    logp = nm.log_softmax(logits * (1.0 / temperature), axis=-1)
                    nxt = nm.sample_categorical_rows(logp.data, rng)
                nxt = np.where(done, PAD_ID, nxt)
                done |= nxt == EOS_ID
                ids = np.concatenate([ids, nxt[:, None]], axis=1)
                if done.all():
                    break
            plen = len(prefix)
            results.extend(decode(row[plen:]) for row in ids)
    return results


# ---- Pretraining ----

def pretrain(model: TransformerLM, corpus: Sequence[tuple[str, str]], steps: int,
             rng: Rng, *, lr: float = 3e-3, batch_size: int = 32,
             weight_decay: float = 0.0, lr_floor: float = 0.1,
             trace: list[float] | None = None) -> TransformerLM:
    """Next-token cross-entropy on (prompt, completion) pairs; prompt tokens are
    masked out of the loss. Zero steps returns the model bit-for-bit unchanged.

    The learning rate follows a cosine schedule from lr down to lr * lr_floor;
    the decaying tail damps end-state oscillation on small corpora."""
    if not corpus:
        raise ValueError("pretrain needs a non-empty corpus")
    enc = []
    for prompt, completion in corpus:
        prompt_ids = _as_ids(prompt)
        row = [BOS_ID, *prompt_ids, *encode(completion), EOS_ID]
        if len(row) - 1 > model.max_context:
            raise LengthError(f"corpus pair of {len(row) - 1} tokens exceeds context")
        enc.append((len(prompt_ids), row))
    if steps == 0:
        return model
    opt = AdamW(model.trainable(), lr=lr, weight_decay=weight_decay)
    n = len(enc)
    lr_end = lr * lr_floor
    for step in range(steps):
        opt.lr = lr_end + 0.5 * (lr - lr_end) * (1.0 + np.cos(np.pi * step / steps))
        pick = rng.integers(0, n, batch_size)
        total = max(len(enc[i][1]) for i in pick) - 1
        inp = np.full((batch_size, total), PAD_ID, dtype=np.int64)
        tgt = np.zeros((batch_size, total), dtype=np.int64)
        mask = np.zeros((batch_size, total), dtype=np.float64)
        for r, i in enumerate(pick):
            plen, row = enc[i]
            k = len(row) - 1
            inp[r, :k] = row[:-1]
            tgt[r, :k] = row[1:]
            mask[r, plen: k] = 1.0   # completion tokens and the final EOS
        logits = model.full_logits(inp)
        logp = nm.log_softmax(logits, axis=-1)
        loss = (nm.gather_last(logp, tgt) * mask).sum() * (-1.0 / mask.sum())
        if trace is not None:
            trace.append(loss.item())
        nm.backward(loss)
        opt.step()
        opt.zero_grad()
    return model
