"""Float64 tensors with reverse-mode autodiff on a dynamic tape, plus a seeded PRNG.

Ops append entries to a module-level tape as they execute; `backward` replays the
tape in reverse and clears it. Single-threaded by design. Tensors that do not
require gradients are never recorded and are safe to share read-only.
"""
from __future__ import annotations

import hashlib
import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Rng", "ShapeError", "GradientError", "NumericError", "SamplingError",
    "no_grad", "backward", "tape_size", "reset_tape", "zero_grads",
    "add", "sub", "mul", "neg", "matmul", "transpose", "reshape",
    "embedding", "gather_last", "last_step", "masked_fill",
    "log_softmax", "softmax", "gelu", "layer_norm", "tensor_sum", "tensor_mean",
    "sample_categorical", "sample_categorical_rows",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class GradientError(RuntimeError):
    """Backward-pass contract violation (non-scalar loss, detached loss)."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class SamplingError(ValueError):
    """Categorical sampling received an unnormalized or malformed distribution."""


# ---- Tensor and tape ----

class Tensor:
    """N-dimensional float64 array, optionally tracked on the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class _TapeEntry:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_TAPE: list[_TapeEntry] = []
_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (sampling, evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def tape_size() -> int:
    return len(_TAPE)


def reset_tape() -> None:
    _TAPE.clear()


def _record(inputs: tuple[Tensor, ...], out_data: np.ndarray,
            backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    """Wrap op output; append a tape entry when gradients are live."""
    needs = _GRAD_ENABLED and any(t is not None and t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        _TAPE.append(_TapeEntry(tuple(t for t in inputs if t is not None), out, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into .grad for every leaf on the tape.

    The tape is consumed: intermediate grads are freed as soon as their producing
    entry has been replayed, and the tape is cleared at the end.
    """
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss is not connected to the tape (no grad-tracked inputs)")
    loss.grad = np.ones_like(loss.data)
    try:
        for entry in reversed(_TAPE):
            g = entry.output.grad
            if g is None:
                continue
            grads = entry.backward_fn(g)
            for inp, gi in zip(entry.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += gi
            entry.output.grad = None  # frees intermediate buffers early; leaves keep theirs
    finally:
        _TAPE.clear()


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---- Op helpers ----

def _coerce(x) -> tuple[np.ndarray, Tensor | None]:
    """Return (array view, tensor-or-None): constants take the None path."""
    if isinstance(x, Tensor):
        return x.data, x
    return np.asarray(x, dtype=np.float64), None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---- Elementwise and linear ops ----

def add(a, b) -> Tensor:
    ad, at = _coerce(a)
    bd, bt = _coerce(b)
    def back(g):
        return (_unbroadcast(g, ad.shape) if at is not None else None,
                _unbroadcast(g, bd.shape) if bt is not None else None)
    return _record((at, bt), ad + bd, back)


def sub(a, b) -> Tensor:
    ad, at = _coerce(a)
    bd, bt = _coerce(b)
    def back(g):
        return (_unbroadcast(g, ad.shape) if at is not None else None,
                _unbroadcast(-g, bd.shape) if bt is not None else None)
    return _record((at, bt), ad - bd, back)


def mul(a, b) -> Tensor:
    ad, at = _coerce(a)
    bd, bt = _coerce(b)
    def back(g):
        return (_unbroadcast(g * bd, ad.shape) if at is not None else None,
                _unbroadcast(g * ad, bd.shape) if bt is not None else None)
    return _record((at, bt), ad * bd, back)


def neg(a) -> Tensor:
    ad, at = _coerce(a)
    return _record((at,), -ad, lambda g: (-g,))


def matmul(a, b) -> Tensor:
    ad, at = _coerce(a)
    bd, bt = _coerce(b)
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")
    need_a = at is not None and at.requires_grad
    need_b = bt is not None and bt.requires_grad
    def back(g):
        ga = _unbroadcast(g @ bd.swapaxes(-1, -2), ad.shape) if need_a else None
        gb = _unbroadcast(ad.swapaxes(-1, -2) @ g, bd.shape) if need_b else None
        return ga, gb
    return _record((at, bt), ad @ bd, back)


def transpose(a, axes: tuple[int, ...] | None = None) -> Tensor:
    ad, at = _coerce(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    def back(g):
        return (g.transpose(inv) if inv is not None else g.transpose(),)
    return _record((at,), ad.transpose(axes) if axes is not None else ad.transpose(), back)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    ad, at = _coerce(a)
    old = ad.shape
    return _record((at,), ad.reshape(shape), lambda g: (g.reshape(old),))


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    ad, at = _coerce(a)
    def back(g):
        if axis is None:
            return (np.broadcast_to(g, ad.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, ad.shape).copy(),)
    return _record((at,), ad.sum(axis=axis, keepdims=keepdims), back)


def tensor_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    ad, _ = _coerce(a)
    n = ad.size if axis is None else np.prod([ad.shape[i] for i in np.atleast_1d(axis)])
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ---- Structured ops ----

def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of `weight` ([V, d]) by integer ids (any shape)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.data.shape[0]):
        raise ShapeError(f"embedding ids out of range for table of {weight.data.shape[0]} rows")
    def back(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids, g)
        return (gw,)
    return _record((weight,), weight.data[ids], back)


def gather_last(a, idx: np.ndarray) -> Tensor:
    """Pick a[..., idx[...]] along the last axis; idx has shape a.shape[:-1]."""
    ad, at = _coerce(a)
    idx = np.asarray(idx)
    if idx.shape != ad.shape[:-1]:
        raise ShapeError(f"gather_last index shape {idx.shape} != {ad.shape[:-1]}")
    expanded = idx[..., None]
    out = np.take_along_axis(ad, expanded, axis=-1)[..., 0]
    def back(g):
        ga = np.zeros_like(ad)
        np.put_along_axis(ga, expanded, g[..., None], axis=-1)
        return (ga,)
    return _record((at,), out, back)


def last_step(a) -> Tensor:
    """Slice the final step of the second-to-last axis: [..., T, d] -> [..., d]."""
    ad, at = _coerce(a)
    def back(g):
        ga = np.zeros_like(ad)
        ga[..., -1, :] = g
        return (ga,)
    return _record((at,), ad[..., -1, :].copy(), back)


def masked_fill(a, keep: np.ndarray, fill: float) -> Tensor:
    """Where keep is False, replace entries with `fill` (a constant)."""
    ad, at = _coerce(a)
    keep = np.asarray(keep, dtype=bool)
    return _record((at,), np.where(keep, ad, fill), lambda g: (g * keep,))


def log_softmax(a, axis: int = -1) -> Tensor:
    ad, at = _coerce(a)
    if not np.isfinite(ad).all():
        raise NumericError("log_softmax input contains non-finite values")
    m = ad.max(axis=axis, keepdims=True)
    shifted = ad - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)
    return _record((at,), out, back)


def softmax(a, axis: int = -1) -> Tensor:
    ad, at = _coerce(a)
    m = ad.max(axis=axis, keepdims=True)
    e = np.exp(ad - m)
    out = e / e.sum(axis=axis, keepdims=True)
    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _record((at,), out, back)


_GELU_C = math.sqrt(2.0 / math.pi)


def _tanh(x: np.ndarray) -> np.ndarray:
    # np.exp vectorizes ~3x faster than np.tanh on float64; inf from the exp
    # overflow saturates the quotient to the correct -1 branch.
    with np.errstate(over="ignore"):
        return 2.0 / (1.0 + np.exp(-2.0 * x)) - 1.0


def gelu(a) -> Tensor:
    """Smooth tanh-form gelu; the kink-free form keeps finite-difference audits clean."""
    ad, at = _coerce(a)
    t = _tanh(_GELU_C * (ad + 0.044715 * (ad * ad * ad)))
    out = 0.5 * ad * (1.0 + t)
    def back(g):
        d = 0.5 * (1.0 + t) + 0.5 * ad * (1.0 - t * t) * _GELU_C * (1.0 + 0.134145 * (ad * ad))
        return (g * d,)
    return _record((at,), out, back)


def layer_norm(a, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    ad, at = _coerce(a)
    mu = ad.mean(axis=-1, keepdims=True)
    xc = ad - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    reduce_axes = tuple(range(ad.ndim - 1))
    def back(g):
        gxhat = g * gain.data
        gx = inv * (gxhat
                    - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        ggain = (g * xhat).sum(axis=reduce_axes)
        gbias = g.sum(axis=reduce_axes)
        return gx, ggain, gbias
    return _record((at, gain, bias), out, back)


# ---- Seeded randomness ----

class Rng:
    """PCG64 generator with named substreams derived from (seed, purpose).

    The same (seed, substream path) yields the same draws on any platform;
    substreams for different names are statistically independent.
    """

    def __init__(self, seed: int, _spawn_key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._spawn_key = tuple(_spawn_key)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self._spawn_key)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def substream(self, name: str) -> "Rng":
        digest = hashlib.sha256(name.encode("utf-8")).digest()
        key = (int.from_bytes(digest[:4], "little"), int.from_bytes(digest[4:8], "little"))
        return Rng(self.seed, self._spawn_key + key)

    def normal(self, shape=None, std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(size=shape) * std

    def random(self, size=None):
        return self._gen.random(size=size)

    def integers(self, low: int, high: int, size=None):
        """Uniform ints in [low, high)."""
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def weighted_index(self, weights: Sequence[float]) -> int:
        """Draw an index proportional to non-negative weights."""
        w = np.asarray(weights, dtype=np.float64)
        if w.size == 0 or (w < 0).any() or w.sum() <= 0:
            raise SamplingError("weighted_index needs non-negative weights with positive sum")
        cdf = np.cumsum(w / w.sum())
        return int(np.searchsorted(cdf, self.random(), side="right").clip(0, w.size - 1))


def _check_normalized(p: np.ndarray, axis: int = -1) -> None:
    s = p.sum(axis=axis)
    if not np.allclose(s, 1.0, rtol=0.0, atol=1e-9):
        worst = float(np.abs(np.asarray(s) - 1.0).max())
        raise SamplingError(f"log-probs do not normalize: |sum - 1| up to {worst:.3e}")


def sample_categorical(log_probs, rng: Rng) -> int:
    """Draw one index from a log-probability vector; validates normalization."""
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs, dtype=np.float64)
    if lp.ndim != 1:
        raise SamplingError(f"sample_categorical expects a 1-d vector, got shape {lp.shape}")
    p = np.exp(lp)
    _check_normalized(p)
    cdf = np.cumsum(p)
    return int(np.searchsorted(cdf, rng.random(), side="right").clip(0, lp.size - 1))


def sample_categorical_rows(log_probs, rng: Rng) -> np.ndarray:
    """Draw one index per row of a [n, V] log-probability matrix (one uniform per row)."""
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs, dtype=np.float64)
    if lp.ndim != 2:
        raise SamplingError(f"sample_categorical_rows expects [n, V], got shape {lp.shape}")
    p = np.exp(lp)
    _check_normalized(p, axis=-1)
    cdf = np.cumsum(p, axis=-1)
    u = rng.random(lp.shape[0])
    idx = (cdf <= u[:, None]).sum(axis=1)
    return idx.clip(0, lp.shape[1] - 1)
