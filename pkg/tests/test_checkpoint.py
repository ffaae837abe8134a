"""Checkpoint round-trips are bit-identical; mismatched files refuse to load."""
import copy

import numpy as np
import pytest

from dmtune import numerics as nm
from dmtune.checkpoint import (
    CheckpointError, base_checksum,
    save_base, load_base, save_adapters, load_adapters,
)
from dmtune.lora import LoraConfig, attach_adapters
from dmtune.model import ModelConfig, TransformerLM, encode

from conftest import MINI_PROMPT


def probe_logits(model):
    """Last-position logits on a fixed prompt, as plain ndarray."""
    ids = np.array([encode(MINI_PROMPT)])
    with nm.no_grad():
        return model.full_logits(ids, last_only=True).data.copy()


# ---- base round-trip ----

def test_base_roundtrip_bitwise(mini_biased, tmp_path):
    path = tmp_path / "base.ckpt"
    save_base(path, mini_biased, meta={"steps": 200})
    loaded, meta = load_base(path)
    assert meta == {"steps": 200}
    assert loaded.config == mini_biased.config
    for name, tensor in mini_biased.params.items():
        assert np.array_equal(loaded.params[name].data, tensor.data), name
    assert np.array_equal(probe_logits(loaded), probe_logits(mini_biased))


def test_base_checksum_tracks_weights(mini_biased):
    ref = base_checksum(mini_biased)
    assert ref == base_checksum(mini_biased)  # stable
    other = copy.deepcopy(mini_biased)
    name = sorted(other.params)[0]
    other.params[name].data = other.params[name].data + 1e-12
    assert base_checksum(other) != ref


def test_fresh_model_roundtrip(tmp_path):
    model = TransformerLM(ModelConfig(), nm.Rng(3))
    path = tmp_path / "fresh.ckpt"
    save_base(path, model)
    loaded, meta = load_base(path)
    assert meta == {}
    assert base_checksum(loaded) == base_checksum(model)


# ---- adapter round-trip ----

def test_adapter_roundtrip_bitwise(mini_biased, tmp_path):
    tuned = copy.deepcopy(mini_biased)
    attach_adapters(tuned, LoraConfig(), nm.Rng(11))
    # give the adapters nonzero content so the round-trip is non-trivial
    for ad in tuned.adapters.values():
        ad.b.data = nm.Rng(12).normal(ad.b.data.shape, std=0.05)
    path = tmp_path / "adapters.ckpt"
    save_adapters(path, tuned, meta={"task": "probe"})

    fresh = copy.deepcopy(mini_biased)
    meta = load_adapters(path, fresh)
    assert meta == {"task": "probe"}
    assert sorted(fresh.adapters) == sorted(tuned.adapters)
    for name, ad in tuned.adapters.items():
        assert np.array_equal(fresh.adapters[name].a.data, ad.a.data)
        assert np.array_equal(fresh.adapters[name].b.data, ad.b.data)
    assert np.array_equal(probe_logits(fresh), probe_logits(tuned))


def test_adapters_refuse_foreign_base(mini_biased, tmp_path):
    tuned = copy.deepcopy(mini_biased)
    attach_adapters(tuned, LoraConfig(), nm.Rng(11))
    path = tmp_path / "adapters.ckpt"
    save_adapters(path, tuned)
    stranger = TransformerLM(ModelConfig(), nm.Rng(99))
    with pytest.raises(CheckpointError, match="different base"):
        load_adapters(path, stranger)


def test_save_adapters_requires_adapters(mini_biased, tmp_path):
    with pytest.raises(CheckpointError, match="no adapters"):
        save_adapters(tmp_path / "x.ckpt", mini_biased)


# ---- malformed files ----

def test_wrong_kind_rejected(mini_biased, tmp_path):
    base_path = tmp_path / "base.ckpt"
    save_base(base_path, mini_biased)
    with pytest.raises(CheckpointError, match="expected an adapter"):
        load_adapters(base_path, copy.deepcopy(mini_biased))

    tuned = copy.deepcopy(mini_biased)
    attach_adapters(tuned, LoraConfig(), nm.Rng(11))
    ad_path = tmp_path / "adapters.ckpt"
    save_adapters(ad_path, tuned)
    with pytest.raises(CheckpointError, match="expected a base"):
        load_base(ad_path)


def test_not_a_checkpoint(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"certainly not a checkpoint")
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_base(path)


def test_truncated_file(mini_biased, tmp_path):
    path = tmp_path / "base.ckpt"
    save_base(path, mini_biased)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError):
        load_base(path)


def test_trailing_bytes_rejected(mini_biased, tmp_path):
    path = tmp_path / "base.ckpt"
    save_base(path, mini_biased)
    path.write_bytes(path.read_bytes() + b"\x00" * 3)
    with pytest.raises(CheckpointError):
        load_base(path)


def test_payload_corruption_fails_checksum(mini_biased, tmp_path):
    path = tmp_path / "base.ckpt"
    save_base(path, mini_biased)
    raw = bytearray(path.read_bytes())
    raw[-5] ^= 0xFF  # flip bits inside the last tensor payload
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_base(path)


def test_unsupported_version(mini_biased, tmp_path):
    path = tmp_path / "base.ckpt"
    save_base(path, mini_biased)
    raw = bytearray(path.read_bytes())
    raw[8] = 9  # version field follows the 8-byte magic
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_base(path)
