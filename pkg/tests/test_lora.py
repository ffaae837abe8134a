"""Adapter attach/train/merge contracts over the frozen base model."""
import numpy as np
import pytest

from dmtune import numerics as nm
from dmtune.lora import AdapterError, LoraAdapter, LoraConfig, attach_adapters, detach_adapters
from dmtune.model import EOS_ID, ModelConfig, TransformerLM, encode, sequence_log_probs
from dmtune.numerics import Tensor


def base_model(seed: int = 0) -> TransformerLM:
    return TransformerLM(ModelConfig(), nm.Rng(seed))


def logits_of(model, ids):
    with nm.no_grad():
        return model.full_logits(ids).data.copy()


class TestConfig:
    def test_rejects_bad_values(self):
        with pytest.raises(AdapterError):
            LoraConfig(rank=0)
        with pytest.raises(AdapterError):
            LoraConfig(alpha=0.0)
        with pytest.raises(AdapterError):
            LoraConfig(targets=())

    def test_scale_is_alpha_over_rank(self):
        ad = LoraAdapter("w", Tensor(np.zeros((2, 3))), rank=2, alpha=8.0,
                         rng=nm.Rng(0), init_std=0.02)
        assert ad.scale == 4.0


class TestAttach:
    def test_fresh_adapters_leave_outputs_bit_identical(self):
        # b starts at zero, so the low-rank update is exactly the zero matrix
        m = base_model(1)
        ids = nm.Rng(2).integers(0, 95, (3, 11))
        before = logits_of(m, ids)
        attach_adapters(m, LoraConfig(), nm.Rng(3))
        after = logits_of(m, ids)
        assert np.array_equal(before, after)

    def test_base_is_frozen_and_only_adapters_train(self):
        m = base_model(4)
        trainable = attach_adapters(m, LoraConfig(), nm.Rng(5))
        assert all(not p.requires_grad for p in m.params.values())
        assert len(trainable) == 2 * len(m.adapters)
        assert set(map(id, m.trainable())) == set(map(id, trainable))

    def test_default_trainable_fraction_small(self):
        m = base_model(6)
        attach_adapters(m, LoraConfig(), nm.Rng(7))
        n_adapter = sum(ad.n_trainable() for ad in m.adapters.values())
        assert n_adapter == 9216
        assert n_adapter / m.n_params() < 0.10

    def test_suffix_targets_expand_across_layers(self):
        m = base_model(8)
        attach_adapters(m, LoraConfig(targets=("wq",)), nm.Rng(9))
        assert sorted(m.adapters) == ["layer0.wq", "layer1.wq"]

    def test_qualified_target_matches_one_matrix(self):
        m = base_model(8)
        attach_adapters(m, LoraConfig(targets=("layer1.wo",)), nm.Rng(9))
        assert list(m.adapters) == ["layer1.wo"]

    def test_unknown_target_rejected(self):
        with pytest.raises(AdapterError, match="nope"):
            attach_adapters(base_model(), LoraConfig(targets=("nope",)), nm.Rng(0))

    def test_vector_target_rejected(self):
        with pytest.raises(AdapterError):
            attach_adapters(base_model(), LoraConfig(targets=("b1",)), nm.Rng(0))

    def test_double_attach_rejected(self):
        m = base_model()
        attach_adapters(m, LoraConfig(), nm.Rng(0))
        with pytest.raises(AdapterError):
            attach_adapters(m, LoraConfig(), nm.Rng(1))


class TestTrainingPath:
    def test_gradients_reach_adapters_not_base(self):
        m = base_model(10)
        attach_adapters(m, LoraConfig(), nm.Rng(11))
        lp = sequence_log_probs(m, "Q:", [[*encode("{5}"), EOS_ID]])
        nm.backward(lp.sum() * -1.0)
        assert all(p.grad is None for p in m.params.values())
        for ad in m.adapters.values():
            assert ad.a.grad is not None and ad.b.grad is not None
            assert np.isfinite(ad.a.grad).all()
        nm.zero_grads(m.trainable())

    def test_base_weights_bitwise_constant_under_updates(self):
        from dmtune.optim import AdamW
        m = base_model(12)
        trainable = attach_adapters(m, LoraConfig(), nm.Rng(13))
        frozen = {k: v.data.copy() for k, v in m.params.items()}
        opt = AdamW(trainable, lr=0.05)
        for _ in range(3):
            lp = sequence_log_probs(m, "Q:", [[*encode("{5}"), EOS_ID]])
            nm.backward(lp.sum() * -1.0)
            opt.step()
            opt.zero_grad()
        assert all(np.array_equal(frozen[k], m.params[k].data) for k in frozen)
        assert any(np.abs(ad.b.data).max() > 0 for ad in m.adapters.values())


class TestMergeDetach:
    def test_rank_one_ones_oracle(self):
        ad = LoraAdapter("w", Tensor(np.zeros((2, 3))), rank=1, alpha=2.0,
                         rng=nm.Rng(0), init_std=0.02)
        ad.a.data[:] = 1.0
        ad.b.data[:] = 1.0
        assert np.array_equal(ad.effective().data, np.full((2, 3), 2.0))
        assert np.array_equal(ad.merge().data, np.full((2, 3), 2.0))

    def test_merged_model_matches_adapted_model(self):
        m = base_model(14)
        attach_adapters(m, LoraConfig(), nm.Rng(15))
        rng = nm.Rng(16)
        for ad in m.adapters.values():
            ad.b.data[:] = rng.normal(ad.b.data.shape, std=0.1)
        ids = nm.Rng(17).integers(0, 95, (2, 9))
        adapted = logits_of(m, ids)
        plain = base_model(14)  # same init seed -> identical base weights
        for name, ad in m.adapters.items():
            plain.params[name].data = ad.merge().data
        merged = logits_of(plain, ids)
        assert np.abs(adapted - merged).max() < 1e-10

    def test_detach_restores_base_behavior(self):
        m = base_model(18)
        ids = nm.Rng(19).integers(0, 95, (2, 8))
        before = logits_of(m, ids)
        attach_adapters(m, LoraConfig(), nm.Rng(20))
        for ad in m.adapters.values():
            ad.b.data[:] = 0.5
        detach_adapters(m)
        assert not m.adapters
        assert all(p.requires_grad for p in m.params.values())
        assert np.array_equal(before, logits_of(m, ids))
