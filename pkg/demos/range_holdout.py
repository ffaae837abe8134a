"""Generalization probe: tune on ranges 1..10 and 1..100, test a held-out range.

Fine-tuning sees one paraphrase and two ranges. The evaluation prompt is a
different paraphrase asking for 1..45, which the adapters never trained on;
whatever entropy gain shows up there is format/range generalization.
"""
import copy
import json

from dmtune.experiment import biased_corpus, data_path, eval_instances, train_pairs
from dmtune.lora import LoraConfig, attach_adapters
from dmtune.metrics import coverage, empirical, entropy
from dmtune.model import ModelConfig, TransformerLM, pretrain, sample_many
from dmtune.numerics import Rng
from dmtune.tasks import load_suite
from dmtune.training import TrainConfig, finetune

suite = load_suite(data_path("rng_ranges.tasks"))
profile = json.loads(data_path("bias_default.json").read_text())

corpus = biased_corpus(suite, profile)
print(f"pretraining on {len(corpus)} pairs across five paraphrases...")
base = TransformerLM(ModelConfig(), Rng(0).substream("pretrain/init"))
pretrain(base, corpus, 1000, Rng(0).substream("pretrain/batches"), lr=3e-3)

pairs = train_pairs(suite)
inst = eval_instances(suite)[0]
print("\ntrain prompts:")
for p in pairs:
    print(f"  [{len(p.dist):3d} outcomes] {p.prompt}")
print(f"held-out eval: [ 45 outcomes] {inst.prompt}")


def entropy_at(model, label):
    samples = sample_many(model, inst.prompt, 1000, max_new_tokens=9, rng=Rng(7))
    dist = empirical(samples)
    print(f"  {label:>8}: entropy={entropy(dist):.3f}  coverage={coverage(dist)}"
          f"  invalid={dist.invalid_rate:.1%}")
    return entropy(dist)


print("\nheld-out instantiation, 1000 samples each:")
h0 = entropy_at(base, "baseline")

tuned = copy.deepcopy(base)
lora = LoraConfig(rank=16, alpha=128.0)
attach_adapters(tuned, lora, Rng(1).substream("ft/init"))
finetune(tuned, pairs, TrainConfig(lr=4.5e-3, max_steps=50, early_stop="auto",
                                   lora=lora), Rng(1).substream("ft/batches"))
h1 = entropy_at(tuned, "tuned")
print(f"\nentropy gain on the never-tuned range: {h1 - h0:+.3f} nats")
