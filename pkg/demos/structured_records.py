"""Multi-field records: tune toward 210 balanced tuples, watch per-field spread.

The record task emits "{first} {year} {city}". The biased base mostly
produces one or two stock records; distribution-matching against a balanced
tuple set should widen every field at once.
"""
import copy
import json

from dmtune.experiment import biased_corpus, data_path, train_pairs
from dmtune.lora import LoraConfig, attach_adapters
from dmtune.metrics import coverage, field_distributions
from dmtune.model import ModelConfig, TransformerLM, pretrain, sample_many
from dmtune.numerics import Rng
from dmtune.tasks import load_suite, task_target
from dmtune.training import TrainConfig, finetune

suite = load_suite(data_path("records.tasks"))
spec = suite.task("records_id")
target = task_target(spec)
prompt = spec.prompts[0]
fields = spec.field_names()
print(f"target: {len(target)} balanced {'/'.join(fields)} tuples")

profile = json.loads(data_path("bias_default.json").read_text())
corpus = biased_corpus(suite, profile)
print(f"pretraining on {len(corpus)} pairs...")
base = TransformerLM(ModelConfig(), Rng(0).substream("pretrain/init"))
pretrain(base, corpus, 1000, Rng(0).substream("pretrain/batches"), lr=3e-3)


def field_table(model, label):
    samples = sample_many(model, prompt, 1000, max_new_tokens=26, rng=Rng(5))
    dists = field_distributions(samples, len(fields))
    print(f"\n{label} (1000 records, {dists[0].invalid} invalid):")
    rows = []
    for name, d in zip(fields, dists):
        modal_value, modal_n = max(d.counts.items(), key=lambda kv: kv[1])
        rows.append((coverage(d), modal_n / d.n_valid))
        print(f"  {name:>10}: coverage={coverage(d):3d}  "
              f"modal={modal_value!r} at {modal_n / d.n_valid:.1%}")
    return rows


before = field_table(base, "baseline")

tuned = copy.deepcopy(base)
lora = LoraConfig(rank=16, alpha=128.0)
attach_adapters(tuned, lora, Rng(1).substream("ft/init"))
finetune(tuned, train_pairs(suite),
         TrainConfig(lr=4.5e-3, max_steps=50, early_stop="auto", lora=lora),
         Rng(1).substream("ft/batches"))
after = field_table(tuned, "tuned")

print("\nfield-level change:")
for name, (c0, m0), (c1, m1) in zip(fields, before, after):
    print(f"  {name:>10}: coverage x{c1 / max(c0, 1):.1f}, modal {m0:.1%} -> {m1:.1%}")
