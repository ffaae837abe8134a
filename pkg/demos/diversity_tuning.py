"""Before/after story: a biased RNG model, then adapters tuned to the uniform target.

Mirrors the headline experiment: the base model answers "{5}" most of the
time; fifty adapter steps against the uniform-over-1..10 target restore the
missing outcomes without touching the base weights.
"""
import copy
import json

from dmtune.experiment import biased_corpus, data_path
from dmtune.lora import LoraConfig, attach_adapters
from dmtune.metrics import coverage, empirical, entropy, kl_to_target
from dmtune.model import ModelConfig, TransformerLM, pretrain, sample_many
from dmtune.numerics import Rng
from dmtune.objective import loss_floor
from dmtune.tasks import load_suite, task_target
from dmtune.training import TrainConfig, TrainPair, finetune

suite = load_suite(data_path("rng_uniform.tasks"))
spec = suite.task("rng_1_10")
target = task_target(spec)
prompt = spec.prompts[0]
profile = json.loads(data_path("bias_default.json").read_text())


def scoreboard(model, label):
    samples = sample_many(model, prompt, 1000, max_new_tokens=8, rng=Rng(99))
    dist = empirical(samples)
    kl = kl_to_target(model, prompt, target)
    print(f"{label:>9}:  kl={kl:7.4f}  entropy={entropy(dist):.3f}  "
          f"coverage={coverage(dist):2d}  invalid={dist.invalid_rate:.1%}")
    return dist


corpus = biased_corpus(suite, profile)
print(f"pretraining on {len(corpus)} biased pairs "
      f"(~{sum(1 for _, c in corpus if c == '{5}') / len(corpus):.0%} answer '{{5}}')...")
base = TransformerLM(ModelConfig(), Rng(0).substream("pretrain/init"))
pretrain(base, corpus, 1000, Rng(0).substream("pretrain/batches"), lr=3e-3)

print(f"\ntarget floor (entropy of uniform-10) = {loss_floor(target):.4f} nats\n")
before = scoreboard(base, "baseline")

tuned = copy.deepcopy(base)
lora = LoraConfig(rank=16, alpha=128.0)
attach_adapters(tuned, lora, Rng(1).substream("ft/init"))
cfg = TrainConfig(lr=4.5e-3, max_steps=50, early_stop="auto", lora=lora)
result = finetune(tuned, [TrainPair(spec.name, p, target) for p in spec.prompts],
                  cfg, Rng(1).substream("ft/batches"))
print(f"\n{result.steps} adapter steps: loss {result.losses[0]:.3f} -> "
      f"{result.final_loss:.3f}\n")
after = scoreboard(tuned, "tuned")

print("\nper-outcome sample counts (1000 draws):")
print("  outcome   baseline   tuned")
for s in target.strings:
    key = s.strip("{}")
    print(f"  {s:>6}   {before.counts.get(key, 0):8d}   {after.counts.get(key, 0):5d}")
