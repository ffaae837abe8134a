"""Pretrain the character LM on a skewed corpus and watch it memorize the bias."""
import numpy as np

from dmtune.metrics import empirical
from dmtune.model import ModelConfig, TransformerLM, pretrain, sample_many
from dmtune.numerics import Rng

# 65% of the corpus answers "{5}"; the rest splits 20/10/5
PROMPT = "Pick a random number from 1 to 10. Answer like {N}:"
corpus = (13 * [(PROMPT, "{5}")] + 4 * [(PROMPT, "{3}")]
          + 2 * [(PROMPT, "{7}")] + 1 * [(PROMPT, "{2}")])

model = TransformerLM(ModelConfig(), Rng(0).substream("init"))
trace: list[float] = []
pretrain(model, corpus, 300, Rng(0).substream("batches"), lr=3e-3, trace=trace)

print("loss trace (every 50 steps):")
for i in range(0, len(trace), 50):
    print(f"  step {i:3d}  {trace[i]:.4f}")
print(f"  final     {trace[-1]:.4f}")

samples = sample_many(model, PROMPT, 200, max_new_tokens=8, rng=Rng(1))
dist = empirical(samples)
print(f"\n200 samples: {dist.invalid} invalid, counts sorted by frequency:")
for key, n in sorted(dist.counts.items(), key=lambda kv: -kv[1]):
    print(f"  {{{key}}}  {n:3d}  {'#' * (n // 4)}")
print("\nthe corpus ratio 13/4/2/1 should be roughly visible above")
