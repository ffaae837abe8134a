"""Shared fixtures; the pretrained mini model is session-scoped, do not mutate it."""
import pytest

from dmtune import numerics as nm
from dmtune.model import ModelConfig, TransformerLM, pretrain

# empirical mix 13/4/2/1 over 20 pairs
MINI_PROMPT = "N:"
MINI_WEIGHTS = {"{5}": 0.65, "{3}": 0.20, "{7}": 0.10, "{2}": 0.05}


@pytest.fixture(autouse=True)
def fresh_tape():
    nm.reset_tape()
    yield
    nm.reset_tape()


@pytest.fixture(scope="session")
def mini_biased():
    """Small LM pretrained on a skewed single-digit corpus behind prompt 'N:'."""
    model = TransformerLM(ModelConfig(), nm.Rng(7))
    corpus = (13 * [(MINI_PROMPT, "{5}")] + 4 * [(MINI_PROMPT, "{3}")]
              + 2 * [(MINI_PROMPT, "{7}")] + [(MINI_PROMPT, "{2}")])
    pretrain(model, corpus, 200, nm.Rng(8))
    return model
