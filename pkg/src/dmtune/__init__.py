"""Distribution-matching fine-tuning workbench: tiny LM, adapters, metrics."""

from .numerics import NumericError, Rng, ShapeError, Tensor, backward, no_grad
from .model import (EncodingError, LengthError, ModelConfig, TransformerLM,
                    decode, encode, pretrain, sample, sample_many,
                    sequence_log_prob, sequence_log_probs)
from .lora import AdapterError, LoraConfig, attach_adapters, detach_adapters
from .objective import (DistributionError, TargetDistribution, dm_loss,
                        loss_floor, validate_prefix_free)
from .optim import AdamW
from .metrics import (EmpiricalDistribution, MetricError, MetricReport,
                      coverage, empirical, entropy, field_distributions,
                      kl_to_target, parse_braced)
from .tasks import (SchemaError, SuiteConfig, TaskSpec, balanced_tuples,
                    instantiate, leave_one_out, load_suite, record_task,
                    save_suite, task_target)
from .checkpoint import (CheckpointError, load_adapters, load_base,
                         save_adapters, save_base)
from .training import (FinetuneError, FinetuneResult, TrainConfig, TrainPair,
                       finetune)
from .experiment import Recipe, StageError, load_recipe, run_experiment

__version__ = "0.1.0"
