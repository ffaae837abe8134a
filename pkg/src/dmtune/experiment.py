"""Recipe-driven pipeline: pretrain a biased base, tune adapters, sample, report.

A recipe is a JSON file naming a task suite, a bias profile for pretraining,
and per-stage hyperparameters. Stages write their artifacts as they finish,
so a failing stage leaves everything before it on disk. Every random draw
comes from a named substream of the single recipe seed, recorded in the
manifest; reruns with the same seed are bit-identical.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

from .checkpoint import save_adapters, save_base
from .lora import LoraConfig, attach_adapters
from .metrics import (MetricReport, empirical, field_distributions,
                      kl_to_target, write_plot_csv, write_reports)
from .model import ModelConfig, TransformerLM, pretrain, sample_many
from .numerics import Rng
from .tasks import (SuiteConfig, TaskSpec, Use, leave_one_out, load_suite,
                    task_target)
from .training import TrainConfig, TrainPair, finetune

__all__ = [
    "StageError", "Recipe", "load_recipe", "data_path",
    "biased_corpus", "train_pairs", "eval_instances", "evaluate_instance",
    "run_experiment",
]

_DATA = Path(__file__).parent / "data"


class StageError(RuntimeError):
    """A pipeline stage failed; artifacts written before it survive."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def data_path(name: str) -> Path:
    """Resolve a bundled data file; explicit paths pass through untouched."""
    p = Path(name)
    if p.exists():
        return p
    bundled = _DATA / name
    if bundled.exists():
        return bundled
    raise FileNotFoundError(f"no such data file: {name}")


# ---- Recipe ----

@dataclass
class Recipe:
    """Everything one experiment run depends on, seed included."""

    name: str
    suite: str
    seed: int = 0
    mode: str = "standard"                  # standard | leave_one_out
    bias: str = "bias_default.json"
    model: dict = dc_field(default_factory=dict)
    pretrain: dict = dc_field(default_factory=dict)
    finetune: dict = dc_field(default_factory=dict)
    eval: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("standard", "leave_one_out"):
            raise ValueError(f"unknown mode {self.mode!r}")

    def as_dict(self) -> dict:
        return {"name": self.name, "suite": self.suite, "seed": self.seed,
                "mode": self.mode, "bias": self.bias, "model": self.model,
                "pretrain": self.pretrain, "finetune": self.finetune,
                "eval": self.eval}


def load_recipe(path) -> Recipe:
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: recipe must be a JSON object")
    try:
        return Recipe(**raw)
    except TypeError as exc:
        raise ValueError(f"{path}: {exc}") from exc


def _train_config(spec: dict) -> TrainConfig:
    spec = dict(spec)
    lora = spec.pop("lora", {})
    if isinstance(lora, dict):
        lora = LoraConfig(**{k: tuple(v) if k == "targets" else v
                             for k, v in lora.items()})
    return TrainConfig(lora=lora, **spec)


# ---- Corpus and instance assembly ----

def _render(template: str, bound: dict[str, int]) -> str:
    for name, value in bound.items():
        template = template.replace(f"${name}", str(value))
    return template


def _use_prompts(spec: TaskSpec, use: Use) -> list[tuple[str, dict[str, int]]]:
    """Rendered (prompt, bindings) rows for one use directive."""
    bound = dict(use.bindings)
    templates = spec.prompts if use.prompt is None else (spec.prompts[use.prompt - 1],)
    return [(_render(t, bound), bound) for t in templates]


def _uses(suite: SuiteConfig, role: str) -> list[Use]:
    """Use directives for a role; default to every task, every prompt."""
    uses = suite.uses_for(role)
    if uses:
        return uses
    return [Use(task=t.name, role=role) for t in suite.tasks]


def biased_corpus(suite: SuiteConfig, profile: dict) -> list[tuple[str, str]]:
    """Pretraining pairs: per-task biased completions plus shared filler text.

    The profile maps task name -> [completion, count] rows; "$slot" in a
    completion picks up the use directive's binding. extra_pairs stand in for
    general pretraining text (they keep rare characters trainable without
    touching any task's output format).
    """
    per_task: dict = profile.get("tasks", {})
    rows: list[tuple[str, str]] = []
    for use in _uses(suite, "pretrain"):
        spec = suite.task(use.task)
        counts = per_task.get(spec.name)
        if counts is None:
            continue
        for prompt, bound in _use_prompts(spec, use):
            for completion, count in counts:
                text = _render(completion, bound)
                rows.extend((prompt, text) for _ in range(int(count)))
    extras = profile.get("extra_pairs", [])
    copies = int(profile.get("extra_copies", 1))
    rows.extend((p, c) for p, c in extras for _ in range(copies))
    if not rows:
        raise ValueError("bias profile produced an empty corpus")
    return rows


def train_pairs(suite: SuiteConfig, specs: list[TaskSpec] | None = None,
                rng: Rng | None = None) -> list[TrainPair]:
    """Concrete fine-tuning pairs from train-role uses, open tasks skipped."""
    allowed = {s.name for s in specs} if specs is not None else None
    pairs: list[TrainPair] = []
    for use in _uses(suite, "train"):
        spec = suite.task(use.task)
        if allowed is not None and spec.name not in allowed:
            continue
        if not spec.has_ground_truth:
            continue
        for prompt, bound in _use_prompts(spec, use):
            target = task_target(spec, bound or None)
            pairs.append(TrainPair(spec.name, prompt, target))
    return pairs


@dataclass(frozen=True)
class EvalInstance:
    """One (task, rendered prompt) evaluation point."""

    task: TaskSpec
    prompt: str
    bindings: tuple[tuple[str, int], ...] = ()

    def target(self):
        return task_target(self.task, dict(self.bindings) or None)


def eval_instances(suite: SuiteConfig, specs: list[TaskSpec] | None = None
                   ) -> list[EvalInstance]:
    allowed = {s.name for s in specs} if specs is not None else None
    out: list[EvalInstance] = []
    for use in _uses(suite, "eval"):
        spec = suite.task(use.task)
        if allowed is not None and spec.name not in allowed:
            continue
        for prompt, bound in _use_prompts(spec, use):
            out.append(EvalInstance(spec, prompt, tuple(sorted(bound.items()))))
    return out


# ---- Evaluation ----

def _token_budget(target, override: int | None) -> int:
    if override:
        return override
    if target is None:
        return 32
    return max(len(seq) for seq in target.encoded()) + 4  # slack for stray text


def evaluate_instance(model: TransformerLM, inst: EvalInstance, rng: Rng,
                      n: int | None = None, temperature: float = 1.0,
                      max_new_tokens: int | None = None, with_kl: bool = True):
    """Sample an instance and reduce to (MetricReport, EmpiricalDistribution,
    raw samples)."""
    spec = inst.task
    target = inst.target()
    samples = sample_many(model, inst.prompt, n or spec.n_eval,
                          temperature=temperature,
                          max_new_tokens=_token_budget(target, max_new_tokens),
                          rng=rng)
    kl = None
    if with_kl and target is not None:
        kl = kl_to_target(model, inst.prompt, target)
    report = MetricReport.from_samples(spec.name, inst.prompt, samples,
                                       fields=spec.parser_fields,
                                       fold_case=spec.fold_case, kl=kl)
    dist = empirical(samples, spec.parser_fields, spec.fold_case)
    return report, dist, samples


def _eval_stage(model, instances, outdir: Path, tag: str, seed_root: Rng,
                cfg: dict) -> list[MetricReport]:
    plots = outdir / "plots"
    plots.mkdir(exist_ok=True)
    reports = []
    for k, inst in enumerate(instances):
        rng = seed_root.substream(f"eval/{tag}/{inst.task.name}/{k}")
        report, dist, samples = evaluate_instance(
            model, inst, rng, n=cfg.get("n"),
            temperature=cfg.get("temperature", 1.0),
            max_new_tokens=cfg.get("max_new_tokens"))
        reports.append(report)
        write_plot_csv(plots / f"{tag}_{inst.task.name}_{k}.csv", dist)
        if inst.task.parser_fields:
            per_field = field_distributions(samples, inst.task.parser_fields,
                                            inst.task.fold_case)
            for fname, fdist in zip(inst.task.field_names(), per_field):
                write_plot_csv(plots / f"{tag}_{inst.task.name}_{k}_{fname}.csv",
                               fdist)
    write_reports(outdir / f"{tag}_reports.jsonl", reports)
    return reports


# ---- Pipeline ----

def _write_trace(path: Path, rows: list[float]) -> None:
    path.write_text("step,loss\n" + "".join(
        f"{i},{v!r}\n" for i, v in enumerate(rows)))


def _finetune_stage(base, pairs, cfg: TrainConfig, seed_root: Rng, outdir: Path,
                    tag: str):
    """Fresh adapters on the shared base; returns the tuned model."""
    model = copy.deepcopy(base)
    attach_adapters(model, cfg.lora, seed_root.substream(f"finetune/{tag}/init"))
    result = finetune(model, pairs, cfg,
                      rng=seed_root.substream(f"finetune/{tag}/batches"))
    save_adapters(outdir / "adapters.ckpt", model,
                  meta={"steps": result.steps, "final_loss": result.final_loss,
                        "stopped_early": result.stopped_early})
    _write_trace(outdir / "finetune_trace.csv", result.losses)
    return model, result


def run_experiment(recipe: Recipe, outdir) -> Path:
    """Execute the recipe stages; returns the report directory."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    seed_root = Rng(recipe.seed)
    stages_done: list[str] = []

    def fail(stage: str, exc: Exception):
        raise StageError(stage, exc) from exc

    # -- load inputs --
    try:
        suite = load_suite(data_path(recipe.suite))
        profile = json.loads(data_path(recipe.bias).read_text())
        model_cfg = ModelConfig(**recipe.model)
        ft_cfg = _train_config(recipe.finetune)
    except Exception as exc:
        fail("load", exc)

    # -- pretrain --
    try:
        corpus = biased_corpus(suite, profile)
        base = TransformerLM(model_cfg, seed_root.substream("pretrain/init"))
        trace: list[float] = []
        pcfg = recipe.pretrain
        pretrain(base, corpus, int(pcfg.get("steps", 300)),
                 seed_root.substream("pretrain/batches"),
                 lr=float(pcfg.get("lr", 3e-3)),
                 batch_size=int(pcfg.get("batch_size", 32)),
                 trace=trace)
        save_base(outdir / "base.ckpt", base,
                  meta={"steps": len(trace), "corpus_pairs": len(corpus)})
        _write_trace(outdir / "pretrain_trace.csv", trace)
    except StageError:
        raise
    except Exception as exc:
        fail("pretrain", exc)
    stages_done.append("pretrain")

    # -- per-mode fine-tune + eval --
    summary: dict = {}
    if recipe.mode == "standard":
        instances = eval_instances(suite)
        try:
            _eval_stage(base, instances, outdir, "baseline", seed_root, recipe.eval)
        except Exception as exc:
            fail("baseline_eval", exc)
        stages_done.append("baseline_eval")
        try:
            pairs = train_pairs(suite)
            tuned, _ = _finetune_stage(base, pairs, ft_cfg, seed_root, outdir, "main")
        except StageError:
            raise
        except Exception as exc:
            fail("finetune", exc)
        stages_done.append("finetune")
        try:
            _eval_stage(tuned, instances, outdir, "tuned", seed_root, recipe.eval)
        except Exception as exc:
            fail("tuned_eval", exc)
        stages_done.append("tuned_eval")
    else:
        # leave-one-out: one ID run over all tasks, one OOD run per hold-out
        try:
            summary["holdouts"] = _run_leave_one_out(
                base, suite, ft_cfg, seed_root, outdir, recipe.eval)
        except StageError:
            raise
        except Exception as exc:
            fail("leave_one_out", exc)
        stages_done.append("leave_one_out")

    # -- manifest --
    try:
        manifest = {
            "format": 1,
            "recipe": recipe.as_dict(),
            "model_config": recipe.model,
            "train_config": {
                "lr": ft_cfg.lr, "batch_size": ft_cfg.batch_size,
                "max_steps": ft_cfg.max_steps,
                "early_stop": ft_cfg.early_stop,
                "early_stop_ratio": ft_cfg.early_stop_ratio,
                "weight_decay": ft_cfg.weight_decay,
                "lora": {"rank": ft_cfg.lora.rank, "alpha": ft_cfg.lora.alpha,
                         "targets": list(ft_cfg.lora.targets)},
            },
            "seed": recipe.seed,
            "seed_streams": "all Rng draws derive from substreams of seed "
                            "named pretrain/*, finetune/<tag>/*, eval/<tag>/*",
            "stages": stages_done + ["report"],
            "summary": summary,
        }
        (outdir / "manifest.json").write_text(
            json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    except Exception as exc:
        fail("report", exc)
    return outdir


def _run_leave_one_out(base, suite, ft_cfg, seed_root, outdir: Path,
                       eval_cfg: dict) -> list[dict]:
    """ID run on the full suite, then an OOD run per held-out task."""
    rows: list[dict] = []
    id_dir = outdir / "id"
    id_dir.mkdir(exist_ok=True)
    id_model, _ = _finetune_stage(base, train_pairs(suite), ft_cfg, seed_root,
                                  id_dir, "id")
    id_reports = {}
    for r in _eval_stage(id_model, eval_instances(suite), id_dir, "tuned",
                         seed_root, eval_cfg):
        id_reports.setdefault(r.task, r)
    for name in suite.names():
        held_dir = outdir / f"holdout_{name}"
        held_dir.mkdir(exist_ok=True)
        train_specs, eval_specs = leave_one_out(suite, name)
        instances = eval_instances(suite, eval_specs)
        base_reports = _eval_stage(base, instances, held_dir, "baseline",
                                   seed_root, eval_cfg)
        ood_model, _ = _finetune_stage(base, train_pairs(suite, train_specs),
                                       ft_cfg, seed_root, held_dir, name)
        ood_reports = _eval_stage(ood_model, instances, held_dir, "tuned",
                                  seed_root, eval_cfg)
        id_r = id_reports.get(name)
        rows.append({
            "task": name,
            "baseline_entropy": base_reports[0].entropy,
            "ood_entropy": ood_reports[0].entropy,
            "id_entropy": id_r.entropy if id_r else None,
        })
    return rows
