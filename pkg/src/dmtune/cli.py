"""Command-line front end: pretrain, finetune, sample, eval, run, validate."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checkpoint import load_adapters, load_base, save_adapters, save_base
from .experiment import (Recipe, StageError, biased_corpus, data_path,
                         eval_instances, evaluate_instance, load_recipe,
                         run_experiment, train_pairs)
from .lora import LoraConfig, attach_adapters
from .metrics import write_reports
from .model import ModelConfig, TransformerLM, pretrain, sample_many
from .numerics import Rng
from .tasks import load_suite
from .training import TrainConfig, finetune

__all__ = ["main"]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)


def _load_model(base_path: str, adapters_path: str | None):
    model, _ = load_base(base_path)
    if adapters_path:
        load_adapters(adapters_path, model)
    return model


def _cmd_pretrain(args) -> int:
    suite = load_suite(data_path(args.suite))
    profile = json.loads(data_path(args.bias).read_text())
    corpus = biased_corpus(suite, profile)
    seed_root = Rng(args.seed)
    model = TransformerLM(ModelConfig(), seed_root.substream("pretrain/init"))
    trace: list[float] = []
    pretrain(model, corpus, args.steps, seed_root.substream("pretrain/batches"),
             lr=args.lr, trace=trace)
    save_base(args.out, model, meta={"steps": args.steps, "seed": args.seed})
    print(f"pretrained {args.steps} steps on {len(corpus)} pairs, "
          f"final loss {trace[-1]:.4f} -> {args.out}")
    return 0


def _cmd_finetune(args) -> int:
    model, _ = load_base(args.base)
    suite = load_suite(data_path(args.suite))
    pairs = train_pairs(suite)
    if not pairs:
        print("suite has no trainable pairs", file=sys.stderr)
        return 1
    seed_root = Rng(args.seed)
    lora = LoraConfig(rank=args.rank, alpha=args.alpha)
    attach_adapters(model, lora, seed_root.substream("finetune/init"))
    cfg = TrainConfig(lr=args.lr, max_steps=args.max_steps, seed=args.seed,
                      early_stop=args.early_stop, lora=lora)
    result = finetune(model, pairs, cfg,
                      rng=seed_root.substream("finetune/batches"))
    save_adapters(args.out, model,
                  meta={"steps": result.steps, "final_loss": result.final_loss,
                        "seed": args.seed})
    tag = " (early stop)" if result.stopped_early else ""
    print(f"tuned {result.steps} steps{tag}, loss {result.losses[0]:.4f} -> "
          f"{result.final_loss:.4f} -> {args.out}")
    return 0


def _cmd_sample(args) -> int:
    model = _load_model(args.base, args.adapters)
    rng = Rng(args.seed).substream("sample")
    for line in sample_many(model, args.prompt, args.n,
                            temperature=args.temperature,
                            max_new_tokens=args.max_new_tokens, rng=rng):
        print(line)
    return 0


def _cmd_eval(args) -> int:
    model = _load_model(args.base, args.adapters)
    suite = load_suite(data_path(args.suite))
    seed_root = Rng(args.seed)
    reports = []
    for k, inst in enumerate(eval_instances(suite)):
        rng = seed_root.substream(f"eval/{inst.task.name}/{k}")
        report, _, _ = evaluate_instance(model, inst, rng, n=args.n,
                                         temperature=args.temperature)
        reports.append(report)
        print(report.json_line())
    if args.out:
        write_reports(args.out, reports)
    return 0


def _cmd_run(args) -> int:
    recipe = load_recipe(data_path(args.config))
    if args.seed is not None:
        recipe.seed = args.seed
    try:
        outdir = run_experiment(recipe, args.outdir)
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    print(f"run {recipe.name!r} complete -> {outdir}")
    return 0


def _cmd_validate(args) -> int:
    status = 0
    for path in args.files:
        try:
            suite = load_suite(data_path(path))
        except Exception as exc:
            print(f"{path}: INVALID: {exc}")
            status = 1
        else:
            print(f"{path}: ok ({len(suite.tasks)} task(s))")
    return status


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dmtune",
        description="Distribution-matching fine-tuning workbench.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train a base model on a biased corpus")
    p.add_argument("--suite", required=True)
    p.add_argument("--bias", default="bias_default.json")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("finetune", help="tune adapters toward suite targets")
    p.add_argument("--base", required=True)
    p.add_argument("--suite", required=True)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--max-steps", type=int, default=50)
    p.add_argument("--early-stop", default="auto",
                   choices=["auto", "always", "never"])
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--alpha", type=float, default=4.0)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("sample", help="draw continuations for one prompt")
    p.add_argument("--base", required=True)
    p.add_argument("--adapters")
    p.add_argument("--prompt", required=True)
    p.add_argument("-n", type=int, default=10)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--max-new-tokens", type=int, default=32)
    _add_common(p)
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("eval", help="sample and score every eval instance")
    p.add_argument("--base", required=True)
    p.add_argument("--adapters")
    p.add_argument("--suite", required=True)
    p.add_argument("-n", type=int, default=None,
                   help="override per-task sample count")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--out", help="also write reports to this JSONL path")
    _add_common(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("run", help="execute a recipe end to end")
    p.add_argument("--config", required=True)
    p.add_argument("--outdir", required=True)
    p.add_argument("--seed", type=int, default=None,
                   help="override the recipe seed")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("validate", help="parse and check task files")
    p.add_argument("files", nargs="+")
    p.set_defaults(func=_cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
