"""Recipe pipeline: corpus assembly, instance wiring, artifacts, determinism."""
import json
import math
from pathlib import Path

import pytest

from dmtune.experiment import (EvalInstance, Recipe, StageError, biased_corpus,
                               data_path, eval_instances, evaluate_instance,
                               load_recipe, run_experiment, train_pairs,
                               _token_budget)
from dmtune.numerics import Rng
from dmtune.objective import TargetDistribution
from dmtune.tasks import load_suite

from helpers import completion_table

# ---- tiny suite/profile fixtures ----

TINY_SUITE = """\
taskfile 1

task coin
  prompt Flip a coin; answer {X}:
  target 1/2 {H}
  target 1/2 {T}
end

task die
  prompt Roll a die; answer {X}:
  target 1/6 {1}
  target 1/6 {2}
  target 1/6 {3}
  target 1/6 {4}
  target 1/6 {5}
  target 1/6 {6}
end
"""

TINY_BIAS = {
    "tasks": {"coin": [["{H}", 4], ["{T}", 1]], "die": [["{3}", 5]]},
    "extra_pairs": [["Letters", "H T h t"]],
    "extra_copies": 2,
}


@pytest.fixture()
def tiny_suite(tmp_path):
    path = tmp_path / "tiny.tasks"
    path.write_text(TINY_SUITE)
    return load_suite(path), path


@pytest.fixture()
def tiny_recipe(tmp_path, tiny_suite):
    _, suite_path = tiny_suite
    bias_path = tmp_path / "bias.json"
    bias_path.write_text(json.dumps(TINY_BIAS))
    return Recipe(
        name="tiny", suite=str(suite_path), bias=str(bias_path), seed=5,
        model={"n_layers": 1, "n_heads": 2, "d_model": 32, "d_ff": 64,
               "max_context": 64},
        pretrain={"steps": 12, "lr": 3e-3},
        finetune={"lr": 5e-3, "max_steps": 3, "early_stop": "never",
                  "lora": {"rank": 2, "alpha": 4.0}},
        eval={"n": 40},
    )


# ---- data_path ----

def test_data_path_bundled_and_explicit(tmp_path):
    assert data_path("rng_uniform.tasks").exists()
    mine = tmp_path / "x.tasks"
    mine.write_text("taskfile 1\n")
    assert data_path(str(mine)) == mine
    with pytest.raises(FileNotFoundError, match="no such data file"):
        data_path("missing_file.tasks")


# ---- recipes ----

def test_load_recipe_roundtrip(tmp_path, tiny_recipe):
    path = tmp_path / "r.json"
    path.write_text(json.dumps(tiny_recipe.as_dict()))
    again = load_recipe(path)
    assert again == tiny_recipe


def test_load_recipe_rejects_junk(tmp_path):
    path = tmp_path / "r.json"
    path.write_text(json.dumps(["not", "an", "object"]))
    with pytest.raises(ValueError, match="JSON object"):
        load_recipe(path)
    path.write_text(json.dumps({"name": "x", "suite": "s", "bogus_key": 1}))
    with pytest.raises(ValueError, match="bogus_key"):
        load_recipe(path)


def test_recipe_rejects_unknown_mode():
    with pytest.raises(ValueError, match="unknown mode"):
        Recipe(name="x", suite="s", mode="sideways")


def test_bundled_recipes_load():
    for name in ("rng_uniform", "range_generalization", "leave_one_out",
                 "records_id"):
        recipe = load_recipe(data_path(f"recipes/{name}.json"))
        assert load_suite(data_path(recipe.suite)).tasks
        json.loads(data_path(recipe.bias).read_text())


# ---- corpus assembly ----

def test_biased_corpus_counts(tiny_suite):
    suite, _ = tiny_suite
    rows = biased_corpus(suite, TINY_BIAS)
    # no explicit pretrain uses: every task, every prompt
    coin_rows = [r for r in rows if r[0].startswith("Flip")]
    assert len(coin_rows) == 5 and coin_rows.count(("Flip a coin; answer {X}:", "{H}")) == 4
    assert rows.count(("Letters", "H T h t")) == 2
    assert len(rows) == 5 + 5 + 2


def test_biased_corpus_renders_slots():
    suite = load_suite(data_path("rng_ranges.tasks"))
    rows = biased_corpus(suite, {"tasks": {"rng_range": [["{$high}", 1]]}})
    # five pretrain uses, each one prompt with its own bindings
    assert len(rows) == 5
    prompts = [p for p, _ in rows]
    assert all("$" not in p for p in prompts)
    assert ("Pick a random number between 1 and 10. Answer like {N}:", "{10}") in rows
    assert any(c == "{45}" for _, c in rows)


def test_biased_corpus_empty_profile(tiny_suite):
    suite, _ = tiny_suite
    with pytest.raises(ValueError, match="empty corpus"):
        biased_corpus(suite, {"tasks": {"unrelated": [["{1}", 3]]}})


# ---- train pairs and eval instances ----

def test_train_pairs_renders_uses():
    suite = load_suite(data_path("rng_ranges.tasks"))
    pairs = train_pairs(suite)
    assert [len(p.dist) for p in pairs] == [10, 100]
    assert all(p.prompt.startswith("Pick a random number between 1 and")
               for p in pairs)


def test_train_pairs_spec_filter(tiny_suite):
    suite, _ = tiny_suite
    assert {p.task for p in train_pairs(suite)} == {"coin", "die"}
    only_coin = train_pairs(suite, [suite.task("coin")])
    assert {p.task for p in only_coin} == {"coin"}
    assert train_pairs(suite, []) == []


def test_eval_instances_held_out_instantiation():
    suite = load_suite(data_path("rng_ranges.tasks"))
    insts = eval_instances(suite)
    assert len(insts) == 1
    inst = insts[0]
    assert "[1, 45]" in inst.prompt and "$" not in inst.prompt
    assert dict(inst.bindings) == {"low": 1, "high": 45}
    assert len(inst.target()) == 45


def test_token_budget():
    assert _token_budget(None, None) == 32
    assert _token_budget(None, 7) == 7
    dist = TargetDistribution.uniform(["{1}", "{10}"])
    # longest target "{10}" is 4 chars + EOS, plus 4 slack
    assert _token_budget(dist, None) == 9


# ---- evaluate_instance against an exactly known model ----

def test_evaluate_instance_reports_exact_kl():
    suite = load_suite(data_path("rng_uniform.tasks"))
    inst = eval_instances(suite)[0]
    weights = [(s, (i + 1) / 55.0)
               for i, s in enumerate(inst.target().strings)]
    lm = completion_table(inst.prompt, weights)
    report, dist, samples = evaluate_instance(lm, inst, Rng(3), n=500)
    assert report.n_samples == 500 and len(samples) == 500
    assert report.invalid_rate == 0.0
    assert dist.n_valid == 500
    expect_kl = sum(0.1 * math.log(0.1 / w) for _, w in weights)
    assert abs(report.kl - expect_kl) < 1e-9
    assert 0 < report.entropy <= math.log(10) + 1e-12


# ---- full pipeline, standard mode ----

def test_run_experiment_standard_artifacts(tmp_path, tiny_recipe):
    outdir = run_experiment(tiny_recipe, tmp_path / "run")
    for name in ("base.ckpt", "pretrain_trace.csv", "adapters.ckpt",
                 "finetune_trace.csv", "baseline_reports.jsonl",
                 "tuned_reports.jsonl", "manifest.json"):
        assert (outdir / name).exists(), name

    trace = (outdir / "pretrain_trace.csv").read_text().splitlines()
    assert trace[0] == "step,loss" and len(trace) == 13

    manifest = json.loads((outdir / "manifest.json").read_text())
    assert manifest["format"] == 1
    assert manifest["stages"] == ["pretrain", "baseline_eval", "finetune",
                                  "tuned_eval", "report"]
    assert manifest["recipe"]["seed"] == 5
    assert manifest["train_config"]["lora"]["rank"] == 2

    # one report per eval instance (coin and die, one prompt each)
    lines = (outdir / "tuned_reports.jsonl").read_text().splitlines()
    tasks = [json.loads(l)["task"] for l in lines]
    assert tasks == ["coin", "die"]
    for line in lines:
        row = json.loads(line)
        assert row["n_samples"] == 40 and row["kl"] is not None

    plots = {p.name for p in (outdir / "plots").iterdir()}
    assert {"baseline_coin_0.csv", "baseline_die_1.csv",
            "tuned_coin_0.csv", "tuned_die_1.csv"} <= plots


def test_run_experiment_rerun_is_bit_identical(tmp_path, tiny_recipe):
    out1 = run_experiment(tiny_recipe, tmp_path / "a")
    out2 = run_experiment(tiny_recipe, tmp_path / "b")
    for name in ("base.ckpt", "adapters.ckpt", "manifest.json",
                 "tuned_reports.jsonl", "pretrain_trace.csv",
                 "finetune_trace.csv"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes(), name


def test_run_experiment_seed_changes_outputs(tmp_path, tiny_recipe):
    out1 = run_experiment(tiny_recipe, tmp_path / "a")
    tiny_recipe.seed = 6
    out2 = run_experiment(tiny_recipe, tmp_path / "b")
    assert ((out1 / "base.ckpt").read_bytes()
            != (out2 / "base.ckpt").read_bytes())


# ---- failure carries the stage name, earlier artifacts survive ----

def test_run_experiment_load_failure(tmp_path, tiny_recipe):
    tiny_recipe.suite = "no_such_suite.tasks"
    with pytest.raises(StageError, match="stage 'load'") as err:
        run_experiment(tiny_recipe, tmp_path / "run")
    assert err.value.stage == "load"


def test_run_experiment_pretrain_failure_keeps_dir(tmp_path, tiny_recipe):
    bias_path = tmp_path / "empty_bias.json"
    bias_path.write_text(json.dumps({"tasks": {"unrelated": [["{1}", 1]]}}))
    tiny_recipe.bias = str(bias_path)
    with pytest.raises(StageError, match="stage 'pretrain'"):
        run_experiment(tiny_recipe, tmp_path / "run")
    assert (tmp_path / "run").is_dir()
    assert not (tmp_path / "run" / "base.ckpt").exists()


def test_run_experiment_finetune_failure_keeps_baseline(tmp_path, tiny_recipe):
    tiny_recipe.finetune = {"lr": 5e-3, "max_steps": 3,
                            "lora": {"rank": 2, "alpha": 4.0,
                                     "targets": ["no_such_matrix"]}}
    with pytest.raises(StageError, match="stage 'finetune'"):
        run_experiment(tiny_recipe, tmp_path / "run")
    assert (tmp_path / "run" / "base.ckpt").exists()
    assert (tmp_path / "run" / "baseline_reports.jsonl").exists()
    assert not (tmp_path / "run" / "adapters.ckpt").exists()


# ---- leave-one-out mode ----

def test_run_experiment_leave_one_out(tmp_path, tiny_recipe):
    tiny_recipe.mode = "leave_one_out"
    outdir = run_experiment(tiny_recipe, tmp_path / "loo")

    assert (outdir / "id" / "adapters.ckpt").exists()
    assert (outdir / "id" / "tuned_reports.jsonl").exists()
    for name in ("coin", "die"):
        held = outdir / f"holdout_{name}"
        assert (held / "baseline_reports.jsonl").exists()
        assert (held / "tuned_reports.jsonl").exists()
        assert (held / "adapters.ckpt").exists()

    manifest = json.loads((outdir / "manifest.json").read_text())
    assert manifest["stages"] == ["pretrain", "leave_one_out", "report"]
    rows = manifest["summary"]["holdouts"]
    assert [r["task"] for r in rows] == ["coin", "die"]
    # entropy is None when every sample failed to parse (12-step base model)
    for row in rows:
        for key in ("baseline_entropy", "ood_entropy", "id_entropy"):
            assert key in row and (row[key] is None or isinstance(row[key], float))
