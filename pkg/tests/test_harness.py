import json
import math

import numpy as np
import pytest

from declvqa import declaration as decl
from declvqa import harness
from declvqa.dpt import Paradigm, Prediction
from declvqa.world import WorldConfig, build_dataset, subrng
from oracles import answer_question


def test_soft_accuracy_vote_thresholds():
    assert harness.soft_accuracy("red", {"red": 10}) == 1.0
    assert harness.soft_accuracy("red", {"red": 3}) == 1.0
    assert harness.soft_accuracy("red", {"red": 2, "blue": 8}) == pytest.approx(2 / 3)
    assert harness.soft_accuracy("red", {"blue": 10}) == 0.0
    assert harness.soft_accuracy("red", {}) == 0.0


def test_oracle_predictor_scores_perfectly(small_dataset):
    records = small_dataset.records["test"]
    preds = [
        Prediction(answer=answer_question(r.question, small_dataset.scenes[r.scene_id], small_dataset.cfg), p1={})
        for r in records
    ]
    results = harness.records_from_predictions(records, preds, "oracle")
    assert harness.exact_accuracy(results) == 1.0
    assert harness.mean_soft_accuracy(results) == 1.0


def test_uniform_random_predictor_sits_near_chance():
    ds = build_dataset(WorldConfig(seed=51), {"train": 2000})
    records = ds.records["train"]
    answers = ds.answers
    rng = subrng(51, 99)
    preds = [Prediction(answer=answers[int(rng.integers(len(answers)))], p1={}) for _ in records]
    results = harness.records_from_predictions(records, preds, "random")
    p = 1 / len(answers)
    sigma = math.sqrt(p * (1 - p) / len(records))
    assert abs(harness.exact_accuracy(results) - p) <= 3 * sigma


def test_result_records_roundtrip_jsonl(tmp_path, small_dataset):
    records = small_dataset.records["val"][:5]
    preds = [Prediction(answer=r.answer, p1={}) for r in records]
    results = harness.records_from_predictions(records, preds, "x", shots=4, split_index=2)
    path = tmp_path / "records.jsonl"
    with open(path, "w") as fh:
        for r in results:
            fh.write(r.to_json() + "\n")
    loaded = harness.load_records(path)
    assert loaded == results


def test_breakdown_groups_and_recombination(small_dataset):
    records = small_dataset.records["test"]
    rng = subrng(1, 2)
    preds = [
        Prediction(answer=r.answer if rng.random() < 0.7 else "wrong", p1={}) for r in records
    ]
    results = harness.records_from_predictions(records, preds, "x")
    for axis in ("qtype", "length_bucket"):
        table = harness.breakdown(results, axis)
        weighted = sum(row["n"] * row["accuracy"] for row in table)
        assert weighted / len(results) == pytest.approx(harness.exact_accuracy(results))
    all_right = harness.records_from_predictions(records, [Prediction(r.answer, {}) for r in records], "y")
    assert all(row["accuracy"] == 1.0 for row in harness.breakdown(all_right, "qtype"))
    with pytest.raises(ValueError):
        harness.breakdown([], "qtype")
    with pytest.raises(ValueError):
        harness.breakdown(results, "color")


def test_evaluate_rejects_vocabulary_mismatch(tiny_pretrained, small_dataset):
    import dataclasses

    model, _ = tiny_pretrained
    broken = dataclasses.replace(small_dataset.records["test"][0], answer="not-a-real-answer")
    with pytest.raises(RuntimeError):
        harness.evaluate(model, [broken], small_dataset.regions, Paradigm.BASELINE)


@pytest.fixture(scope="module")
def fitted_converter(small_dataset):
    pairs = decl.build_declaration_pairs(decl.triples_from_records(small_dataset.records["train"]))
    return decl.fit_converter(pairs)


def test_evaluate_is_deterministic(tiny_pretrained, small_dataset, fitted_converter):
    model, _ = tiny_pretrained
    records = small_dataset.records["test"][:20]
    a = harness.evaluate(model, records, small_dataset.regions, Paradigm.DPT_MLM_ITM, fitted_converter, k=4)
    b = harness.evaluate(model, records, small_dataset.regions, Paradigm.DPT_MLM_ITM, fitted_converter, k=4)
    assert a == b
    assert len(a) == 20


def test_k_zero_equals_mlm_only_exactly(tiny_pretrained, small_dataset, fitted_converter):
    model, _ = tiny_pretrained
    records = small_dataset.records["test"][:20]
    _, rows = harness.k_sweep(model, records, small_dataset.regions, fitted_converter, ks=(0, 1))
    mlm_only = harness.evaluate(
        model, records, small_dataset.regions, Paradigm.DPT_MLM_ITM, fitted_converter, k=0
    )
    assert rows[0]["accuracy"] == harness.exact_accuracy(mlm_only)
    # One candidate cannot change the argmax.
    assert rows[1]["accuracy"] == rows[0]["accuracy"]


def test_few_shot_protocol_shapes_and_exclusion(tiny_pretrained, small_dataset, fitted_converter):
    model, _ = tiny_pretrained
    cfg = harness.ExperimentConfig(
        world=small_dataset.cfg,
        shot_schedule=[0, 2],
        n_splits=2,
        fewshot_paradigms=["baseline", "dpt-full"],
        fewshot=harness.FinetuneConfig(steps=2, batch_size=4, lr=1e-4),
        fewshot_eval_size=12,
        k=2,
    )
    records, rows = harness.few_shot_protocol(model, small_dataset, fitted_converter, cfg)
    assert {(r["paradigm"], r["shots"]) for r in rows} == {
        ("baseline", 0),
        ("baseline", 2),
        ("dpt-full", 0),
        ("dpt-full", 2),
    }
    assert all(r.gold not in ("yes", "no") for r in records)
    baseline_rows = {r["shots"]: r for r in rows if r["paradigm"] == "baseline"}
    assert all(r["delta_vs_baseline"] == pytest.approx(r["mean"] - baseline_rows[r["shots"]]["mean"]) for r in rows)


def test_few_shot_pool_exhaustion_is_a_protocol_error(tiny_pretrained, small_dataset, fitted_converter):
    model, _ = tiny_pretrained
    cfg = harness.ExperimentConfig(world=small_dataset.cfg, shot_schedule=[10_000], n_splits=1)
    with pytest.raises(ValueError, match="exceeds"):
        harness.few_shot_protocol(model, small_dataset, fitted_converter, cfg)


def test_single_split_has_zero_std(tiny_pretrained, small_dataset, fitted_converter):
    model, _ = tiny_pretrained
    cfg = harness.ExperimentConfig(
        world=small_dataset.cfg,
        shot_schedule=[0],
        n_splits=1,
        fewshot_paradigms=["baseline"],
        fewshot=harness.FinetuneConfig(steps=1, batch_size=2),
        fewshot_eval_size=10,
    )
    _, rows = harness.few_shot_protocol(model, small_dataset, fitted_converter, cfg)
    assert rows[0]["std"] == 0.0


def test_report_json_roundtrip_and_rendering(tmp_path):
    report = harness.Report(
        bleu=0.97,
        pretrain_health={"itm_holdout_acc": 0.95, "masked_recovery": 0.8},
        supervised=[{"paradigm": "baseline", "mean": 0.5, "std": 0.01, "per_seed": [0.49, 0.51]}],
        qtype_table=[{"paradigm": "baseline", "group": "verify", "n": 10, "accuracy": 0.6}],
        length_table=[{"paradigm": "baseline", "group": "6-8", "n": 10, "accuracy": 0.5}],
        few_shot=[
            {"paradigm": "baseline", "shots": 0, "mean": 0.1, "std": 0.0, "delta_vs_baseline": 0.0},
            {"paradigm": "baseline", "shots": 1, "mean": 0.2, "std": 0.1, "delta_vs_baseline": 0.0},
            {"paradigm": "dpt-full", "shots": 0, "mean": 0.3, "std": 0.0, "delta_vs_baseline": 0.2},
            {"paradigm": "dpt-full", "shots": 1, "mean": 0.4, "std": 0.1, "delta_vs_baseline": 0.2},
        ],
        k_sweep=[{"k": 0, "accuracy": 0.5}, {"k": 8, "accuracy": 0.55}],
    )
    paths = harness.render_report(report, tmp_path)
    assert all(p.exists() and p.stat().st_size > 0 for p in paths)

    with open(tmp_path / "report.json") as fh:
        loaded = harness.Report.from_dict(json.load(fh))
    assert loaded.to_dict() == report.to_dict()

    md = (tmp_path / "report.md").read_text()
    table_rows = [l for l in md.splitlines() if l.startswith("| ") and "shots" not in l and "---" not in l]
    fs_rows = [l for l in table_rows if any(f"| {p} | " in l for p in ("baseline", "dpt-full")) and "+" in l]
    assert len(fs_rows) == 2 * 2  # paradigms x shot counts

    plots = sorted((tmp_path / "plots").glob("*.png"))
    assert len(plots) == 4
    assert all(p.stat().st_size > 0 for p in plots)
