"""Tests for evaluation reports, sweeps, controls, overlap and similarity."""

import math

import numpy as np
import pytest

from graddistill.attribution import random_attribution
from graddistill.data import (CONNECTIVE_IDS, EOS_ID, Example,
                              gen_marker_classification)
from graddistill.distill import (RationaleExample, TrainConfig,
                                 as_rationale_examples, train)
from graddistill.errors import ConfigError, DataError
from graddistill.evaluation import (EvalReport, control_comparison, evaluate,
                                    k_sweep, overlap_with_truth,
                                    prediction_similarity, random_overlap_rate,
                                    read_sweep_curve, report_from_predictions,
                                    write_metric_report, write_sweep_curve)
from graddistill.io_utils import read_jsonl
from graddistill.model import Seq2SeqModel

from conftest import small_model_config


# ---------------------------------------------------------------------------
# evaluate


def test_perfect_memorizer_scores_one(marker_dataset):
    examples = marker_dataset.train[:8]
    student = Seq2SeqModel(small_model_config(len(marker_dataset.vocab), seed=0))
    cfg = TrainConfig(learning_rate=0.5, epochs=40, batch_size=8, seed=0)
    train(student, as_rationale_examples(examples), cfg)
    report = evaluate(student, examples, marker_dataset.vocab, mode="plain")
    assert report.accuracy == 1.0


def test_constant_predictor_hits_class_frequency(marker_dataset):
    # Chance-level oracle built by simulation: a constant predictor on a
    # balanced n-way task scores about 1/n.
    examples = marker_dataset.all_examples()
    golds = [marker_dataset.vocab.to_strings(ex.label_ids) for ex in examples]
    preds = [["class0"]] * len(golds)
    report = report_from_predictions(golds, preds)
    assert abs(report.accuracy - 1 / 3) <= 0.05


class ScriptedModel:
    """Stand-in whose generate() replays scripted outputs."""

    def __init__(self, outputs, max_seq_len=64):
        from graddistill.model import ModelConfig
        self.config = ModelConfig(vocab_size=512, max_seq_len=max_seq_len)
        self.outputs = outputs

    def generate(self, input_ids, max_len):
        out = self.outputs[tuple(input_ids)]
        return out[:max_len]


def test_evaluate_concatenated_parses_after_connective(marker_dataset):
    vocab = marker_dataset.vocab
    ex = Example(0, [10, 11, 12], [vocab.id_of("class1")])
    good = [11, 3, 10] + list(CONNECTIVE_IDS) + [vocab.id_of("class1"), EOS_ID]
    model = ScriptedModel({tuple(ex.input_ids): good})
    report = evaluate(model, [ex], vocab, mode="concatenated")
    assert report.records[0].correct
    assert report.records[0].predicted == ["class1"]
    assert report.records[0].rationale == [vocab.token_of(11), "[SEP]",
                                           vocab.token_of(10)]


def test_evaluate_concatenated_missing_connective_is_incorrect(marker_dataset):
    vocab = marker_dataset.vocab
    ex = Example(0, [10, 11, 12], [vocab.id_of("class1")])
    model = ScriptedModel({tuple(ex.input_ids): [vocab.id_of("class1"), EOS_ID]})
    report = evaluate(model, [ex], vocab, mode="concatenated")
    assert not report.records[0].correct


def test_evaluate_rejects_unknown_mode(marker_dataset):
    model = ScriptedModel({})
    with pytest.raises(ConfigError):
        evaluate(model, [], marker_dataset.vocab, mode="telepathy")


def test_eval_report_roundtrip(tmp_path):
    report = report_from_predictions([["a"], ["b"]], [["a"], ["c"]],
                                     dataset_id="toy", model_id="m1")
    path = tmp_path / "report.jsonl"
    report.save(path)
    back = EvalReport.load(path)
    assert back.accuracy == report.accuracy == 0.5
    assert back.records == report.records
    header = read_jsonl(path)[0]
    assert header["numerator"] == 1 and header["denominator"] == 2


# ---------------------------------------------------------------------------
# k sweep and control comparison (mechanics at toy scale)


def trimmed_copy(dataset, n_train=48, n_eval=24):
    from graddistill.data import Dataset
    return Dataset(dataset.task, dataset.seed, dataset.vocab,
                   dataset.train[:n_train], dataset.validation[:n_eval],
                   dataset.test[:n_eval], dataset.params)


@pytest.fixture(scope="module")
def sweep_result(marker_teacher, marker_dataset):
    cfg = TrainConfig(learning_rate=0.3, epochs=2, batch_size=16,
                      lambda_=0.5, k=2, seed=0)
    small = small_model_config(len(marker_dataset.vocab))
    return k_sweep(marker_teacher, trimmed_copy(marker_dataset), small, cfg,
                   k_values=[0, 1], seeds=[0, 1])


def test_k_sweep_shape_and_ranges(sweep_result):
    assert [row["k"] for row in sweep_result] == [0, 1]
    for row in sweep_result:
        assert 0.0 <= row["mean_accuracy"] <= 1.0
        assert row["sd"] >= 0.0
        assert len(row["accuracies"]) == 2


def test_k_sweep_zero_routes_to_standard_fine_tuning(sweep_result,
                                                     marker_dataset):
    from dataclasses import replace
    cfg = TrainConfig(learning_rate=0.3, epochs=2, batch_size=16,
                      lambda_=0.5, k=2, seed=0)
    trimmed = trimmed_copy(marker_dataset)
    accs = []
    for seed in (0, 1):
        student = Seq2SeqModel(small_model_config(len(marker_dataset.vocab),
                                                  seed=seed))
        train(student, as_rationale_examples(trimmed.train),
              replace(cfg, seed=seed))
        report = evaluate(student, trimmed.test, trimmed.vocab, mode="plain")
        accs.append(report.accuracy)
    assert accs == sweep_result[0]["accuracies"]


def test_k_sweep_rejects_empty_inputs(marker_teacher, marker_dataset):
    cfg = TrainConfig()
    small = small_model_config(len(marker_dataset.vocab))
    with pytest.raises(ConfigError):
        k_sweep(marker_teacher, marker_dataset, small, cfg, [], [0])
    with pytest.raises(ConfigError):
        k_sweep(marker_teacher, marker_dataset, small, cfg, [1], [])


def test_control_comparison_mechanics(marker_teacher, marker_dataset):
    cfg = TrainConfig(learning_rate=0.3, epochs=1, batch_size=16,
                      lambda_=0.5, k=2, seed=0)
    small = small_model_config(len(marker_dataset.vocab))
    result = control_comparison(marker_teacher, marker_dataset, small, cfg,
                                seeds=[0, 1, 2])
    assert set(result["conditions"]) == {"teacher_rationales", "no_rationales",
                                         "random_rationales"}
    for cond in result["conditions"].values():
        assert len(cond["accuracies"]) == 3
        assert 0.0 <= cond["mean_accuracy"] <= 1.0
    assert len(result["ordering"]) == 3


def test_control_comparison_needs_three_seeds(marker_teacher, marker_dataset):
    cfg = TrainConfig()
    small = small_model_config(len(marker_dataset.vocab))
    with pytest.raises(ConfigError):
        control_comparison(marker_teacher, marker_dataset, small, cfg, [0, 1])


# ---------------------------------------------------------------------------
# overlap with planted truth


def synthetic_rationales(n_examples, n_positions, k, planted_count=1, seed=0):
    out = []
    for i in range(n_examples):
        rng = np.random.default_rng((seed, i))
        input_ids = (10 + rng.integers(0, 50, size=n_positions)).tolist()
        planted = tuple(rng.choice(n_positions, size=planted_count,
                                   replace=False).tolist())
        ex = Example(i, input_ids, [input_ids[planted[0]]],
                     planted_positions=planted)
        picked = random_attribution(ex, k, seed=seed)
        out.append(RationaleExample(ex, picked.token_ids, picked.positions,
                                    "random", k))
    return out


def test_overlap_random_rationales_match_hypergeometric_null():
    n, k = 20, 5
    rset = synthetic_rationales(2000, n, k, planted_count=1, seed=3)
    report = overlap_with_truth(rset)
    assert report.planted_counts[1] == 2000
    assert abs(report.planted_overlap_rate - k / n) <= 0.03
    assert report.answer_overlap_rate is None  # no choices metadata


def test_overlap_all_positions_gives_one():
    n = 6
    rset = synthetic_rationales(50, n, k=n, planted_count=2, seed=5)
    report = overlap_with_truth(rset)
    assert report.planted_overlap_rate == 1.0


def test_overlap_missing_metadata_is_absent_not_zero():
    ex = Example(0, [10, 11], [10])
    rset = [RationaleExample(ex, [10], [0], "random", 1)]
    report = overlap_with_truth(rset)
    assert report.planted_overlap_rate is None
    assert report.answer_overlap_rate is None


def test_overlap_answer_rate_uses_choices(choice_teacher, choice_dataset):
    from graddistill.distill import build_rationale_dataset
    rset = build_rationale_dataset(choice_teacher, choice_dataset.test[:50],
                                   k=3, method="saliency")
    report = overlap_with_truth(rset)
    assert report.answer_counts[1] == 50
    assert 0.0 <= report.answer_overlap_rate <= 1.0


def test_random_overlap_rate_matches_enumeration():
    from itertools import combinations
    for n, k, p in [(6, 2, 1), (7, 3, 2), (5, 4, 1), (8, 3, 3)]:
        hits = total = 0
        for subset in combinations(range(n), k):
            total += 1
            hits += bool(set(subset) & set(range(p)))
        assert abs(random_overlap_rate(n, k, p) - hits / total) <= 1e-12
    assert random_overlap_rate(10, 1, 1) == pytest.approx(0.1)
    assert random_overlap_rate(4, 4, 1) == 1.0
    with pytest.raises(ConfigError):
        random_overlap_rate(0, 1, 1)


# ---------------------------------------------------------------------------
# prediction similarity


def test_similarity_self_comparison_is_one():
    report = report_from_predictions([["a"], ["b"], ["c"]],
                                     [["a"], ["x"], ["c"]])
    sim = prediction_similarity(report, report)
    assert sim.correct_overlap == 1.0
    assert sim.incorrect_overlap == 1.0


def test_similarity_disjoint_correct_sets():
    golds = [["a"], ["b"]]
    ra = report_from_predictions(golds, [["a"], ["x"]])
    rb = report_from_predictions(golds, [["y"], ["b"]])
    sim = prediction_similarity(ra, rb)
    assert sim.correct_overlap == 0.0


def test_similarity_independent_predictors_match_simulation_oracle():
    # Two independent uniform 3-class predictors: conditioned on both being
    # wrong, they agree with probability 1/2 (two wrong labels each).
    rng = np.random.default_rng(2024)
    labels = ["x", "y", "z"]
    n = 10000
    golds, pa, pb = [], [], []
    for _ in range(n):
        golds.append([labels[rng.integers(3)]])
        pa.append([labels[rng.integers(3)]])
        pb.append([labels[rng.integers(3)]])
    sim = prediction_similarity(report_from_predictions(golds, pa),
                                report_from_predictions(golds, pb))
    n_both_wrong = sim.incorrect_counts[1]
    sigma = math.sqrt(0.25 / n_both_wrong)
    assert abs(sim.incorrect_overlap - 0.5) <= 3 * sigma
    # And P(b correct | a correct) = 1/3 for independent predictors.
    sigma_c = math.sqrt((1 / 3) * (2 / 3) / sim.correct_counts[1])
    assert abs(sim.correct_overlap - 1 / 3) <= 3 * sigma_c


def test_similarity_zero_denominator_flagged():
    golds = [["a"]]
    ra = report_from_predictions(golds, [["a"]])
    rb = report_from_predictions(golds, [["a"]])
    sim = prediction_similarity(ra, rb)
    assert sim.incorrect_overlap is None
    assert sim.incorrect_counts == (0, 0)


def test_similarity_alternative_conditioning_flag():
    golds = [["a"], ["b"], ["c"]]
    ra = report_from_predictions(golds, [["x"], ["x"], ["c"]])
    rb = report_from_predictions(golds, [["x"], ["b"], ["c"]])
    strict = prediction_similarity(ra, rb)  # both wrong: example 0 only
    assert strict.incorrect_counts == (1, 1)
    loose = prediction_similarity(ra, rb, incorrect_given_both_wrong=False)
    assert loose.incorrect_counts == (1, 2)  # a wrong on examples 0 and 1


def test_similarity_requires_same_examples():
    ra = report_from_predictions([["a"]], [["a"]])
    rb = report_from_predictions([["a"], ["b"]], [["a"], ["b"]])
    with pytest.raises(DataError):
        prediction_similarity(ra, rb)


# ---------------------------------------------------------------------------
# report files


def test_metric_report_and_sweep_curve_files(tmp_path, sweep_result):
    curve_path = tmp_path / "curve.tsv"
    write_sweep_curve(curve_path, sweep_result)
    points = read_sweep_curve(curve_path)
    assert [k for k, _ in points] == [0, 1]

    report_path = tmp_path / "metrics.jsonl"
    write_metric_report(report_path,
                        [{"metric": f"accuracy_k{row['k']}",
                          "value": row["mean_accuracy"],
                          "seeds": row["seeds"]} for row in sweep_result],
                        fingerprint="abcd1234")
    rows = read_jsonl(report_path)
    assert all(r["config_fingerprint"] == "abcd1234" for r in rows)
    assert all("value" in r and "seeds" in r for r in rows)


def test_sweep_curve_rejects_malformed(tmp_path):
    bad = tmp_path / "curve.tsv"
    bad.write_text("not\ta-curve\n")
    with pytest.raises(DataError):
        read_sweep_curve(bad)
