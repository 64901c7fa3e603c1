"""Accuracy reports, sweeps, controls, overlap and similarity analyses.

Accuracy is exact match on the label portion of the generated output only;
rationale tokens never enter the accuracy computation. Every reported rate
carries its numerator and denominator so alternative normalizations stay
recoverable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import (CONNECTIVE_IDS, Dataset, EOS_ID, Example, LABEL_ID,
                   RATIONALE_ID, Vocabulary)
from .distill import (RationaleExample, TrainConfig, as_rationale_examples,
                      build_rationale_dataset, train)
from .errors import ConfigError, DataError
from .io_utils import atomic_write_text, read_jsonl, write_jsonl
from .model import ModelConfig, Seq2SeqModel

EVAL_MODES = ("plain", "dual", "concatenated")


@dataclass
class EvalRecord:
    example_id: int
    gold: list[str]
    predicted: list[str]
    correct: bool
    rationale: list[str] | None = None


@dataclass
class EvalReport:
    dataset_id: str
    model_id: str
    records: list[EvalRecord]

    @property
    def accuracy(self) -> float:
        if not self.records:
            raise DataError("empty evaluation report has no accuracy")
        return sum(r.correct for r in self.records) / len(self.records)

    def save(self, path, fingerprint: str | None = None) -> None:
        header = {"dataset_id": self.dataset_id, "model_id": self.model_id,
                  "metric": "accuracy", "value": self.accuracy,
                  "numerator": sum(r.correct for r in self.records),
                  "denominator": len(self.records)}
        if fingerprint is not None:
            header["config_fingerprint"] = fingerprint
        rows = [{"example_id": r.example_id, "gold": r.gold,
                 "predicted": r.predicted, "correct": r.correct,
                 "rationale": r.rationale} for r in self.records]
        write_jsonl(path, [header] + rows)

    @classmethod
    def load(cls, path) -> "EvalReport":
        rows = read_jsonl(path)
        if not rows or "metric" not in rows[0]:
            raise DataError(f"not an evaluation report: {path}")
        header = rows[0]
        records = [EvalRecord(r["example_id"], r["gold"], r["predicted"],
                              bool(r["correct"]), r.get("rationale"))
                   for r in rows[1:]]
        return cls(header["dataset_id"], header["model_id"], records)


def report_from_predictions(golds, preds, dataset_id="sim", model_id="sim"
                            ) -> EvalReport:
    """Build a report from raw (gold, predicted) label-string sequences."""
    if len(golds) != len(preds):
        raise DataError("gold and prediction lists must align")
    records = [EvalRecord(i, list(g), list(p), list(g) == list(p))
               for i, (g, p) in enumerate(zip(golds, preds))]
    return EvalReport(dataset_id, model_id, records)


def _strip_eos(ids: list[int]) -> list[int]:
    return ids[:-1] if ids and ids[-1] == EOS_ID else ids


def _find_connective(ids: list[int], connective: tuple[int, ...]) -> int:
    span = len(connective)
    for start in range(len(ids) - span + 1):
        if tuple(ids[start:start + span]) == connective:
            return start
    return -1


def evaluate(model: Seq2SeqModel, examples: list[Example], vocab: Vocabulary,
             mode: str = "plain", dataset_id: str = "", model_id: str = "",
             record_rationales: bool = False) -> EvalReport:
    """Greedy-generate per example and score the label segment exactly.

    ``plain`` feeds the raw input; ``dual`` prepends the label-task prefix
    (for students trained with rationale passes); ``concatenated`` parses
    the tokens after the connective, and outputs missing the connective
    are scored incorrect. Unparseable output is never an error.
    """
    if mode not in EVAL_MODES:
        raise ConfigError(f"mode must be one of {EVAL_MODES}")
    records = []
    for ex in examples:
        gold = list(ex.label_ids)
        rationale_strings = None
        if mode == "concatenated":
            cap = min(model.config.max_seq_len,
                      2 * len(ex.input_ids) + len(gold) + 8)
            out = _strip_eos(model.generate(list(ex.input_ids), max_len=cap))
            at = _find_connective(out, tuple(CONNECTIVE_IDS))
            if at < 0:
                predicted, rationale = [], out
            else:
                predicted = out[at + len(CONNECTIVE_IDS):]
                rationale = out[:at]
            rationale_strings = vocab.to_strings(rationale)
        else:
            inputs = [LABEL_ID] + list(ex.input_ids) if mode == "dual" \
                else list(ex.input_ids)
            cap = min(len(gold) + 2, model.config.max_seq_len)
            predicted = _strip_eos(model.generate(inputs, max_len=cap))
            if record_rationales and mode == "dual":
                r_out = model.generate([RATIONALE_ID] + list(ex.input_ids),
                                       max_len=model.config.max_seq_len)
                rationale_strings = vocab.to_strings(_strip_eos(r_out))
        records.append(EvalRecord(ex.id, vocab.to_strings(gold),
                                  vocab.to_strings(predicted),
                                  predicted == gold, rationale_strings))
    return EvalReport(dataset_id, model_id, records)


# ---------------------------------------------------------------------------
# sweeps and controls


def _train_student(student_config: ModelConfig, train_config: TrainConfig,
                   rationale_data: list[RationaleExample], seed: int
                   ) -> Seq2SeqModel:
    model = Seq2SeqModel(replace(student_config, seed=seed))
    train(model, rationale_data, replace(train_config, seed=seed))
    return model


def k_sweep(teacher: Seq2SeqModel, dataset: Dataset,
            student_config: ModelConfig, train_config: TrainConfig,
            k_values: list[int], seeds: list[int],
            method: str = "saliency", eval_split: str = "test") -> list[dict]:
    """Accuracy versus rationale count; k=0 routes to standard fine-tuning."""
    if not k_values:
        raise ConfigError("k_values must be non-empty")
    if not seeds:
        raise ConfigError("seeds must be non-empty")
    eval_examples = dataset.split(eval_split)
    results = []
    for k in k_values:
        if k == 0:
            data = as_rationale_examples(dataset.train, k=train_config.k)
            eval_mode = "plain"
        else:
            data = build_rationale_dataset(teacher, dataset.train, k, method,
                                           seed=train_config.seed,
                                           vocab=dataset.vocab)
            eval_mode = "dual" if train_config.target_mode == "dual" \
                else "concatenated"
        accuracies = []
        for seed in seeds:
            cfg = replace(train_config, k=max(k, 1))
            student = _train_student(student_config, cfg, data, seed)
            report = evaluate(student, eval_examples, dataset.vocab,
                              mode=eval_mode, dataset_id=dataset.task,
                              model_id=f"student_k{k}_seed{seed}")
            accuracies.append(report.accuracy)
        results.append({
            "k": k,
            "mean_accuracy": float(np.mean(accuracies)),
            "sd": float(np.std(accuracies, ddof=1)) if len(accuracies) > 1 else 0.0,
            "accuracies": accuracies,
            "seeds": list(seeds),
        })
    return results


CONTROL_CONDITIONS = ("teacher_rationales", "no_rationales", "random_rationales")


def control_comparison(teacher: Seq2SeqModel, dataset: Dataset,
                       student_config: ModelConfig, train_config: TrainConfig,
                       seeds: list[int], method: str = "saliency") -> dict:
    """Teacher-vs-none-vs-random rationale conditions on matched seeds."""
    if len(seeds) < 3:
        raise ConfigError("control comparison needs at least 3 seeds")
    k = train_config.k
    datasets = {
        "teacher_rationales": build_rationale_dataset(
            teacher, dataset.train, k, method, seed=train_config.seed,
            vocab=dataset.vocab),
        "no_rationales": as_rationale_examples(dataset.train, k=k),
        "random_rationales": build_rationale_dataset(
            teacher, dataset.train, k, "random", seed=train_config.seed,
            vocab=dataset.vocab),
    }
    eval_mode = {"teacher_rationales": "dual", "no_rationales": "plain",
                 "random_rationales": "dual"}
    if train_config.target_mode == "concatenated":
        eval_mode = {c: ("concatenated" if c != "no_rationales" else "plain")
                     for c in CONTROL_CONDITIONS}
    out = {"conditions": {}, "seeds": list(seeds)}
    for condition in CONTROL_CONDITIONS:
        accuracies = []
        for seed in seeds:
            student = _train_student(student_config, train_config,
                                     datasets[condition], seed)
            report = evaluate(student, dataset.test, dataset.vocab,
                              mode=eval_mode[condition],
                              dataset_id=dataset.task,
                              model_id=f"{condition}_seed{seed}")
            accuracies.append(report.accuracy)
        out["conditions"][condition] = {
            "mean_accuracy": float(np.mean(accuracies)),
            "sd": float(np.std(accuracies, ddof=1)) if len(accuracies) > 1 else 0.0,
            "accuracies": accuracies,
        }
    means = {c: out["conditions"][c]["mean_accuracy"] for c in CONTROL_CONDITIONS}
    out["ordering"] = sorted(means, key=means.get, reverse=True)
    return out


# ---------------------------------------------------------------------------
# overlap with planted truth


@dataclass
class OverlapReport:
    answer_overlap_rate: float | None
    answer_counts: tuple[int, int]
    planted_overlap_rate: float | None
    planted_counts: tuple[int, int]


def overlap_with_truth(rationale_examples: list[RationaleExample]) -> OverlapReport:
    """Fractions of examples whose rationales touch the answer or a planted
    position. Rates are absent (None), not zero, when metadata is missing."""
    answer_hits = answer_total = 0
    planted_hits = planted_total = 0
    for rx in rationale_examples:
        ex = rx.example
        if ex.choices is not None:
            answer_total += 1
            label_set = set(ex.label_ids)
            if any(t in label_set for t in rx.rationale_ids):
                answer_hits += 1
        if ex.planted_positions is not None:
            planted_total += 1
            planted = set(ex.planted_positions)
            if any(p in planted for p in rx.rationale_positions):
                planted_hits += 1
    return OverlapReport(
        answer_overlap_rate=answer_hits / answer_total if answer_total else None,
        answer_counts=(answer_hits, answer_total),
        planted_overlap_rate=planted_hits / planted_total if planted_total else None,
        planted_counts=(planted_hits, planted_total))


def random_overlap_rate(n_eligible: int, k: int, n_planted: int = 1) -> float:
    """Hypergeometric chance that k uniform draws hit >= 1 of the planted
    positions among n eligible ones; equals k/n when one position is planted."""
    if k < 1 or n_planted < 1 or n_eligible < 1:
        raise ConfigError("n_eligible, k and n_planted must be positive")
    k = min(k, n_eligible)
    if k + n_planted > n_eligible:
        return 1.0
    return 1.0 - math.comb(n_eligible - n_planted, k) / math.comb(n_eligible, k)


# ---------------------------------------------------------------------------
# model-pair prediction similarity


@dataclass
class SimilarityReport:
    correct_overlap: float | None
    correct_counts: tuple[int, int]
    incorrect_overlap: float | None
    incorrect_counts: tuple[int, int]
    notes: dict = field(default_factory=dict)


def prediction_similarity(report_a: EvalReport, report_b: EvalReport,
                          incorrect_given_both_wrong: bool = True
                          ) -> SimilarityReport:
    """How alike two models' predictions are, on the identical example set.

    ``correct_overlap`` is P(b correct | a correct). ``incorrect_overlap``
    is, by default, the fraction of examples both models got wrong (with a
    defined prediction from a) where b predicted the same wrong label; the
    flag switches the condition to a-wrong only.
    """
    by_id_a = {r.example_id: r for r in report_a.records}
    by_id_b = {r.example_id: r for r in report_b.records}
    if set(by_id_a) != set(by_id_b) or not by_id_a:
        raise DataError("similarity needs two reports over the identical "
                        "non-empty example set")
    a_correct = both_correct = 0
    wrong_eligible = wrong_same = 0
    for ex_id, ra in by_id_a.items():
        rb = by_id_b[ex_id]
        if ra.correct:
            a_correct += 1
            both_correct += rb.correct
        else:
            if not ra.predicted:
                continue  # a's specific wrong label undefined
            eligible = (not rb.correct) if incorrect_given_both_wrong else True
            if eligible:
                wrong_eligible += 1
                wrong_same += ra.predicted == rb.predicted
    return SimilarityReport(
        correct_overlap=both_correct / a_correct if a_correct else None,
        correct_counts=(both_correct, a_correct),
        incorrect_overlap=wrong_same / wrong_eligible if wrong_eligible else None,
        incorrect_counts=(wrong_same, wrong_eligible),
        notes={"incorrect_given_both_wrong": incorrect_given_both_wrong})


# ---------------------------------------------------------------------------
# report files


def metric_records(metrics: list[dict], fingerprint: str,
                   seeds: list[int] | None = None) -> list[dict]:
    """Normalize metrics into the report-file schema."""
    out = []
    for m in metrics:
        out.append({"metric": m["metric"], "value": m["value"],
                    "numerator": m.get("numerator"),
                    "denominator": m.get("denominator"),
                    "config_fingerprint": fingerprint,
                    "seeds": seeds or m.get("seeds") or []})
    return out


def write_metric_report(path, metrics: list[dict], fingerprint: str,
                        seeds: list[int] | None = None) -> None:
    write_jsonl(path, metric_records(metrics, fingerprint, seeds))


def write_sweep_curve(path, sweep_results: list[dict]) -> None:
    """Flat plot-data file: header row, then one (k, accuracy) pair per line."""
    lines = ["k\taccuracy"]
    for row in sweep_results:
        lines.append(f"{row['k']}\t{row['mean_accuracy']:.6f}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_sweep_curve(path) -> list[tuple[int, float]]:
    text = Path(path).read_text(encoding="utf-8").strip().splitlines()
    if not text or text[0].split("\t") != ["k", "accuracy"]:
        raise DataError(f"not a sweep curve file: {path}")
    out = []
    for lineno, line in enumerate(text[1:], start=2):
        parts = line.split("\t")
        try:
            out.append((int(parts[0]), float(parts[1])))
        except (IndexError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: bad curve row") from exc
    return out
