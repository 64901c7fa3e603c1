"""Rationale-augmented datasets and student training with a combined loss.

The student optimizes label cross-entropy plus a weighted rationale
generation term. In dual mode each rationale-bearing example contributes
two decoder passes, one per objective, with a reserved task-prefix token
on the encoder input; examples without rationales take the plain path, so
a dataset with no rationales reproduces standard fine-tuning bitwise.
Concatenated mode trains a single target of the form
``rationales … so the answer is <label>`` instead, and the weight is
ignored.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attribution import (METHOD_IG, METHOD_RANDOM, METHOD_SALIENCY,
                          integrated_gradients, random_attribution,
                          saliency_attribution, top_k_tokens)
from .data import (CONNECTIVE_IDS, EOS_ID, LABEL_ID, RATIONALE_ID, SEP_ID,
                   Example, Vocabulary)
from .errors import ConfigError, DataError, TrainingDivergedError
from .io_utils import read_jsonl, write_jsonl
from .model import Seq2SeqModel

SOURCE_SALIENCY = "teacher_saliency"
SOURCE_IG = "teacher_ig"
SOURCE_RANDOM = "random"
SOURCE_NONE = "none"
SOURCES = (SOURCE_SALIENCY, SOURCE_IG, SOURCE_RANDOM, SOURCE_NONE)

METHOD_NONE = "none"
METHOD_TO_SOURCE = {
    METHOD_SALIENCY: SOURCE_SALIENCY,
    METHOD_IG: SOURCE_IG,
    METHOD_RANDOM: SOURCE_RANDOM,
    METHOD_NONE: SOURCE_NONE,
}

TARGET_MODES = ("dual", "concatenated")


@dataclass
class RationaleExample:
    """An example plus the rationale tokens a student should also generate."""

    example: Example
    rationale_ids: list[int]
    rationale_positions: list[int]
    source: str
    k: int

    def __post_init__(self):
        if self.source not in SOURCES:
            raise DataError(f"unknown rationale source: {self.source!r}")
        if len(self.rationale_ids) != len(self.rationale_positions):
            raise DataError("rationale ids and positions must align")
        if len(self.rationale_ids) > self.k:
            raise DataError(f"example {self.example.id}: more than k={self.k} "
                            f"rationale tokens")
        for tok, pos in zip(self.rationale_ids, self.rationale_positions):
            if not 0 <= pos < len(self.example.input_ids) or \
                    self.example.input_ids[pos] != tok:
                raise DataError(f"example {self.example.id}: rationale token "
                                f"{tok} not at input position {pos}")

    @property
    def has_rationale(self) -> bool:
        return self.source != SOURCE_NONE and bool(self.rationale_ids)


@dataclass
class TrainConfig:
    """Optimization settings for plain SGD over shuffled mini-batches.

    ``pretrained_lr_reference`` records the conventional fine-tuning rate
    for large pretrained checkpoints; it is provenance metadata, unused by
    the from-scratch desk-scale loop.
    """

    learning_rate: float = 5e-4
    epochs: int = 10
    batch_size: int = 16
    lambda_: float = 0.5
    k: int = 5
    seed: int = 0
    target_mode: str = "dual"
    pretrained_lr_reference: float = field(default=5e-5, repr=False)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.lambda_ < 0:
            raise ConfigError("lambda_ must be non-negative")
        if self.k < 1:
            raise ConfigError("k must be at least 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be at least 1")
        if self.target_mode not in TARGET_MODES:
            raise ConfigError(f"target_mode must be one of {TARGET_MODES}")

    def to_dict(self) -> dict:
        return {"learning_rate": self.learning_rate, "epochs": self.epochs,
                "batch_size": self.batch_size, "lambda": self.lambda_,
                "k": self.k, "seed": self.seed, "target_mode": self.target_mode}

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        payload = dict(payload)
        if "lambda" in payload:
            payload["lambda_"] = payload.pop("lambda")
        try:
            return cls(**payload)
        except TypeError as exc:
            raise ConfigError(f"bad train config: {exc}") from exc


def build_rationale_dataset(teacher: Seq2SeqModel, examples: list[Example],
                            k: int, method: str, seed: int = 0,
                            vocab: Vocabulary | None = None,
                            ig_baseline: str = "zero_embedding",
                            ig_steps: int = 64) -> list[RationaleExample]:
    """Attach top-k teacher rationales (or a control) to every example."""
    if method not in METHOD_TO_SOURCE:
        raise ConfigError(f"unknown attribution method: {method!r}")
    if vocab is not None and len(vocab) != teacher.config.vocab_size:
        raise DataError(f"teacher vocabulary size {teacher.config.vocab_size} "
                        f"does not match dataset vocabulary size {len(vocab)}")
    source = METHOD_TO_SOURCE[method]
    out = []
    for ex in examples:
        if max(ex.input_ids, default=0) >= teacher.config.vocab_size:
            raise DataError(f"example {ex.id} uses ids outside the teacher "
                            f"vocabulary")
        if method == METHOD_NONE:
            out.append(RationaleExample(ex, [], [], SOURCE_NONE, k))
            continue
        if method == METHOD_SALIENCY:
            topk = top_k_tokens(saliency_attribution(teacher, ex), k)
        elif method == METHOD_IG:
            topk = top_k_tokens(
                integrated_gradients(teacher, ex, baseline=ig_baseline,
                                     steps=ig_steps), k)
        else:
            topk = random_attribution(ex, k, seed)
        out.append(RationaleExample(ex, topk.token_ids, topk.positions, source, k))
    return out


def rationale_targets(rx: RationaleExample, mode: str) -> dict:
    """Decoder target sequences for one example (EOS is appended by the loss).

    Dual mode returns separate label and rationale targets, the latter with
    separator tokens between rationale words. Concatenated mode returns a
    single target: rationales, the fixed connective, then the label.
    """
    if mode not in TARGET_MODES:
        raise ConfigError(f"target_mode must be one of {TARGET_MODES}")
    label = list(rx.example.label_ids)
    if not rx.has_rationale:
        if mode == "dual":
            return {"label": label, "rationale": None}
        return {"single": label}
    joined: list[int] = []
    for tok in rx.rationale_ids:
        joined.extend((tok, SEP_ID))
    if mode == "dual":
        return {"label": label, "rationale": joined[:-1]}
    return {"single": joined + list(CONNECTIVE_IDS) + label}


def _loss_terms(student: Seq2SeqModel, batch: list[RationaleExample],
                mode: str) -> tuple[ad.Tensor, ad.Tensor | None]:
    """Label term and rationale term of the combined objective (means over
    the full batch; the rationale term is None when no example carries one)."""
    if not batch:
        raise DataError("combined_loss needs a non-empty batch")
    n = len(batch)
    label_sum = None
    rationale_sum = None
    for rx in batch:
        targets = rationale_targets(rx, mode)
        inputs = list(rx.example.input_ids)
        if mode == "concatenated":
            loss = student.sequence_loss(inputs, targets["single"] + [EOS_ID])
            label_sum = loss if label_sum is None else ad.add(label_sum, loss)
            continue
        label_inputs = [LABEL_ID] + inputs if rx.has_rationale else inputs
        loss = student.sequence_loss(label_inputs, targets["label"] + [EOS_ID])
        label_sum = loss if label_sum is None else ad.add(label_sum, loss)
        if targets["rationale"] is not None:
            rloss = student.sequence_loss([RATIONALE_ID] + inputs,
                                          targets["rationale"] + [EOS_ID])
            rationale_sum = rloss if rationale_sum is None \
                else ad.add(rationale_sum, rloss)
    label_term = ad.mul_scalar(label_sum, 1.0 / n)
    rationale_term = None if rationale_sum is None \
        else ad.mul_scalar(rationale_sum, 1.0 / n)
    return label_term, rationale_term


def combined_loss(student: Seq2SeqModel, batch: list[RationaleExample],
                  lambda_: float, mode: str = "dual") -> ad.Tensor:
    """Label loss plus ``lambda_`` times the rationale-generation loss.

    With ``lambda_ == 0`` or no rationales in the batch, this returns the
    label term itself, so the degenerate case is bitwise equal to standard
    fine-tuning. In concatenated mode the single-target loss is returned
    and ``lambda_`` is ignored.
    """
    if lambda_ < 0:
        raise ConfigError("lambda_ must be non-negative")
    label_term, rationale_term = _loss_terms(student, batch, mode)
    if mode == "concatenated" or rationale_term is None or lambda_ == 0.0:
        return label_term
    return ad.add(label_term, ad.mul_scalar(rationale_term, lambda_))


def _strip_eos(ids: list[int]) -> list[int]:
    return ids[:-1] if ids and ids[-1] == EOS_ID else ids


def label_accuracy(model: Seq2SeqModel, examples: list[Example],
                   prefixed: bool = False) -> float:
    """Exact-match accuracy of greedily generated labels."""
    if not examples:
        raise DataError("label_accuracy needs a non-empty example list")
    hits = 0
    for ex in examples:
        inputs = [LABEL_ID] + list(ex.input_ids) if prefixed else list(ex.input_ids)
        cap = min(len(ex.label_ids) + 2, model.config.max_seq_len)
        out = model.generate(inputs, max_len=cap)
        hits += _strip_eos(out) == list(ex.label_ids)
    return hits / len(examples)


def train(student: Seq2SeqModel, data: list[RationaleExample],
          config: TrainConfig, val_examples: list[Example] | None = None
          ) -> list[dict]:
    """SGD over shuffled mini-batches of the combined loss.

    Mutates ``student`` in place and returns the per-epoch history
    (mean batch loss, plus validation label accuracy when a validation
    split is given). Deterministic for a fixed (seed, data, config).
    """
    if not data:
        raise DataError("train needs a non-empty dataset")
    rng = np.random.default_rng(config.seed)
    prefixed = any(rx.has_rationale for rx in data)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(data))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [data[i] for i in order[start:start + config.batch_size]]
            student.zero_grad()
            loss = combined_loss(student, batch, config.lambda_,
                                 config.target_mode)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch "
                    f"{start // config.batch_size}: {value}")
            loss.backward()
            lr = config.learning_rate
            for p in student.params.values():
                p.data -= lr * p.grad
            epoch_losses.append(value)
        entry = {"epoch": epoch, "loss": float(np.mean(epoch_losses))}
        if val_examples is not None:
            entry["val_accuracy"] = label_accuracy(
                student, val_examples,
                prefixed=prefixed and config.target_mode == "dual")
        history.append(entry)
    return history


def as_rationale_examples(examples: list[Example], k: int = 5
                          ) -> list[RationaleExample]:
    """Wrap plain examples for standard fine-tuning (no rationales)."""
    return [RationaleExample(ex, [], [], SOURCE_NONE, k) for ex in examples]


# ---------------------------------------------------------------------------
# rationale dataset file


def save_rationale_dataset(path, rationale_examples: list[RationaleExample],
                           vocab: Vocabulary) -> None:
    records = []
    for rx in rationale_examples:
        ex = rx.example
        rec = {"id": ex.id,
               "input_tokens": vocab.to_strings(ex.input_ids),
               "label_tokens": vocab.to_strings(ex.label_ids)}
        if ex.choices is not None:
            rec["choices"] = [vocab.to_strings(c) for c in ex.choices]
        rec["rationale_tokens"] = vocab.to_strings(rx.rationale_ids)
        rec["rationale_positions"] = list(rx.rationale_positions)
        rec["source"] = rx.source
        rec["k"] = rx.k
        if ex.planted_positions is not None:
            rec["planted_positions"] = list(ex.planted_positions)
        records.append(rec)
    write_jsonl(path, records)


def load_rationale_dataset(path, vocab: Vocabulary) -> list[RationaleExample]:
    out = []
    for i, rec in enumerate(read_jsonl(path), start=1):
        try:
            ex = Example(
                id=int(rec["id"]),
                input_ids=[vocab.id_of(t) for t in rec["input_tokens"]],
                label_ids=[vocab.id_of(t) for t in rec["label_tokens"]],
                choices=[[vocab.id_of(t) for t in c] for c in rec["choices"]]
                if "choices" in rec else None,
                planted_positions=tuple(rec["planted_positions"])
                if "planted_positions" in rec else None)
            out.append(RationaleExample(
                ex,
                [vocab.id_of(t) for t in rec["rationale_tokens"]],
                list(rec["rationale_positions"]),
                rec["source"], int(rec["k"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{Path(path)}:{i}: bad rationale record: {exc}") \
                from exc
    return out
