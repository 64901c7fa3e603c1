"""Synthetic tasks with planted ground-truth tokens, vocabulary, dataset io.

Both generators produce noiseless tasks: the label is a deterministic
function of the planted input positions, so attribution quality can be
measured exactly. Tokens are whole words over a fixed, closed vocabulary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .io_utils import atomic_write_text, read_jsonl, write_jsonl

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
SEP_ID = 3
LABEL_ID = 4
RATIONALE_ID = 5

RESERVED_TOKENS = ("[PAD]", "[BOS]", "[EOS]", "[SEP]", "[LABEL]", "[RATIONALE]")
RESERVED_IDS = frozenset(range(len(RESERVED_TOKENS)))

# Fixed connective between generated rationales and the answer. Built
# vocabularies place these words directly after the reserved ids.
CONNECTIVE_WORDS = ("so", "the", "answer", "is")
CONNECTIVE_IDS = tuple(range(len(RESERVED_TOKENS),
                             len(RESERVED_TOKENS) + len(CONNECTIVE_WORDS)))

MARKERS_PER_CLASS = 4
CUE_PAIRS = 16
MIN_DISTRACTORS = 8


class Vocabulary:
    """Bijection between token strings and ids; ids 0-5 are reserved."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[: len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            raise DataError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise DataError("vocabulary contains duplicate tokens")
        self.tokens = tokens
        self._ids = {tok: i for i, tok in enumerate(tokens)}

    @classmethod
    def build(cls, words) -> "Vocabulary":
        """Reserved tokens, then the connective words, then ``words``."""
        return cls(list(RESERVED_TOKENS) + list(CONNECTIVE_WORDS) + list(words))

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self._ids

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id_of(self, token: str) -> int:
        if token not in self._ids:
            raise DataError(f"token not in vocabulary: {token!r}")
        return self._ids[token]

    def token_of(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.tokens):
            raise DataError(f"token id out of range: {token_id}")
        return self.tokens[token_id]

    @property
    def connective_ids(self) -> list[int]:
        return [self.id_of(w) for w in CONNECTIVE_WORDS]

    def to_strings(self, ids) -> list[str]:
        return [self.token_of(i) for i in ids]

    def save(self, path) -> None:
        atomic_write_text(path, "\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        path = Path(path)
        if not path.exists():
            raise DataError(f"missing vocabulary file: {path}")
        return cls(path.read_text(encoding="utf-8").splitlines())


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    """Whitespace tokenization over the closed vocabulary."""
    return [vocab.id_of(word) for word in text.split()]


def detokenize(ids, vocab: Vocabulary) -> str:
    return " ".join(vocab.token_of(i) for i in ids)


@dataclass
class Example:
    """One task instance: input token ids, target label ids, optional
    multiple-choice candidates and generator-known decisive positions."""

    id: int
    input_ids: list[int]
    label_ids: list[int]
    choices: list[list[int]] | None = None
    planted_positions: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.planted_positions is not None:
            self.planted_positions = tuple(sorted(self.planted_positions))
            if any(not 0 <= p < len(self.input_ids) for p in self.planted_positions):
                raise DataError(f"example {self.id}: planted position out of range")


@dataclass
class Dataset:
    task: str
    seed: int
    vocab: Vocabulary
    train: list[Example]
    validation: list[Example]
    test: list[Example]
    params: dict = field(default_factory=dict)

    def split(self, name: str) -> list[Example]:
        if name not in ("train", "validation", "test"):
            raise DataError(f"unknown split: {name}")
        return getattr(self, name)

    def all_examples(self):
        return self.train + self.validation + self.test


def _example_rng(seed: int, index: int) -> np.random.Generator:
    # Counter-based seeding keeps per-example draws independent of ordering.
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _split_counts(n_examples: int) -> tuple[int, int, int]:
    n_val = max(1, n_examples // 10)
    n_test = max(1, n_examples // 10)
    n_train = n_examples - n_val - n_test
    if n_train < 1:
        raise ConfigError(f"n_examples={n_examples} too small to split")
    return n_train, n_val, n_test


def _partition(examples: list[Example]) -> tuple[list, list, list]:
    n_train, n_val, n_test = _split_counts(len(examples))
    return (examples[:n_train],
            examples[n_train:n_train + n_val],
            examples[n_train + n_val:])


def gen_marker_classification(n_examples: int = 10000, n_labels: int = 3,
                              seq_len: int = 16, vocab_size: int = 512,
                              seed: int = 0) -> Dataset:
    """Classification task where a single marker token determines the label.

    Each input is uniform distractor words with exactly one marker word,
    drawn from one of ``n_labels`` disjoint marker sets, at a uniform
    position; the label is that set's class word.
    """
    if n_labels < 2:
        raise ConfigError("n_labels must be at least 2")
    if seq_len < 4:
        raise ConfigError("seq_len must be at least 4")
    label_words = [f"class{c}" for c in range(n_labels)]
    marker_words = [[f"marker{c}x{j}" for j in range(MARKERS_PER_CLASS)]
                    for c in range(n_labels)]
    overhead = (len(RESERVED_TOKENS) + len(CONNECTIVE_WORDS) + n_labels
                + n_labels * MARKERS_PER_CLASS)
    n_distractors = vocab_size - overhead
    if n_distractors < MIN_DISTRACTORS:
        raise ConfigError(
            f"vocab_size={vocab_size} cannot host {n_labels} disjoint marker "
            f"sets plus distractors (need ≥ {overhead + MIN_DISTRACTORS})")
    distractor_words = [f"word{j}" for j in range(n_distractors)]
    vocab = Vocabulary.build(label_words + [w for ws in marker_words for w in ws]
                             + distractor_words)

    label_ids = [vocab.id_of(w) for w in label_words]
    marker_ids = [[vocab.id_of(w) for w in ws] for ws in marker_words]
    distractor_ids = np.array([vocab.id_of(w) for w in distractor_words])

    examples = []
    for i in range(n_examples):
        rng = _example_rng(seed, i)
        tokens = rng.choice(distractor_ids, size=seq_len).tolist()
        cls = int(rng.integers(n_labels))
        pos = int(rng.integers(seq_len))
        tokens[pos] = marker_ids[cls][int(rng.integers(MARKERS_PER_CLASS))]
        examples.append(Example(id=i, input_ids=tokens,
                                label_ids=[label_ids[cls]],
                                planted_positions=(pos,)))
    train, val, test = _partition(examples)
    params = {"n_examples": n_examples, "n_labels": n_labels,
              "seq_len": seq_len, "vocab_size": vocab_size}
    return Dataset("marker_classification", seed, vocab, train, val, test, params)


def gen_choice_selection(n_examples: int = 10000, n_choices: int = 5,
                         seq_len: int = 16, vocab_size: int = 512,
                         seed: int = 0) -> Dataset:
    """Multiple-choice task whose answer word appears in the input.

    The question body hides one cue word; each cue is paired with one
    answer word, and the candidate list after the separator contains the
    paired answer plus decoys. The label is the paired answer token, so
    rationale/answer overlap is well-defined by construction.
    """
    if n_choices < 2:
        raise ConfigError("n_choices must be at least 2")
    if not 2 <= n_choices <= CUE_PAIRS:
        raise ConfigError(f"n_choices must be in [2, {CUE_PAIRS}]")
    if seq_len < 4:
        raise ConfigError("seq_len must be at least 4")
    cue_words = [f"cue{i}" for i in range(CUE_PAIRS)]
    answer_words = [f"fact{i}" for i in range(CUE_PAIRS)]
    overhead = (len(RESERVED_TOKENS) + len(CONNECTIVE_WORDS) + 2 * CUE_PAIRS)
    n_distractors = vocab_size - overhead
    if n_distractors < MIN_DISTRACTORS:
        raise ConfigError(
            f"vocab_size={vocab_size} cannot host {CUE_PAIRS} cue/answer pairs "
            f"plus distractors (need ≥ {overhead + MIN_DISTRACTORS})")
    distractor_words = [f"word{j}" for j in range(n_distractors)]
    vocab = Vocabulary.build(cue_words + answer_words + distractor_words)

    cue_ids = [vocab.id_of(w) for w in cue_words]
    answer_ids = [vocab.id_of(w) for w in answer_words]
    distractor_ids = np.array([vocab.id_of(w) for w in distractor_words])

    examples = []
    for i in range(n_examples):
        rng = _example_rng(seed, i)
        body = rng.choice(distractor_ids, size=seq_len).tolist()
        pair = int(rng.integers(CUE_PAIRS))
        cue_pos = int(rng.integers(seq_len))
        body[cue_pos] = cue_ids[pair]
        decoys = [p for p in range(CUE_PAIRS) if p != pair]
        picked = rng.choice(len(decoys), size=n_choices - 1, replace=False)
        candidates = [answer_ids[pair]] + [answer_ids[decoys[j]] for j in picked]
        order = rng.permutation(n_choices)
        candidates = [candidates[j] for j in order]
        answer_slot = candidates.index(answer_ids[pair])
        input_ids = body + [SEP_ID] + candidates
        examples.append(Example(
            id=i, input_ids=input_ids, label_ids=[answer_ids[pair]],
            choices=[[c] for c in candidates],
            planted_positions=(cue_pos, seq_len + 1 + answer_slot)))
    train, val, test = _partition(examples)
    params = {"n_examples": n_examples, "n_choices": n_choices,
              "seq_len": seq_len, "vocab_size": vocab_size}
    return Dataset("choice_selection", seed, vocab, train, val, test, params)


def planted_rule_label(task: str, example: Example, vocab: Vocabulary) -> list[int]:
    """Recompute the label from the planted tokens alone (the generator rule)."""
    if example.planted_positions is None:
        raise DataError(f"example {example.id} has no planted positions")
    planted_tokens = [vocab.token_of(example.input_ids[p])
                      for p in example.planted_positions]
    if task == "marker_classification":
        markers = [t for t in planted_tokens if t.startswith("marker")]
        if len(markers) != 1:
            raise DataError(f"example {example.id}: expected one marker token")
        cls = markers[0].removeprefix("marker").split("x")[0]
        return [vocab.id_of(f"class{cls}")]
    if task == "choice_selection":
        cues = [t for t in planted_tokens if t.startswith("cue")]
        if len(cues) != 1:
            raise DataError(f"example {example.id}: expected one cue token")
        return [vocab.id_of(f"fact{cues[0].removeprefix('cue')}")]
    raise DataError(f"unknown task: {task}")


GENERATORS = {
    "marker_classification": gen_marker_classification,
    "choice_selection": gen_choice_selection,
}


# ---------------------------------------------------------------------------
# serialization


def _example_record(ex: Example, vocab: Vocabulary) -> dict:
    rec = {"id": ex.id,
           "input": vocab.to_strings(ex.input_ids),
           "label": vocab.to_strings(ex.label_ids)}
    if ex.choices is not None:
        rec["choices"] = [vocab.to_strings(c) for c in ex.choices]
    if ex.planted_positions is not None:
        rec["planted_positions"] = list(ex.planted_positions)
    return rec


def _example_from_record(rec: dict, vocab: Vocabulary, where: str) -> Example:
    try:
        return Example(
            id=int(rec["id"]),
            input_ids=[vocab.id_of(t) for t in rec["input"]],
            label_ids=[vocab.id_of(t) for t in rec["label"]],
            choices=[[vocab.id_of(t) for t in c] for c in rec["choices"]]
            if "choices" in rec else None,
            planted_positions=tuple(rec["planted_positions"])
            if "planted_positions" in rec else None)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{where}: bad example record: {exc}") from exc


def save_dataset(dataset: Dataset, out_dir) -> None:
    """Write vocab.txt, meta.json and one JSONL file per split."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset.vocab.save(out_dir / "vocab.txt")
    meta = {"task": dataset.task, "seed": dataset.seed, "params": dataset.params,
            "splits": {"train": len(dataset.train),
                       "validation": len(dataset.validation),
                       "test": len(dataset.test)}}
    atomic_write_text(out_dir / "meta.json", json.dumps(meta, indent=2) + "\n")
    for name in ("train", "validation", "test"):
        write_jsonl(out_dir / f"{name}.jsonl",
                    (_example_record(ex, dataset.vocab) for ex in dataset.split(name)))


def load_dataset(in_dir) -> Dataset:
    in_dir = Path(in_dir)
    meta_path = in_dir / "meta.json"
    if not meta_path.exists():
        raise DataError(f"missing dataset metadata: {meta_path}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    vocab = Vocabulary.load(in_dir / "vocab.txt")
    splits = {}
    for name in ("train", "validation", "test"):
        path = in_dir / f"{name}.jsonl"
        records = read_jsonl(path)
        splits[name] = [_example_from_record(rec, vocab, f"{path}:{i + 1}")
                        for i, rec in enumerate(records)]
    ids = [ex.id for split in splits.values() for ex in split]
    if len(set(ids)) != len(ids):
        raise DataError("dataset splits are not disjoint by example id")
    return Dataset(meta["task"], meta["seed"], vocab,
                   splits["train"], splits["validation"], splits["test"],
                   meta.get("params", {}))
