"""Input-validation helpers for the estimator API."""

from __future__ import annotations

from .data import Example, Vocabulary
from .errors import DataError


def check_examples(X, vocab_size: int | None = None) -> list[Example]:
    """Validate a list of Examples (token ids in range, non-empty)."""
    if not isinstance(X, (list, tuple)) or not X:
        raise DataError("expected a non-empty list of Examples")
    for ex in X:
        if not isinstance(ex, Example):
            raise DataError(f"expected Example instances, got {type(ex).__name__}")
        if not ex.input_ids or not ex.label_ids:
            raise DataError(f"example {ex.id} has empty input or label")
        if vocab_size is not None:
            bad = [t for t in list(ex.input_ids) + list(ex.label_ids)
                   if not 0 <= t < vocab_size]
            if bad:
                raise DataError(f"example {ex.id} has token ids outside "
                                f"[0, {vocab_size}): {bad}")
    return list(X)


def check_vocabulary(vocab) -> Vocabulary:
    if not isinstance(vocab, Vocabulary):
        raise DataError(f"expected a Vocabulary, got {type(vocab).__name__}")
    return vocab


def examples_from_arrays(inputs, labels, ids=None) -> list[Example]:
    """Zip separate input/label id sequences into Examples."""
    if len(inputs) != len(labels):
        raise DataError("inputs and labels must have the same length")
    ids = ids if ids is not None else range(len(inputs))
    return [Example(i, list(x), list(y))
            for i, x, y in zip(ids, inputs, labels)]
