"""Per-token importance scores from a trained model, and top-k selection.

Two gradient methods are provided. The saliency score of an input position
is the L1 norm of the gradient of the gold-token logits, averaged over all
target positions, with respect to that position's input embedding. The
integrated-gradients score accumulates gradients of the summed gold-token
log-probabilities along a straight path from a baseline to the input.

Special tokens (padding, sequence markers, separators, task prefixes) are
never eligible as rationales; their scores are reported as zero with an
excluded flag.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import EOS_ID, PAD_ID, RESERVED_IDS, Example, Vocabulary
from .errors import ConfigError, DataError
from .io_utils import read_jsonl, write_jsonl
from .model import Seq2SeqModel

METHOD_SALIENCY = "saliency"
METHOD_IG = "integrated_gradients"
METHOD_RANDOM = "random"

IG_BASELINES = ("zero_embedding", "pad_embedding")


@dataclass
class AttributionResult:
    """Importance scores over the input positions of one example."""

    example_id: int
    method: str
    scores: np.ndarray
    excluded: np.ndarray
    input_ids: list[int]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.excluded = np.asarray(self.excluded, dtype=bool)
        n = len(self.input_ids)
        if self.scores.shape != (n,) or self.excluded.shape != (n,):
            raise DataError(f"attribution arrays must have length {n}")
        if not np.all(np.isfinite(self.scores)):
            raise DataError("attribution scores must be finite")


@dataclass
class RationaleTokens:
    """Selected rationale tokens: (position, token id, score), score-ordered."""

    entries: list[tuple[int, int, float]]
    short: bool = False

    @property
    def positions(self) -> list[int]:
        return [p for p, _, _ in self.entries]

    @property
    def token_ids(self) -> list[int]:
        return [t for _, t, _ in self.entries]

    @property
    def scores(self) -> list[float]:
        return [s for _, _, s in self.entries]

    def __len__(self):
        return len(self.entries)


def _excluded_mask(input_ids) -> np.ndarray:
    return np.array([t in RESERVED_IDS for t in input_ids], dtype=bool)


def _target_ids(example: Example) -> list[int]:
    if not example.label_ids:
        raise DataError(f"example {example.id} has an empty target")
    return list(example.label_ids) + [EOS_ID]


def _input_mask(input_ids) -> np.ndarray:
    return np.array([t != PAD_ID for t in input_ids], dtype=bool)


def l1_of_mean_gradient(embeddings: ad.Tensor, gold: ad.Tensor) -> np.ndarray:
    """L1 norm per input position of the target-averaged gradient.

    ``gold`` is a vector of one scalar per target position built from
    ``embeddings``; averaging the per-position gradients equals the
    gradient of the mean, so a single backward sweep suffices.
    """
    embeddings.zero_grad()
    ad.reduce_mean(gold).backward()
    return np.abs(embeddings.grad).sum(axis=1)


def saliency_attribution(model: Seq2SeqModel, example: Example) -> AttributionResult:
    """Average gold-logit gradient per input position, reduced by L1 norm."""
    target = _target_ids(example)
    embeddings = model.embed(example.input_ids).detach(requires_grad=True)
    logits = model.forward_from_embeddings(embeddings, target,
                                           input_mask=_input_mask(example.input_ids))
    gold = ad.gather_rows(logits, target)
    scores = l1_of_mean_gradient(embeddings, gold)
    excluded = _excluded_mask(example.input_ids)
    scores[excluded] = 0.0
    return AttributionResult(example.id, METHOD_SALIENCY, scores, excluded,
                             list(example.input_ids))


def path_integrated_gradients(f, x: np.ndarray, baseline: np.ndarray,
                              steps: int) -> np.ndarray:
    """Trapezoidal path integral of grad f from ``baseline`` to ``x``.

    ``f`` maps a leaf Tensor to a scalar Tensor. Returns the per-element
    attribution matrix (x - baseline) * average path gradient; rows sum to
    f(x) - f(baseline) as steps grow (exactly, for linear f).
    """
    if steps < 2:
        raise ConfigError(f"integrated gradients needs steps >= 2, got {steps}")
    x = np.asarray(x, dtype=np.float64)
    baseline = np.asarray(baseline, dtype=np.float64)
    if x.shape != baseline.shape:
        raise DataError(f"baseline shape {baseline.shape} != input shape {x.shape}")
    delta = x - baseline
    grad_sum = np.zeros_like(x)
    for s in range(steps + 1):
        point = ad.Tensor(baseline + (s / steps) * delta, requires_grad=True)
        out = f(point)
        point.zero_grad()
        out.backward()
        weight = 0.5 if s in (0, steps) else 1.0
        grad_sum += weight * point.grad
    return delta * (grad_sum / steps)


def integrated_gradients(model: Seq2SeqModel, example: Example,
                         baseline: str = "zero_embedding",
                         steps: int = 64) -> AttributionResult:
    """Path-integrated gradients of the summed gold-token log-probabilities.

    Per-position ranking scores are absolute sums over embedding dims;
    signed totals and the completeness gap are kept in ``meta``.
    """
    if baseline not in IG_BASELINES:
        raise ConfigError(f"baseline must be one of {IG_BASELINES}, got {baseline!r}")
    target = _target_ids(example)
    mask = _input_mask(example.input_ids)
    n = len(example.input_ids)
    x = model.embed(example.input_ids).data
    if baseline == "zero_embedding":
        # Zero token content, positional component kept: attribution runs on
        # the summed encoder input, and a strictly all-zero matrix would put
        # the path start on the layer-norm singularity (zero-variance rows).
        base = x - model.params["embedding"].data[example.input_ids]
    else:
        base = model.embed([PAD_ID] * n).data

    def gold_log_prob(embeddings: ad.Tensor) -> ad.Tensor:
        logits = model.forward_from_embeddings(embeddings, target, input_mask=mask)
        log_probs = ad.log_softmax(logits, axis=-1)
        return ad.reduce_sum(ad.gather_rows(log_probs, target))

    attributions = path_integrated_gradients(gold_log_prob, x, base, steps)
    signed_totals = attributions.sum(axis=1)

    with ad.no_grad():
        f_input = gold_log_prob(ad.Tensor(x)).item()
        f_baseline = gold_log_prob(ad.Tensor(base)).item()

    scores = np.abs(signed_totals)
    excluded = _excluded_mask(example.input_ids)
    scores[excluded] = 0.0
    meta = {"signed_totals": signed_totals.tolist(),
            "attribution_total": float(attributions.sum()),
            "f_input": f_input, "f_baseline": f_baseline,
            "baseline": baseline, "steps": steps}
    return AttributionResult(example.id, METHOD_IG, scores, excluded,
                             list(example.input_ids), meta)


def top_k_tokens(attr: AttributionResult, k: int) -> RationaleTokens:
    """The k eligible positions with highest scores.

    Ordered by descending score, ties by ascending position. Duplicate
    surface tokens are kept: positions, not strings, are distinct.
    """
    if k < 1:
        raise ConfigError(f"k must be at least 1, got {k}")
    eligible = [p for p in range(len(attr.input_ids)) if not attr.excluded[p]]
    if not eligible:
        raise DataError(f"example {attr.example_id} has no eligible positions")
    ranked = sorted(eligible, key=lambda p: (-attr.scores[p], p))[:k]
    entries = [(p, attr.input_ids[p], float(attr.scores[p])) for p in ranked]
    return RationaleTokens(entries, short=len(entries) < k)


def random_attribution(example: Example, k: int, seed: int) -> RationaleTokens:
    """k distinct eligible positions sampled uniformly, listed in input order.

    The draw is keyed on (seed, example id) so dataset-level sampling is
    reproducible and independent of iteration order. With fewer eligible
    positions than k, all of them are returned and the result is flagged
    short.
    """
    if k < 1:
        raise ConfigError(f"k must be at least 1, got {k}")
    excluded = _excluded_mask(example.input_ids)
    eligible = [p for p in range(len(example.input_ids)) if not excluded[p]]
    if not eligible:
        raise DataError(f"example {example.id} has no eligible positions")
    if len(eligible) <= k:
        picked = sorted(eligible)
        short = len(eligible) < k
    else:
        rng = np.random.default_rng(np.random.SeedSequence([seed, example.id]))
        picked = sorted(rng.choice(len(eligible), size=k, replace=False).tolist())
        picked = [eligible[i] for i in picked]
        short = False
    entries = [(p, example.input_ids[p], 0.0) for p in picked]
    return RationaleTokens(entries, short=short)


ATTRIBUTORS = {
    METHOD_SALIENCY: saliency_attribution,
    METHOD_IG: integrated_gradients,
}


# ---------------------------------------------------------------------------
# attribution dump


def write_attribution_dump(path, results_with_topk, vocab: Vocabulary) -> None:
    """One JSONL record per example: scores plus the chosen top tokens."""
    records = []
    for attr, topk in results_with_topk:
        records.append({
            "example_id": attr.example_id,
            "method": attr.method,
            "scores": [float(s) for s in attr.scores],
            "topk": [[p, vocab.token_of(t), s] for p, t, s in topk.entries],
        })
    write_jsonl(path, records)


def read_attribution_dump(path) -> list[dict]:
    return read_jsonl(path)
