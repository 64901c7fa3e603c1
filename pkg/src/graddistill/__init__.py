"""Attribution-guided knowledge distillation for tiny seq2seq transformers.

A teacher model's input-gradient attributions pick the most influential
input tokens; a student is trained to generate those tokens as rationales
alongside the task label, weighting the two objectives with a combined
loss. Synthetic tasks with planted decisive tokens make the whole chain
checkable end to end.
"""

from .autodiff import Tensor, grad_check, no_grad
from .attribution import (AttributionResult, RationaleTokens,
                          integrated_gradients, random_attribution,
                          saliency_attribution, top_k_tokens)
from .data import (Dataset, Example, Vocabulary, gen_choice_selection,
                   gen_marker_classification, load_dataset, save_dataset,
                   tokenize, detokenize)
from .distill import (RationaleExample, TrainConfig, as_rationale_examples,
                      build_rationale_dataset, combined_loss,
                      rationale_targets, train)
from .errors import (ConfigError, DataError, GradDistillError,
                     TrainingDivergedError)
from .estimators import RationaleDistiller, Seq2SeqEstimator, TokenAttributor
from .evaluation import (EvalReport, SimilarityReport, control_comparison,
                         evaluate, k_sweep, overlap_with_truth,
                         prediction_similarity, random_overlap_rate)
from .model import ModelConfig, Seq2SeqModel

__version__ = "0.1.0"

__all__ = [
    "Tensor", "grad_check", "no_grad",
    "AttributionResult", "RationaleTokens", "integrated_gradients",
    "random_attribution", "saliency_attribution", "top_k_tokens",
    "Dataset", "Example", "Vocabulary", "gen_choice_selection",
    "gen_marker_classification", "load_dataset", "save_dataset",
    "tokenize", "detokenize",
    "RationaleExample", "TrainConfig", "as_rationale_examples",
    "build_rationale_dataset", "combined_loss", "rationale_targets", "train",
    "ConfigError", "DataError", "GradDistillError", "TrainingDivergedError",
    "RationaleDistiller", "Seq2SeqEstimator", "TokenAttributor",
    "EvalReport", "SimilarityReport", "control_comparison", "evaluate",
    "k_sweep", "overlap_with_truth", "prediction_similarity",
    "random_overlap_rate",
    "ModelConfig", "Seq2SeqModel",
]
