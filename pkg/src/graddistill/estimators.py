"""Scikit-learn style wrappers around the model, attribution and training.

These estimators make the pipeline compose with the wider ecosystem
(``get_params``/``set_params``, ``clone``, pipelines): a trainable
sequence-to-sequence estimator, an attribution transformer that turns
examples into rationale-augmented examples, and a distiller that runs the
teacher-to-student procedure end to end.

X is a list of :class:`~graddistill.data.Example` throughout; labels live
inside the examples, so ``y`` is accepted but ignored, as with text
vectorizers.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .data import EOS_ID, LABEL_ID
from .distill import (METHOD_TO_SOURCE, RationaleExample, TrainConfig,
                      as_rationale_examples, build_rationale_dataset, train)
from .errors import ConfigError
from .model import ModelConfig, Seq2SeqModel
from .validation import check_examples


def _check_fitted(estimator, attribute):
    if getattr(estimator, attribute, None) is None:
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit first.")


class Seq2SeqEstimator(BaseEstimator):
    """Trainable sequence-to-sequence model with an exact-match score.

    Accepts plain Examples (standard fine-tuning) or RationaleExamples
    (combined-objective training). ``predict`` returns generated label id
    sequences; ``score`` is exact-match accuracy.
    """

    def __init__(self, vocab_size=None, d_model=64, n_heads=4, n_layers_enc=2,
                 n_layers_dec=2, d_ff=256, max_seq_len=64, learning_rate=5e-4,
                 epochs=10, batch_size=16, lambda_=0.5, k=5,
                 target_mode="dual", seed=0):
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_layers_enc = n_layers_enc
        self.n_layers_dec = n_layers_dec
        self.d_ff = d_ff
        self.max_seq_len = max_seq_len
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.lambda_ = lambda_
        self.k = k
        self.target_mode = target_mode
        self.seed = seed

    def _model_config(self, X) -> ModelConfig:
        vocab_size = self.vocab_size
        if vocab_size is None:
            highest = max(max(list(ex.input_ids) + list(ex.label_ids))
                          for ex in X)
            vocab_size = highest + 1
        return ModelConfig(vocab_size=vocab_size, d_model=self.d_model,
                           n_heads=self.n_heads, n_layers_enc=self.n_layers_enc,
                           n_layers_dec=self.n_layers_dec, d_ff=self.d_ff,
                           max_seq_len=self.max_seq_len, seed=self.seed)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, epochs=self.epochs,
                           batch_size=self.batch_size, lambda_=self.lambda_,
                           k=self.k, seed=self.seed,
                           target_mode=self.target_mode)

    def fit(self, X, y=None):
        if X and isinstance(X[0], RationaleExample):
            data = list(X)
            examples = [rx.example for rx in data]
        else:
            examples = check_examples(X)
            data = as_rationale_examples(examples, k=self.k)
        config = self._model_config(examples)
        check_examples(examples, vocab_size=config.vocab_size)
        self.model_ = Seq2SeqModel(config)
        self.history_ = train(self.model_, data, self._train_config())
        self.prefixed_ = any(rx.has_rationale for rx in data) \
            and self.target_mode == "dual"
        return self

    def _eval_mode(self) -> str:
        if not self.prefixed_:
            return "plain"
        return "dual" if self.target_mode == "dual" else "concatenated"

    def predict(self, X) -> list[list[int]]:
        _check_fitted(self, "model_")
        outputs = []
        for ex in check_examples(X, vocab_size=self.model_.config.vocab_size):
            inputs = [LABEL_ID] + list(ex.input_ids) if self.prefixed_ \
                else list(ex.input_ids)
            out = self.model_.generate(
                inputs, max_len=min(len(ex.label_ids) + 2,
                                    self.model_.config.max_seq_len))
            if out and out[-1] == EOS_ID:
                out = out[:-1]
            outputs.append(out)
        return outputs

    def score(self, X, y=None) -> float:
        _check_fitted(self, "model_")
        predictions = self.predict(X)
        hits = sum(pred == list(ex.label_ids)
                   for pred, ex in zip(predictions, X))
        return hits / len(X)


class TokenAttributor(BaseEstimator, TransformerMixin):
    """Transformer from Examples to rationale-augmented examples.

    ``model`` is the fitted teacher (a Seq2SeqModel or a fitted
    Seq2SeqEstimator); ``transform`` attaches its top-k attributed tokens.
    """

    def __init__(self, model=None, method="saliency", k=5, ig_steps=64,
                 ig_baseline="zero_embedding", seed=0):
        self.model = model
        self.method = method
        self.k = k
        self.ig_steps = ig_steps
        self.ig_baseline = ig_baseline
        self.seed = seed

    def _teacher(self) -> Seq2SeqModel:
        model = self.model
        if isinstance(model, Seq2SeqEstimator):
            _check_fitted(model, "model_")
            model = model.model_
        if not isinstance(model, Seq2SeqModel):
            raise ConfigError("TokenAttributor needs a trained teacher model")
        return model

    def fit(self, X=None, y=None):
        if self.method not in METHOD_TO_SOURCE:
            raise ConfigError(f"unknown attribution method: {self.method!r}")
        self._teacher()
        return self

    def transform(self, X) -> list[RationaleExample]:
        if self.method not in METHOD_TO_SOURCE:
            raise ConfigError(f"unknown attribution method: {self.method!r}")
        teacher = self._teacher()
        examples = check_examples(X, vocab_size=teacher.config.vocab_size)
        return build_rationale_dataset(teacher, examples, self.k, self.method,
                                       seed=self.seed,
                                       ig_baseline=self.ig_baseline,
                                       ig_steps=self.ig_steps)


class RationaleDistiller(BaseEstimator):
    """End-to-end distillation: extract teacher rationales, train a student.

    The teacher must already be fitted. Student hyperparameters mirror
    Seq2SeqEstimator's; the distiller exposes the student's predict/score.
    """

    def __init__(self, teacher=None, method="saliency", k=5, lambda_=0.5,
                 target_mode="dual", d_model=32, n_heads=4, n_layers_enc=1,
                 n_layers_dec=1, d_ff=128, max_seq_len=64, learning_rate=5e-4,
                 epochs=10, batch_size=16, seed=0, ig_steps=64,
                 ig_baseline="zero_embedding"):
        self.teacher = teacher
        self.method = method
        self.k = k
        self.lambda_ = lambda_
        self.target_mode = target_mode
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_layers_enc = n_layers_enc
        self.n_layers_dec = n_layers_dec
        self.d_ff = d_ff
        self.max_seq_len = max_seq_len
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.ig_steps = ig_steps
        self.ig_baseline = ig_baseline

    def fit(self, X, y=None):
        attributor = TokenAttributor(model=self.teacher, method=self.method,
                                     k=self.k, ig_steps=self.ig_steps,
                                     ig_baseline=self.ig_baseline,
                                     seed=self.seed)
        rationale_data = attributor.transform(X) if self.method != "none" \
            else as_rationale_examples(check_examples(X), k=self.k)
        teacher_model = attributor._teacher() if self.method != "none" else None
        vocab_size = teacher_model.config.vocab_size if teacher_model \
            else max(max(ex.input_ids + ex.label_ids) for ex in X) + 1
        self.student_ = Seq2SeqEstimator(
            vocab_size=vocab_size, d_model=self.d_model, n_heads=self.n_heads,
            n_layers_enc=self.n_layers_enc, n_layers_dec=self.n_layers_dec,
            d_ff=self.d_ff, max_seq_len=self.max_seq_len,
            learning_rate=self.learning_rate, epochs=self.epochs,
            batch_size=self.batch_size, lambda_=self.lambda_, k=self.k,
            target_mode=self.target_mode, seed=self.seed)
        self.student_.fit(rationale_data)
        self.rationale_data_ = rationale_data
        return self

    def predict(self, X):
        _check_fitted(self, "student_")
        return self.student_.predict(X)

    def score(self, X, y=None) -> float:
        _check_fitted(self, "student_")
        return self.student_.score(X)
