"""Shared fixtures: small datasets and trained teachers, built once per run."""

import pytest

from graddistill.data import gen_choice_selection, gen_marker_classification
from graddistill.distill import TrainConfig, as_rationale_examples, train
from graddistill.model import ModelConfig, Seq2SeqModel


def small_model_config(vocab_size, seed=0):
    return ModelConfig(vocab_size=vocab_size, d_model=32, n_heads=4,
                       n_layers_enc=1, n_layers_dec=1, d_ff=64,
                       max_seq_len=32, seed=seed)


def fit_teacher(dataset, seed=0, epochs=14, learning_rate=0.5):
    teacher = Seq2SeqModel(small_model_config(len(dataset.vocab), seed=seed))
    config = TrainConfig(learning_rate=learning_rate, epochs=epochs,
                         batch_size=16, lambda_=0.0, seed=seed)
    train(teacher, as_rationale_examples(dataset.train), config)
    return teacher


@pytest.fixture(scope="session")
def marker_dataset():
    return gen_marker_classification(n_examples=600, n_labels=3, seq_len=12,
                                     vocab_size=96, seed=101)


@pytest.fixture(scope="session")
def choice_dataset():
    return gen_choice_selection(n_examples=600, n_choices=4, seq_len=12,
                                vocab_size=96, seed=102)


@pytest.fixture(scope="session")
def choice_teacher(choice_dataset):
    return fit_teacher(choice_dataset, seed=3)


@pytest.fixture(scope="session")
def marker_teacher(marker_dataset):
    return fit_teacher(marker_dataset, seed=4)
