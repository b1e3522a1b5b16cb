"""Shared fixtures: tiny vocabularies and encoders, 64-bit mode, reference matrices, datasets."""

import numpy as np
import pytest

from edos import numcore as nc
from edos.config import EncoderConfig, HeadConfig
from edos.data import TASK_A, TASK_B, SyntheticSpec, generate_synthetic, save_split, split_dataset
from edos.metrics import ConfusionMatrix
from edos.tokenizer import Vocabulary, encode_batch

TINY_WORDS = ["the", "cat", "sat", "on", "mat", "dog", "ran", "far", "big", "red"]

TASK_A_MATRIX = [[2909, 121], [346, 624]]
TASK_B_MATRIX = [
    [62, 11, 12, 4],
    [16, 303, 107, 28],
    [11, 112, 199, 11],
    [9, 27, 12, 46],
]


@pytest.fixture
def float64():
    """Create tensors in 64-bit precision for the duration of the test."""
    with nc.float64():
        yield


@pytest.fixture
def tiny_vocab():
    return Vocabulary(TINY_WORDS)


@pytest.fixture
def tiny_batch(tiny_vocab):
    """Two rows of length 8; the second row is padded after five positions."""
    return encode_batch(["the cat sat on the mat", "dog ran far"], tiny_vocab, max_len=8)


def make_encoder_config(kind="absolute", vocab_size=16, **overrides):
    values = dict(
        n_layers=2,
        n_heads=2,
        d_model=8,
        d_ff=16,
        vocab_size=vocab_size,
        max_len=12,
        attention_kind=kind,
        relative_clip=2,
        dropout=0.0,
    )
    values.update(overrides)
    return EncoderConfig(**values)


def make_head_config(variant, num_classes=2, **overrides):
    values = dict(variant=variant, branch_hidden=[6], trunk_hidden=[5], num_classes=num_classes, dropout=0.0)
    values.update(overrides)
    return HeadConfig(**values)


@pytest.fixture
def encoder_config(tiny_vocab):
    def _make(kind="absolute", **overrides):
        return make_encoder_config(kind, tiny_vocab.size, **overrides)

    return _make


@pytest.fixture
def task_a_matrix():
    return ConfusionMatrix(np.array(TASK_A_MATRIX), TASK_A.labels)


@pytest.fixture
def task_b_matrix():
    return ConfusionMatrix(np.array(TASK_B_MATRIX), TASK_B.labels)


@pytest.fixture
def matrix_file(tmp_path):
    """Write a matrix as CSV and return its path."""

    def _write(rows, name="matrix.csv", header=None):
        path = tmp_path / name
        lines = [",".join(header)] if header else []
        lines += [",".join(str(x) for x in row) for row in rows]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    return _write


@pytest.fixture
def small_examples():
    return generate_synthetic(SyntheticSpec(total_count=120, rng_seed=3, min_words=3, max_words=6))


@pytest.fixture
def small_split(small_examples):
    return split_dataset(small_examples, seed=3)


@pytest.fixture
def dataset_dir(tmp_path, small_split):
    directory = tmp_path / "data"
    save_split(small_split, directory)
    return directory
