"""Predictions for every task, the joint-learning Task B rule and hierarchical gating."""

from __future__ import annotations

import csv
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numcore as nc
from .checkpoint import load_model
from .data import NONE_LABEL, TASK_A, TASK_B, CleaningOptions, clean_text, label_set
from .errors import ConfigError, ShapeError
from .fusion_heads import ModelBundle
from .tokenizer import TokenBatch, Vocabulary, encode_batch

logger = logging.getLogger(__name__)

EVAL_BATCH_SIZE = 64
NOT_SEXIST_INDEX = 4


@dataclass(frozen=True)
class Prediction:
    id: str
    task: str
    probabilities: np.ndarray
    label: str

    def __post_init__(self):
        p = self.probabilities
        if (p < 0).any() or abs(float(p.sum()) - 1.0) > 1e-6:
            raise ShapeError(f"{self.id}: probabilities do not form a distribution")
        label_set(self.task).canonical(self.label)


def encode_texts(
    texts: Sequence[str],
    vocab: Vocabulary,
    max_len: int,
    cleaning: CleaningOptions | None = None,
) -> TokenBatch:
    if cleaning is not None:
        texts = [clean_text(t, cleaning) for t in texts]
    return encode_batch(texts, vocab, max_len)


def probabilities(model: ModelBundle, batch: TokenBatch, batch_size: int = EVAL_BATCH_SIZE) -> np.ndarray:
    """Softmax of the logits, evaluated in chunks without dropout or graph."""
    chunks = []
    with nc.no_grad():
        for start in range(0, len(batch), batch_size):
            part = batch.select(slice(start, start + batch_size)).trimmed()
            chunks.append(nc.softmax(model.forward(part)).data.astype(np.float64))
    if not chunks:
        return np.zeros((0, model.head_config.num_classes))
    return np.concatenate(chunks, axis=0)


def joint_b_predict(probs5: np.ndarray) -> np.ndarray | int:
    """Task-B class from a 5-way joint distribution.

    If "not sexist" (index 4) wins, the second most probable class is
    returned; this equals the argmax over the four sexist classes.
    """
    probs5 = np.asarray(probs5)
    if probs5.shape[-1] != len(TASK_B) + 1:
        raise ShapeError(f"joint prediction needs 5 probabilities, got {probs5.shape[-1]}")
    choice = np.argmax(probs5[..., :NOT_SEXIST_INDEX], axis=-1)
    return int(choice) if np.ndim(choice) == 0 else choice


def class_indices(probs: np.ndarray, task: str) -> np.ndarray:
    """Argmax per row (lowest index wins ties); joint rule for ``B_joint``."""
    if task == "B_joint":
        return np.atleast_1d(joint_b_predict(probs))
    return np.argmax(probs, axis=-1)


def _check_width(model: ModelBundle, task: str) -> None:
    expected = len(label_set(task))
    if model.head_config.num_classes != expected:
        raise ConfigError(
            f"model has {model.head_config.num_classes} classes but task {task} needs {expected}"
        )


def predict(
    model: ModelBundle, batch: TokenBatch, task: str, ids: Sequence[str] | None = None
) -> list[Prediction]:
    """One prediction per row; ``task`` is the task the model was trained for."""
    _check_width(model, task)
    labels = label_set("B" if task == "B_joint" else task)
    probs = probabilities(model, batch)
    chosen = class_indices(probs, task)
    ids = list(ids) if ids is not None else [str(i) for i in range(len(batch))]
    if len(ids) != len(batch):
        raise ShapeError(f"{len(ids)} ids for {len(batch)} rows")
    return [
        Prediction(ex_id, task, p, labels.name(int(c)))
        for ex_id, p, c in zip(ids, probs, chosen)
    ]


@dataclass
class Classifier:
    """A trained model together with the vocabulary and cleaning it was trained with."""

    model: ModelBundle
    vocab: Vocabulary
    task: str
    cleaning: CleaningOptions | None = None

    @classmethod
    def from_checkpoint(cls, path: str | Path) -> Classifier:
        loaded = load_model(path)
        cleaning = loaded.metadata.get("cleaning")
        return cls(
            loaded.bundle,
            loaded.vocab,
            loaded.task,
            CleaningOptions.model_validate(cleaning) if cleaning else None,
        )

    def encode(self, texts: Sequence[str]) -> TokenBatch:
        return encode_texts(texts, self.vocab, self.model.encoder_a_config.max_len, self.cleaning)

    def predict(self, texts: Sequence[str], ids: Sequence[str] | None = None) -> list[Prediction]:
        return predict(self.model, self.encode(texts), self.task, ids)

    @property
    def label_task(self) -> str:
        return "B" if self.task == "B_joint" else self.task


@dataclass(frozen=True)
class HierarchicalPrediction:
    id: str
    sexist: str
    category: str
    vector: str


def hierarchical_predict(
    classifiers: Mapping[str, Classifier], texts: Sequence[str], ids: Sequence[str] | None = None
) -> list[HierarchicalPrediction]:
    """Task A for every text; B and C only where A predicts sexist, "none" otherwise."""
    for task in ("A", "B", "C"):
        if task not in classifiers:
            raise ConfigError(f"hierarchical prediction needs a task {task} model")
        if classifiers[task].label_task != task:
            raise ConfigError(f"model given for task {task} was trained for {classifiers[task].task}")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(texts))]
    top = classifiers["A"].predict(texts, ids)
    gated = [i for i, p in enumerate(top) if p.label == TASK_A.labels[1]]
    category = {}
    vector = {}
    if gated:
        sub_texts = [texts[i] for i in gated]
        sub_ids = [ids[i] for i in gated]
        for i, p in zip(gated, classifiers["B"].predict(sub_texts, sub_ids)):
            category[i] = p.label
        for i, p in zip(gated, classifiers["C"].predict(sub_texts, sub_ids)):
            vector[i] = p.label
    logger.info("Gated %d of %d texts as sexist", len(gated), len(texts))
    return [
        HierarchicalPrediction(
            ids[i], p.label, category.get(i, NONE_LABEL), vector.get(i, NONE_LABEL)
        )
        for i, p in enumerate(top)
    ]


def write_predictions(
    predictions: Sequence[Prediction], path: str | Path, with_probabilities: bool = False
) -> None:
    """CSV with header ``id,task,label`` and optionally ``p0..pK-1``."""
    width = len(predictions[0].probabilities) if predictions else 0
    header = ["id", "task", "label"]
    if with_probabilities:
        header += [f"p{i}" for i in range(width)]
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for p in predictions:
            row = [p.id, p.task, p.label]
            if with_probabilities:
                row += [f"{x:.6f}" for x in p.probabilities]
            writer.writerow(row)


def write_hierarchical(predictions: Sequence[HierarchicalPrediction], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["id", "label_sexist", "label_category", "label_vector"])
        for p in predictions:
            writer.writerow([p.id, p.sexist, p.category, p.vector])
