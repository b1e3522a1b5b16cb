"""Supervised training for Tasks A/B/C and joint Task B: loss, AdamW, loop, selection."""

from __future__ import annotations

import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from tqdm import tqdm

from . import numcore as nc
from .checkpoint import save_model
from .config import OptimizerConfig, TrainConfig
from .data import CleaningOptions, DatasetSplit, LabeledExample, label_set
from .errors import ConfigError, DataFormatError, NumericalError, ShapeError
from .fusion_heads import ModelBundle
from .inference import class_indices, encode_texts, probabilities
from .metrics import confusion, macro_f1
from .numcore import ParamStore, Tensor
from .tokenizer import Vocabulary

logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "EpochRecord",
    "TrainLog",
    "AdamWState",
    "cross_entropy",
    "adamw_step",
    "select_training_set",
    "select_eval_set",
    "class_weights",
    "train",
]


def cross_entropy(logits: Tensor, targets: Sequence[int] | np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Batched mean of ``-log softmax(logits)[target]``."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    classes = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= classes):
        raise ShapeError(f"class index out of range for {classes} classes")
    return nc.cross_entropy(logits, targets, weights=weights)


@dataclass
class AdamWState:
    """First/second moments per parameter name and the shared step count."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros(cls, params: Mapping[str, Tensor]) -> AdamWState:
        return cls(
            {k: np.zeros_like(p.data) for k, p in params.items()},
            {k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adamw_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray | None],
    state: AdamWState,
    config: OptimizerConfig,
) -> AdamWState:
    """One AdamW update, in place. Parameters without a gradient are left alone.

    Weight decay is decoupled: ``p -= lr * wd * p`` before the adaptive step.
    """
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    lr = config.learning_rate
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        if config.weight_decay:
            p.data -= lr * config.weight_decay * p.data
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
    return state


def _indices(examples: Sequence[LabeledExample], task: str) -> np.ndarray:
    labels = label_set(task)
    return np.array([labels.index(ex.label_for(task)) for ex in examples], dtype=np.int64)


def select_training_set(
    examples: Sequence[LabeledExample] | DatasetSplit, task: str
) -> tuple[list[LabeledExample], np.ndarray]:
    """Examples and class indices used to train ``task``.

    A and B_joint use every example; B and C only the sexist ones.
    """
    if isinstance(examples, DatasetSplit):
        examples = examples.train
    label_set(task)
    if task in ("B", "C"):
        chosen = [ex for ex in examples if ex.is_sexist]
        if not chosen:
            raise DataFormatError(f"no sexist examples to train task {task}")
    else:
        chosen = list(examples)
    return chosen, _indices(chosen, task)


def select_eval_set(
    examples: Sequence[LabeledExample], task: str
) -> tuple[list[LabeledExample], np.ndarray, str]:
    """Examples, gold indices and the label task they are scored in.

    B and C (joint or not) are scored on the gold-sexist subset.
    """
    label_task = "B" if task == "B_joint" else task
    if label_task in ("B", "C"):
        chosen = [ex for ex in examples if ex.is_sexist]
    else:
        chosen = list(examples)
    return chosen, _indices(chosen, label_task), label_task


def class_weights(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Inverse-frequency weights ``n / (K * count)``; absent classes get 1."""
    counts = np.bincount(labels, minlength=num_classes).astype(np.float64)
    weights = np.ones(num_classes)
    present = counts > 0
    weights[present] = len(labels) / (num_classes * counts[present])
    return weights


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    dev_macro_f1: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    best_checkpoint: str | None = None

    @property
    def best_macro_f1(self) -> float | None:
        if self.best_epoch is None:
            return None
        return self.records[self.best_epoch - 1].dev_macro_f1

    def write(self, path: str | Path) -> None:
        """One ``epoch,train_loss,dev_macro_f1`` line per epoch after a header."""
        with open(path, "w", encoding="utf-8") as f:
            f.write("epoch,train_loss,dev_macro_f1\n")
            for r in self.records:
                f.write(f"{r.epoch},{r.train_loss:.6f},{r.dev_macro_f1:.6f}\n")


def evaluate_macro_f1(
    bundle: ModelBundle, batch, golds: np.ndarray, train_task: str, label_task: str
) -> float:
    preds = class_indices(probabilities(bundle, batch), train_task)
    return macro_f1(confusion(golds.tolist(), preds.tolist(), label_set(label_task)))


def train(
    bundle: ModelBundle,
    split: DatasetSplit,
    config: TrainConfig,
    vocab: Vocabulary,
    out_path: str | Path | None = None,
    metadata: Mapping[str, Any] | None = None,
    log_path: str | Path | None = None,
    cleaning: CleaningOptions | None = None,
) -> TrainLog:
    """Fine-tune ``bundle`` in place and keep the weights of the best dev epoch.

    Batch order for epoch ``e`` is a permutation drawn from ``make_rng(seed, e)``;
    ties on dev macro F1 keep the earlier epoch.
    """
    if bundle.head_config.num_classes != len(label_set(config.task)):
        raise ConfigError(
            f"head has {bundle.head_config.num_classes} classes, task {config.task} needs "
            f"{len(label_set(config.task))}"
        )
    train_examples, labels = select_training_set(split.train, config.task)
    dev_examples, dev_golds, label_task = select_eval_set(split.dev, config.task)
    if not dev_examples:
        raise DataFormatError("dev set is empty for this task")

    max_len = bundle.encoder_a_config.max_len
    train_batch = encode_texts([ex.text for ex in train_examples], vocab, max_len, cleaning)
    dev_batch = encode_texts([ex.text for ex in dev_examples], vocab, max_len, cleaning)

    trainable = bundle.params.sub("head.") if config.freeze_encoders else bundle.params
    optimizer = config.optimizer()
    state = AdamWState.zeros(trainable)
    weights = class_weights(labels, bundle.head_config.num_classes) if config.class_weighting else None

    log = TrainLog()
    best_state = bundle.params.state_dict()
    best_f1 = -math.inf
    n = len(train_examples)
    logger.info(
        "Training task %s on %d examples (%d dev) for %d epochs",
        config.task, n, len(dev_examples), config.epochs,
    )

    epochs = tqdm(range(1, config.epochs + 1), desc="epochs", disable=not config.progress)
    for epoch in epochs:
        order = nc.make_rng(config.seed, epoch).permutation(n)
        dropout_rng = nc.make_rng(config.seed, epoch, 1)
        losses = []
        for b, start in enumerate(range(0, n, config.batch_size)):
            rows = order[start : start + config.batch_size]
            batch = train_batch.select(rows).trimmed()
            bundle.params.zero_grad()
            logits = bundle.forward(batch, dropout_rng, config.freeze_encoders)
            loss = cross_entropy(logits, labels[rows], weights)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"epoch {epoch}, batch {b}: loss is {value}")
            loss.backward()
            adamw_step(trainable, trainable.grads(), state, optimizer)
            losses.append(value)

        f1 = evaluate_macro_f1(bundle, dev_batch, dev_golds, config.task, label_task)
        record = EpochRecord(epoch, float(np.mean(losses)) if losses else 0.0, f1)
        log.records.append(record)
        logger.info(
            "epoch=%d train_loss=%.4f dev_macro_f1=%.4f", epoch, record.train_loss, f1
        )
        if f1 > best_f1:
            best_f1, log.best_epoch = f1, epoch
            best_state = bundle.params.state_dict()

    bundle.params.load_state_dict(best_state)
    if log.best_epoch is not None:
        logger.info("Best epoch %d with dev macro F1 %.4f", log.best_epoch, best_f1)
    if out_path is not None:
        meta = dict(metadata or {})
        meta.update(task=config.task, best_epoch=log.best_epoch)
        if cleaning is not None:
            meta["cleaning"] = cleaning.model_dump()
        save_model(out_path, bundle, vocab, meta)
        log.best_checkpoint = str(out_path)
    if log_path is not None:
        log.write(log_path)
    return log
