"""Masked-language-model domain-adaptive pretraining over an unlabeled corpus."""

from __future__ import annotations

import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from tqdm import tqdm

from . import numcore as nc
from .config import EncoderConfig, PretrainConfig
from .encoder import encode_all_layers, init_encoder_params
from .errors import ConfigError, DataFormatError, NumericalError
from .finetune import AdamWState, adamw_step
from .numcore import IGNORE_INDEX, ParamStore, Tensor
from .tokenizer import (
    CLS_ID,
    FIRST_REGULAR_ID,
    MASK_ID,
    PAD_ID,
    SEP_ID,
    TokenBatch,
    Vocabulary,
    encode_batch,
)

logger = logging.getLogger(__name__)

PROTECTED_IDS = (PAD_ID, CLS_ID, SEP_ID, MASK_ID)
MASK_SHARE = 0.8
RANDOM_SHARE = 0.1
EVAL_BATCH_SIZE = 64
MLM_BIAS = "mlm.bias"


@dataclass(frozen=True)
class MlmBatch:
    """Corrupted inputs; ``targets`` hold original ids at corrupted positions, -100 elsewhere."""

    input_ids: np.ndarray
    targets: np.ndarray
    attention_mask: np.ndarray

    @property
    def tokens(self) -> TokenBatch:
        return TokenBatch(self.input_ids, self.attention_mask)

    @property
    def num_targets(self) -> int:
        return int((self.targets != IGNORE_INDEX).sum())


def mask_tokens(
    batch: TokenBatch, rate: float, rng: np.random.Generator, vocab_size: int
) -> MlmBatch:
    """Select each non-special position with probability ``rate``.

    Of the selected positions 80% become [MASK], 10% a uniformly drawn
    regular token and 10% stay unchanged.
    """
    if not 0.0 <= rate <= 1.0:
        raise ConfigError(f"mask rate must be in [0, 1], got {rate}")
    ids = batch.ids
    eligible = ~np.isin(ids, PROTECTED_IDS)
    selected = eligible & (rng.random(ids.shape) < rate)
    action = rng.random(ids.shape)
    if vocab_size > FIRST_REGULAR_ID:
        replacement = rng.integers(FIRST_REGULAR_ID, vocab_size, size=ids.shape)
    else:
        replacement = np.full(ids.shape, MASK_ID)
    corrupted = ids.copy()
    corrupted[selected & (action < MASK_SHARE)] = MASK_ID
    swap = selected & (action >= MASK_SHARE) & (action < MASK_SHARE + RANDOM_SHARE)
    corrupted[swap] = replacement[swap]
    targets = np.where(selected, ids, IGNORE_INDEX)
    return MlmBatch(corrupted, targets, batch.attention_mask)


def mlm_logits(hidden: Tensor, embeddings: Tensor, bias: Tensor) -> Tensor:
    """Vocabulary logits ``H @ E^T + b``; the output projection is the input embedding table."""
    return hidden @ nc.transpose(embeddings) + bias


def mlm_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy over target positions; 0 (with a warning) when there are none."""
    targets = np.asarray(targets)
    if not (targets != IGNORE_INDEX).any():
        logger.warning("MLM batch without masked targets; loss defined as 0")
    return nc.cross_entropy(logits, targets, ignore_index=IGNORE_INDEX)


def perplexity(mean_nll: float) -> float:
    if not math.isfinite(mean_nll):
        raise NumericalError(f"perplexity of a non-finite loss {mean_nll}")
    return math.exp(mean_nll)


@dataclass(frozen=True)
class DaptEpoch:
    kind: str
    epoch: int
    train_loss: float
    eval_loss: float

    @property
    def perplexity(self) -> float:
        """NaN when the held-out pass had no masked targets."""
        if math.isnan(self.eval_loss):
            return math.nan
        return perplexity(self.eval_loss)


@dataclass
class DaptResult:
    """Pretrained encoder parameters per attention kind (``mlm.bias`` included)."""

    encoders: dict[str, ParamStore]
    configs: dict[str, EncoderConfig]
    log: list[DaptEpoch] = field(default_factory=list)

    def final_perplexity(self, kind: str) -> float | None:
        records = [r for r in self.log if r.kind == kind]
        return records[-1].perplexity if records else None

    def write_log(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write("epoch,train_loss,eval_loss,perplexity,kind\n")
            for r in self.log:
                eval_loss = "" if math.isnan(r.eval_loss) else f"{r.eval_loss:.6f}"
                ppl = "" if math.isnan(r.perplexity) else f"{r.perplexity:.6f}"
                f.write(f"{r.epoch},{r.train_loss:.6f},{eval_loss},{ppl},{r.kind}\n")


def _held_out(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    order = nc.make_rng(seed).permutation(n)
    if n < 2:
        return order, order
    n_eval = min(max(1, math.floor(n * fraction)), n - 1)
    return order[n_eval:], order[:n_eval]


def init_pretrain_params(config: EncoderConfig, rng: np.random.Generator) -> ParamStore:
    params = init_encoder_params(config, rng)
    params.add(MLM_BIAS, np.zeros(config.vocab_size))
    return params


def _mlm_forward(
    mb: MlmBatch, config: EncoderConfig, params: ParamStore, rng: np.random.Generator | None
) -> Tensor:
    states = encode_all_layers(mb.tokens, config, params, rng)
    logits = mlm_logits(states.last, params["token_embeddings"], params[MLM_BIAS])
    return mlm_loss(logits, mb.targets)


def evaluate_mlm(
    tokens: TokenBatch, config: EncoderConfig, params: ParamStore, rate: float, seed: int
) -> float:
    """Target-weighted mean NLL with a fixed masking draw; NaN when nothing was masked."""
    rng = nc.make_rng(seed, 0xE7A1)
    total, count = 0.0, 0
    with nc.no_grad():
        for start in range(0, len(tokens), EVAL_BATCH_SIZE):
            part = tokens.select(slice(start, start + EVAL_BATCH_SIZE)).trimmed()
            mb = mask_tokens(part, rate, rng, config.vocab_size)
            if mb.num_targets == 0:
                continue
            value = _mlm_forward(mb, config, params, None).item()
            if not math.isfinite(value):
                raise NumericalError(f"held-out MLM loss is {value}")
            total += value * mb.num_targets
            count += mb.num_targets
    if not count:
        logger.warning("Held-out MLM pass drew no masked targets; eval loss is missing")
        return math.nan
    return total / count


def _pretrain_one(
    kind_index: int,
    config: EncoderConfig,
    params: ParamStore,
    train_tokens: TokenBatch,
    eval_tokens: TokenBatch,
    settings: PretrainConfig,
) -> list[DaptEpoch]:
    kind = config.attention_kind
    optimizer = settings.optimizer()
    state = AdamWState.zeros(params)
    log = []
    n = len(train_tokens)
    epochs = tqdm(range(1, settings.epochs + 1), desc=f"dapt {kind}", disable=not settings.progress)
    for epoch in epochs:
        order = nc.make_rng(settings.seed, kind_index, epoch).permutation(n)
        mask_rng = nc.make_rng(settings.seed, kind_index, epoch, 1)
        dropout_rng = nc.make_rng(settings.seed, kind_index, epoch, 2)
        losses = []
        for b, start in enumerate(range(0, n, settings.batch_size)):
            part = train_tokens.select(order[start : start + settings.batch_size]).trimmed()
            mb = mask_tokens(part, settings.mask_rate, mask_rng, config.vocab_size)
            if mb.num_targets == 0:
                logger.debug("%s epoch %d batch %d has no masked tokens; skipped", kind, epoch, b)
                continue
            params.zero_grad()
            loss = _mlm_forward(mb, config, params, dropout_rng)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"{kind} pretraining epoch {epoch}, batch {b}: loss is {value}")
            loss.backward()
            adamw_step(params, params.grads(), state, optimizer)
            losses.append(value)
        eval_loss = evaluate_mlm(eval_tokens, config, params, settings.mask_rate, settings.seed)
        record = DaptEpoch(kind, epoch, float(np.mean(losses)) if losses else 0.0, eval_loss)
        log.append(record)
        logger.info(
            "%s epoch=%d train_loss=%.4f eval_loss=%.4f perplexity=%.3f",
            kind, epoch, record.train_loss, eval_loss, record.perplexity,
        )
    return log


def dapt_run(
    corpus: Sequence[str],
    vocab: Vocabulary,
    encoder_config: EncoderConfig,
    settings: PretrainConfig,
    params: Mapping[str, ParamStore] | None = None,
) -> DaptResult:
    """Continue MLM training of one encoder per attention kind in ``settings.kinds``.

    ``params`` supplies starting weights per kind; missing kinds are
    initialised from ``make_rng(seed, kind_index)``. The held-out split is a
    seeded permutation, identical across kinds.
    """
    if not corpus:
        raise DataFormatError("pretraining corpus is empty")
    if not settings.kinds:
        raise ConfigError("no encoder kinds to pretrain")
    tokens = encode_batch(list(corpus), vocab, encoder_config.max_len)
    train_rows, eval_rows = _held_out(len(corpus), settings.eval_fraction, settings.seed)
    train_tokens, eval_tokens = tokens.select(train_rows), tokens.select(eval_rows)
    logger.info(
        "Pretraining on %d lines (%d held out), vocabulary %d",
        len(train_rows), len(eval_rows), vocab.size,
    )

    result = DaptResult({}, {})
    for i, kind in enumerate(settings.kinds):
        config = encoder_config.with_kind(kind).with_vocab(vocab.size)
        store = (params or {}).get(kind)
        if store is None:
            store = init_pretrain_params(config, nc.make_rng(settings.seed, i))
        elif MLM_BIAS not in store:
            store.add(MLM_BIAS, np.zeros(config.vocab_size))
        result.log.extend(_pretrain_one(i, config, store, train_tokens, eval_tokens, settings))
        result.encoders[kind] = store
        result.configs[kind] = config
    return result
