"""Word-level vocabulary and fixed-length encoding with special tokens."""

from __future__ import annotations

import logging
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

SPECIAL_TOKENS = ("[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]", "<link>")
PAD_ID, CLS_ID, SEP_ID, MASK_ID, UNK_ID, LINK_ID = range(len(SPECIAL_TOKENS))
FIRST_REGULAR_ID = len(SPECIAL_TOKENS)
DEFAULT_MAX_LEN = 64

_SILENT_IDS = frozenset((PAD_ID, CLS_ID, SEP_ID, MASK_ID))


def tokenize(text: str) -> list[str]:
    return text.lower().split()


class Vocabulary:
    """Immutable token/id bijection; specials occupy ids 0-5."""

    def __init__(self, tokens: Iterable[str]):
        self._tokens = SPECIAL_TOKENS + tuple(tokens)
        self._ids = {token: i for i, token in enumerate(self._tokens)}
        if len(self._ids) != len(self._tokens):
            raise ConfigError("vocabulary tokens must be unique and distinct from specials")

    @property
    def size(self) -> int:
        return len(self._tokens)

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._tokens == other._tokens

    def __repr__(self) -> str:
        return f"Vocabulary(size={self.size})"

    @property
    def regular_tokens(self) -> tuple[str, ...]:
        return self._tokens[FIRST_REGULAR_ID:]

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def token_of(self, token_id: int) -> str:
        if not 0 <= token_id < self.size:
            raise ShapeError(f"token id {token_id} out of range for vocabulary of {self.size}")
        return self._tokens[token_id]

    def save(self, path: str | Path) -> None:
        """One regular token per line; line n holds id n + 6."""
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for token in self.regular_tokens:
                f.write(token + "\n")

    @classmethod
    def load(cls, path: str | Path) -> Vocabulary:
        with open(path, "r", encoding="utf-8") as f:
            return cls(line.rstrip("\n") for line in f if line.rstrip("\n"))


def build_vocab(corpus: Sequence[str], min_freq: int = 1, max_size: int | None = None) -> Vocabulary:
    """Most frequent tokens first, ties broken lexicographically.

    ``max_size`` bounds the total size, specials included.
    """
    if min_freq < 1:
        raise ConfigError("min_freq must be >= 1")
    if max_size is not None and max_size < FIRST_REGULAR_ID:
        raise ConfigError(f"max_size must leave room for the {FIRST_REGULAR_ID} special tokens")
    counts = Counter(token for text in corpus for token in tokenize(text))
    for special in SPECIAL_TOKENS:
        counts.pop(special.lower(), None)
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    if max_size is not None:
        kept = kept[: max_size - FIRST_REGULAR_ID]
    logger.debug("Built vocabulary: %d tokens kept of %d distinct", len(kept), len(counts))
    return Vocabulary(kept)


@dataclass(frozen=True)
class TokenBatch:
    """``ids`` and ``attention_mask`` of shape (batch, max_len); mask is 0 exactly at [PAD]."""

    ids: np.ndarray
    attention_mask: np.ndarray

    @property
    def max_len(self) -> int:
        return self.ids.shape[1]

    def __len__(self) -> int:
        return self.ids.shape[0]

    def select(self, rows) -> TokenBatch:
        return TokenBatch(self.ids[rows], self.attention_mask[rows])

    def trimmed(self) -> TokenBatch:
        """Drop trailing columns that are padding in every row."""
        used = int(self.attention_mask.sum(axis=1).max()) if len(self) else 0
        return TokenBatch(self.ids[:, :used], self.attention_mask[:, :used])


def encode(text: str, vocab: Vocabulary, max_len: int = DEFAULT_MAX_LEN) -> tuple[np.ndarray, np.ndarray]:
    """[CLS] tokens[:max_len-2] [SEP] [PAD]... and the matching mask."""
    if max_len < 3:
        raise ConfigError("max_len must be at least 3")
    content = [vocab.id_of(t) for t in tokenize(text)][: max_len - 2]
    row = [CLS_ID] + content + [SEP_ID]
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    ids[: len(row)] = row
    mask = np.zeros(max_len, dtype=np.int64)
    mask[: len(row)] = 1
    return ids, mask


def encode_batch(texts: Sequence[str], vocab: Vocabulary, max_len: int = DEFAULT_MAX_LEN) -> TokenBatch:
    rows = [encode(text, vocab, max_len) for text in texts]
    if not rows:
        empty = np.zeros((0, max_len), dtype=np.int64)
        return TokenBatch(empty, empty.copy())
    return TokenBatch(np.stack([r[0] for r in rows]), np.stack([r[1] for r in rows]))


def decode(ids: Iterable[int], vocab: Vocabulary) -> str:
    """Join tokens with single spaces, dropping [PAD]/[CLS]/[SEP]/[MASK]."""
    words = []
    for token_id in ids:
        token = vocab.token_of(int(token_id))
        if int(token_id) not in _SILENT_IDS:
            words.append(token)
    return " ".join(words)
