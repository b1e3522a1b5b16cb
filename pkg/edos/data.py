"""Labeled EDOS-style datasets: taxonomy, CSV I/O, splitting, cleaning, synthesis."""

from __future__ import annotations

import csv
import logging
import math
import re
import string
import unicodedata
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError, DataFormatError, LabelValidationError
from .numcore import make_rng

logger = logging.getLogger(__name__)

RESOURCES = Path(__file__).parent / "resources"

COLUMNS = ("id", "text", "label_sexist", "label_category", "label_vector")
NONE_LABEL = "none"
LINK_TAG = "<link>"
SPLIT_RATIOS = (0.70, 0.10, 0.20)
MAX_WORDS = 64


# -- taxonomy -------------------------------------------------------------------

_NUMBER_PREFIX = re.compile(r"^\d+(\.\d+)?\.?\s+")


def _normalize(label: str) -> str:
    return " ".join(label.replace("_", " ").strip().lower().split())


def _require_text(value, column: str) -> None:
    if value is not None and not isinstance(value, str):
        raise ValueError(f"{column} must be text; got {type(value).__name__}")


@dataclass(frozen=True)
class TaskLabelSet:
    """Ordered class inventory of one task; the order is the index assignment."""

    task: str
    labels: tuple[str, ...]
    aliases: dict[str, str] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        lookup = {}
        for label in self.labels:
            norm = _normalize(label)
            lookup[norm] = label
            lookup[_NUMBER_PREFIX.sub("", norm)] = label
        for alias, label in self.aliases.items():
            lookup[_normalize(alias)] = label
        object.__setattr__(self, "_lookup", lookup)

    def __len__(self) -> int:
        return len(self.labels)

    def canonical(self, label: str) -> str:
        """Canonical label string; matching ignores case and surrounding space."""
        try:
            return self._lookup[_normalize(label)]
        except KeyError:
            raise LabelValidationError(
                f"unknown task {self.task} label {label!r}"
            ) from None

    def index(self, label: str) -> int:
        return self.labels.index(self.canonical(label))

    def name(self, index: int) -> str:
        return self.labels[index]


TASK_A = TaskLabelSet("A", ("not sexist", "sexist"))
TASK_B = TaskLabelSet(
    "B",
    (
        "1. threats, plans to harm and incitement",
        "2. derogation",
        "3. animosity",
        "4. prejudiced discussions",
    ),
    aliases={"threats plan to harm, and incitement": "1. threats, plans to harm and incitement"},
)
TASK_C = TaskLabelSet(
    "C",
    (
        "1.1 threats of harm",
        "1.2 incitement and encouragement of harm",
        "2.1 descriptive attacks",
        "2.2 aggressive and emotive attacks",
        "2.3 dehumanising attacks & overt sexual objectification",
        "3.1 casual use of gendered slurs, profanities, and insults",
        "3.2 immutable gender differences and gender stereotypes",
        "3.3 backhanded gendered compliments",
        "3.4 condescending explanations or unwelcome advice",
        "4.1 supporting mistreatment of individual women",
        "4.2 supporting systemic discrimination against women as a group",
    ),
)
# Joint learning appends "not sexist" after the four categories.
TASK_B_JOINT = TaskLabelSet("B_joint", TASK_B.labels + ("not sexist",))

LABEL_SETS = {"A": TASK_A, "B": TASK_B, "C": TASK_C, "B_joint": TASK_B_JOINT}


def label_set(task: str) -> TaskLabelSet:
    try:
        return LABEL_SETS[task]
    except KeyError:
        raise ConfigError(f"unknown task {task!r}; expected one of {sorted(LABEL_SETS)}") from None


def category_of_vector(vector: str) -> str:
    """Task-B category a Task-C vector belongs to (by its numeric prefix)."""
    return TASK_B.labels[int(TASK_C.canonical(vector).split(".")[0]) - 1]


# -- records --------------------------------------------------------------------


class LabeledExample(BaseModel):
    """One text with its hierarchical labels; the hierarchy is checked on construction."""

    model_config = ConfigDict(frozen=True)

    id: str
    text: str
    label_sexist: str
    label_category: str | None = None
    label_vector: str | None = None

    @field_validator("text")
    @classmethod
    def _text_not_empty(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("text is empty")
        return value

    @field_validator("label_sexist", mode="before")
    @classmethod
    def _canonical_sexist(cls, value: str) -> str:
        if not isinstance(value, str):
            raise ValueError(f"label_sexist must be text; got {type(value).__name__}")
        return TASK_A.canonical(value)

    @field_validator("label_category", mode="before")
    @classmethod
    def _canonical_category(cls, value: str | None) -> str | None:
        _require_text(value, "label_category")
        if value is None or _normalize(value) in ("", NONE_LABEL):
            return None
        return TASK_B.canonical(value)

    @field_validator("label_vector", mode="before")
    @classmethod
    def _canonical_vector(cls, value: str | None) -> str | None:
        _require_text(value, "label_vector")
        if value is None or _normalize(value) in ("", NONE_LABEL):
            return None
        return TASK_C.canonical(value)

    @model_validator(mode="after")
    def _check_hierarchy(self) -> LabeledExample:
        if not self.is_sexist:
            if self.label_category is not None or self.label_vector is not None:
                raise ValueError("not sexist text cannot carry a category or vector")
        else:
            if self.label_category is None or self.label_vector is None:
                raise ValueError("sexist text needs both a category and a vector")
            if category_of_vector(self.label_vector) != self.label_category:
                raise ValueError(
                    f"vector {self.label_vector!r} is not in category {self.label_category!r}"
                )
        return self

    @property
    def is_sexist(self) -> bool:
        return self.label_sexist == "sexist"

    def label_for(self, task: str) -> str | None:
        if task == "A":
            return self.label_sexist
        if task == "B":
            return self.label_category
        if task == "C":
            return self.label_vector
        if task == "B_joint":
            return self.label_category or "not sexist"
        raise ConfigError(f"unknown task {task!r}")


def make_example(row_id: str, **fields) -> LabeledExample:
    """Build an example, reporting validation problems against ``row_id``."""
    try:
        return LabeledExample(id=row_id, **fields)
    except ValidationError as e:
        reasons = "; ".join(err["msg"] for err in e.errors())
        raise LabelValidationError(reasons, row_id=row_id) from None


@dataclass
class DatasetSplit:
    train: list[LabeledExample]
    dev: list[LabeledExample]
    test: list[LabeledExample]
    ratios: tuple[float, float, float] = SPLIT_RATIOS

    def parts(self) -> dict[str, list[LabeledExample]]:
        return {"train": self.train, "dev": self.dev, "test": self.test}


# -- CSV I/O ----------------------------------------------------------------------


def load_dataset(
    path: str | Path, format: Literal["csv"] = "csv", id_column: str = "id"
) -> list[LabeledExample]:
    """Load a labeled CSV file.

    ``id_column="rewire_id"`` reads the official EDOS files.
    """
    if format != "csv":
        raise DataFormatError(f"unsupported dataset format {format!r}")
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"dataset file not found: {path}")

    examples = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        header = reader.fieldnames or []
        wanted = (id_column,) + COLUMNS[1:]
        missing = [c for c in wanted if c not in header]
        if missing:
            raise DataFormatError(f"{path}: missing column(s) {', '.join(missing)}")
        for row in reader:
            if None in row or None in row.values():
                raise DataFormatError(
                    f"{path}: row {reader.line_num} has {len(header)} columns in the header "
                    f"but a different number of fields"
                )
            examples.append(
                make_example(
                    row[id_column],
                    text=row["text"],
                    label_sexist=row["label_sexist"],
                    label_category=row["label_category"],
                    label_vector=row["label_vector"],
                )
            )
    logger.info("Loaded %d examples from %s", len(examples), path)
    return examples


def save_dataset(examples: Iterable[LabeledExample], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(COLUMNS)
        for ex in examples:
            writer.writerow(
                [
                    ex.id,
                    ex.text,
                    ex.label_sexist,
                    ex.label_category or NONE_LABEL,
                    ex.label_vector or NONE_LABEL,
                ]
            )


def save_split(split: DatasetSplit, directory: str | Path) -> None:
    directory = Path(directory)
    for name, examples in split.parts().items():
        save_dataset(examples, directory / f"{name}.csv")


def load_split(directory: str | Path, id_column: str = "id") -> DatasetSplit:
    directory = Path(directory)
    return DatasetSplit(
        **{
            name: load_dataset(directory / f"{name}.csv", id_column=id_column)
            for name in ("train", "dev", "test")
        }
    )


def read_corpus(path: str | Path) -> list[str]:
    """Unlabeled corpus: UTF-8, one document per line; blank lines skipped."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            return [line.strip() for line in f if line.strip()]
    except FileNotFoundError:
        raise DataFormatError(f"corpus not found: {path}") from None


def write_corpus(lines: Iterable[str], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for line in lines:
            f.write(line + "\n")


def class_distribution(examples: Sequence[LabeledExample]) -> dict[str, Counter]:
    counts = {task: Counter() for task in ("A", "B", "C")}
    for ex in examples:
        for task in counts:
            label = ex.label_for(task)
            if label is not None:
                counts[task][label] += 1
    return counts


def log_distribution(examples: Sequence[LabeledExample], title: str = "dataset") -> None:
    total = len(examples)
    logger.info("=== Class distribution (%s, %d texts) ===", title, total)
    for task, counts in class_distribution(examples).items():
        for label in label_set(task).labels:
            count = counts.get(label, 0)
            pct = count / total * 100 if total else 0.0
            logger.info("  %s | %s: %d (%.1f%%)", task, label, count, pct)


# -- splitting ----------------------------------------------------------------------


def split_dataset(
    examples: Sequence[LabeledExample],
    ratios: tuple[float, float, float] = SPLIT_RATIOS,
    seed: int = 0,
) -> DatasetSplit:
    """Seeded uniform shuffle, then dev/test take floor(n*ratio); train keeps the rest."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-6:
        raise ConfigError(f"split ratios must be three positive numbers summing to 1, got {ratios}")
    n = len(examples)
    order = make_rng(seed).permutation(n)
    shuffled = [examples[i] for i in order]
    n_dev = math.floor(n * ratios[1] + 1e-9)
    n_test = math.floor(n * ratios[2] + 1e-9)
    n_train = n - n_dev - n_test
    return DatasetSplit(
        train=shuffled[:n_train],
        dev=shuffled[n_train : n_train + n_dev],
        test=shuffled[n_train + n_dev :],
        ratios=tuple(ratios),
    )


# -- cleaning -----------------------------------------------------------------------


def _load_stopwords() -> frozenset[str]:
    with open(RESOURCES / "stopwords.txt", "r", encoding="utf-8") as f:
        return frozenset(line.strip() for line in f if line.strip())


def _load_emoji() -> dict[str, str]:
    table = {}
    with open(RESOURCES / "emoji.tsv", "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                char, name = line.rstrip("\n").split("\t")
                table[char] = name
    return table


STOPWORDS = _load_stopwords()
EMOJI_NAMES = _load_emoji()


class CleaningOptions(BaseModel):
    """Preprocessing switches; steps always run in the declared field order."""

    model_config = ConfigDict(extra="forbid")

    emoji_to_text: bool = False
    lowercase: bool = False
    link_to_tag: bool = False
    strip_punctuation: bool = False
    drop_words_with_digits: bool = False
    drop_stopwords: bool = False
    lemmatize: bool = False

    @classmethod
    def all_on(cls) -> CleaningOptions:
        return cls(**{name: True for name in cls.model_fields})


def _is_link(token: str) -> bool:
    return token.lower().startswith(("http://", "https://", "www."))


def _is_punct(ch: str) -> bool:
    return ch in string.punctuation or unicodedata.category(ch).startswith("P")


def _undouble(stem: str) -> str:
    if len(stem) >= 2 and stem[-1] == stem[-2] and stem[-1] not in "lsz":
        return stem[:-1]
    return stem


def _strip_suffix(word: str) -> str:
    if not word.isalpha():
        return word
    if word.endswith("ies") and len(word) > 4:
        return word[:-3] + "y"
    if len(word) > 4 and (word.endswith(("sses", "xes", "zes", "ches", "shes")) or word.endswith("uses")):
        return word[:-2]
    if word.endswith("s") and not word.endswith(("ss", "us", "is")) and len(word) > 3:
        return word[:-1]
    if word.endswith("ing") and len(word) >= 6:
        return _undouble(word[:-3])
    if word.endswith("ed") and len(word) >= 5:
        return _undouble(word[:-2])
    return word


def lemmatize_word(word: str) -> str:
    """Rule-based suffix stripping (-s/-es/-ies, -ing, -ed) iterated to a fixed point."""
    while True:
        stem = _strip_suffix(word)
        if stem == word:
            return word
        word = stem


def _emoji_step(text: str, options: CleaningOptions) -> str:
    out = []
    for ch in text:
        if ch in EMOJI_NAMES:
            out.append(f" :{EMOJI_NAMES[ch]}: ")
        elif ch != "\ufe0f":
            out.append(ch)
    return "".join(out)


def _lowercase_step(text: str, options: CleaningOptions) -> str:
    return text.lower()


def _link_step(text: str, options: CleaningOptions) -> str:
    return " ".join(LINK_TAG if _is_link(t) else t for t in text.split())


def _punctuation_step(text: str, options: CleaningOptions) -> str:
    tokens = []
    for t in text.split():
        if t != LINK_TAG:
            t = "".join(ch for ch in t if not _is_punct(ch))
        if t:
            tokens.append(t)
    return " ".join(tokens)


def _digits_step(text: str, options: CleaningOptions) -> str:
    return " ".join(t for t in text.split() if not any(ch.isdecimal() for ch in t))


def _stopword_step(text: str, options: CleaningOptions) -> str:
    def is_stop(token: str) -> bool:
        low = token.lower()
        return low in STOPWORDS or (options.lemmatize and lemmatize_word(low) in STOPWORDS)

    return " ".join(t for t in text.split() if not is_stop(t))


def _lemmatize_step(text: str, options: CleaningOptions) -> str:
    return " ".join(lemmatize_word(t) for t in text.split())


_CLEANING_STEPS = (
    ("emoji_to_text", _emoji_step),
    ("lowercase", _lowercase_step),
    ("link_to_tag", _link_step),
    ("strip_punctuation", _punctuation_step),
    ("drop_words_with_digits", _digits_step),
    ("drop_stopwords", _stopword_step),
    ("lemmatize", _lemmatize_step),
)


def clean_text(text: str, options: CleaningOptions | None = None) -> str:
    options = options or CleaningOptions()
    for flag, step in _CLEANING_STEPS:
        if getattr(options, flag):
            text = step(text, options)
    return text


# -- synthetic data -------------------------------------------------------------------

# Training-split class counts of the shared-task data.
SEXIST_COUNTS = (10602, 3398)
CATEGORY_COUNTS = (310, 1590, 1165, 333)
VECTOR_COUNTS = (56, 254, 717, 673, 200, 637, 417, 64, 47, 75, 258)

DEFAULT_SEED_WORDS = (
    "people", "think", "really", "post", "thread", "know", "time", "thing", "would",
    "could", "never", "always", "actually", "right", "still", "make", "good", "bad",
    "life", "work", "friend", "guy", "girl", "woman", "man", "opinion", "world", "day",
    "year", "money", "game", "party", "house", "car", "city", "school", "job", "week",
    "news", "story", "video", "picture", "comment", "reply", "question", "answer",
    "point", "reason", "problem", "idea", "word", "way", "place", "night", "morning",
    "weekend", "movie", "music", "food", "coffee",
)
DOMAIN_WORDS = ("upvote", "subreddit", "mods", "banned", "repost", "gab", "reddit", "downvote")

_PROPORTION_TOL = 1e-6


def _normalized(counts: Sequence[int]) -> tuple[float, ...]:
    total = sum(counts)
    return tuple(c / total for c in counts)


def marker_token(task: str, index: int) -> str:
    """Class-indicative token, e.g. ``mkab`` for Task A class 1 (letters only)."""
    return f"mk{task.lower()}{string.ascii_lowercase[index]}"


class SyntheticSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    total_count: int = Field(20000, ge=0)
    task: Literal["A", "B", "C"] = "C"
    sexist_fraction: float = Field(SEXIST_COUNTS[1] / sum(SEXIST_COUNTS), gt=0, lt=1)
    category_proportions: tuple[float, ...] = _normalized(CATEGORY_COUNTS)
    vector_proportions: tuple[float, ...] = _normalized(VECTOR_COUNTS)
    pattern_strength: float = Field(1.0, ge=0.0, le=1.0)
    vocab_seed_words: list[str] = Field(default_factory=lambda: list(DEFAULT_SEED_WORDS), min_length=1)
    min_words: int = Field(4, ge=1)
    max_words: int = Field(24, le=MAX_WORDS - 5)
    rng_seed: int = 0
    id_prefix: str = "syn"

    @field_validator("category_proportions", "vector_proportions")
    @classmethod
    def _sums_to_one(cls, value: tuple[float, ...]) -> tuple[float, ...]:
        if any(p < 0 for p in value) or abs(sum(value) - 1.0) > _PROPORTION_TOL:
            raise ValueError(f"proportions must be non-negative and sum to 1, got {value}")
        return value

    @model_validator(mode="after")
    def _check_shapes(self) -> SyntheticSpec:
        if len(self.category_proportions) != len(TASK_B):
            raise ValueError(f"need {len(TASK_B)} category proportions")
        if len(self.vector_proportions) != len(TASK_C):
            raise ValueError(f"need {len(TASK_C)} vector proportions")
        if self.min_words > self.max_words:
            raise ValueError("min_words exceeds max_words")
        return self


def largest_remainder(total: int, proportions: Sequence[float]) -> list[int]:
    """Integer counts summing to ``total``, each within 1 of total*proportion."""
    weight = sum(proportions)
    if total == 0 or weight == 0:
        return [0] * len(proportions)
    exact = [total * p / weight for p in proportions]
    counts = [math.floor(x) for x in exact]
    by_remainder = sorted(range(len(exact)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in by_remainder[: total - sum(counts)]:
        counts[i] += 1
    return counts


def _vectors_of(category_index: int) -> list[int]:
    prefix = f"{category_index + 1}."
    return [i for i, v in enumerate(TASK_C.labels) if v.startswith(prefix)]


def _label_plan(spec: SyntheticSpec) -> list[tuple[str, str | None, str | None]]:
    n_not, n_sexist = largest_remainder(
        spec.total_count, (1 - spec.sexist_fraction, spec.sexist_fraction)
    )
    plan: list[tuple[str, str | None, str | None]] = [("not sexist", None, None)] * n_not
    for c, n_category in enumerate(largest_remainder(n_sexist, spec.category_proportions)):
        members = _vectors_of(c)
        shares = [spec.vector_proportions[v] for v in members]
        for v, n_vector in zip(members, largest_remainder(n_category, shares)):
            plan.extend([("sexist", TASK_B.labels[c], TASK_C.labels[v])] * n_vector)
    return plan


def _markers(sexist: str, category: str | None, vector: str | None) -> list[str]:
    markers = [marker_token("A", TASK_A.index(sexist))]
    if category is not None:
        markers.append(marker_token("B", TASK_B.index(category)))
    if vector is not None:
        markers.append(marker_token("C", TASK_C.index(vector)))
    return markers


def _compose(rng, spec: SyntheticSpec, markers: Sequence[str], extra: Sequence[str] = ()) -> str:
    n_words = int(rng.integers(spec.min_words, spec.max_words + 1))
    words = [spec.vocab_seed_words[i] for i in rng.integers(0, len(spec.vocab_seed_words), n_words)]
    for token in markers:
        if rng.random() < spec.pattern_strength:
            words.insert(int(rng.integers(0, len(words) + 1)), token)
    for token in extra:
        words.insert(int(rng.integers(0, len(words) + 1)), token)
    return " ".join(words)


def generate_synthetic(spec: SyntheticSpec) -> list[LabeledExample]:
    """Labeled texts whose class counts follow ``spec`` proportions within 1.

    Each text carries its class markers with probability ``pattern_strength``.
    """
    needed = len(label_set(spec.task))
    if spec.total_count < needed:
        raise ConfigError(
            f"total_count {spec.total_count} is smaller than the {needed} classes of task {spec.task}"
        )
    rng = make_rng(spec.rng_seed)
    plan = _label_plan(spec)
    order = rng.permutation(len(plan))
    examples = []
    for i, j in enumerate(order):
        sexist, category, vector = plan[j]
        examples.append(
            LabeledExample(
                id=f"{spec.id_prefix}-{i:06d}",
                text=_compose(rng, spec, _markers(sexist, category, vector)),
                label_sexist=sexist,
                label_category=category,
                label_vector=vector,
            )
        )
    return examples


def generate_unlabeled(spec: SyntheticSpec, count: int) -> list[str]:
    """Unlabeled in-domain texts for domain-adaptive pretraining.

    Classes are drawn uniformly over "not sexist" and the four categories
    (shifted from the labeled proportions) and domain words are mixed in.
    """
    rng = make_rng(spec.rng_seed, 1)
    lines = []
    for _ in range(count):
        c = int(rng.integers(0, len(TASK_B) + 1))
        if c == len(TASK_B):
            markers = _markers("not sexist", None, None)
        else:
            members = _vectors_of(c)
            v = members[int(rng.integers(0, len(members)))]
            markers = _markers("sexist", TASK_B.labels[c], TASK_C.labels[v])
        domain = [DOMAIN_WORDS[int(rng.integers(0, len(DOMAIN_WORDS)))]]
        lines.append(_compose(rng, spec, markers, domain))
    return lines
