"""Tests for the taxonomy, dataset I/O, splitting, cleaning and synthetic generation."""

import csv

import pytest
from pydantic import ValidationError

from edos import cli
from edos.data import (
    LINK_TAG,
    TASK_A,
    TASK_B,
    TASK_B_JOINT,
    TASK_C,
    CleaningOptions,
    LabeledExample,
    SyntheticSpec,
    category_of_vector,
    class_distribution,
    clean_text,
    generate_synthetic,
    generate_unlabeled,
    label_set,
    largest_remainder,
    lemmatize_word,
    load_dataset,
    load_split,
    make_example,
    marker_token,
    save_dataset,
    save_split,
    split_dataset,
)
from edos.errors import ConfigError, DataFormatError, LabelValidationError

HEADER = ["id", "text", "label_sexist", "label_category", "label_vector"]


def write_rows(path, rows, header=HEADER):
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)
    return path


class TestTaxonomy:
    """Test the fixed label inventories."""

    def test_label_set_sizes(self):
        """Tasks A, B and C have 2, 4 and 11 classes."""
        assert len(TASK_A) == 2
        assert len(TASK_B) == 4
        assert len(TASK_C) == 11
        assert TASK_A.labels == ("not sexist", "sexist")

    def test_index_is_bijection(self):
        """Every label maps to its position and back."""
        for labels in (TASK_A, TASK_B, TASK_C, TASK_B_JOINT):
            indices = [labels.index(name) for name in labels.labels]
            assert indices == list(range(len(labels)))
            assert [labels.name(i) for i in indices] == list(labels.labels)

    def test_matching_ignores_case_and_space(self):
        """Labels match case-insensitively after trimming."""
        assert TASK_A.canonical("  SEXIST ") == "sexist"
        assert TASK_B.canonical("2. Derogation") == "2. derogation"
        assert TASK_B.canonical("derogation") == "2. derogation"
        assert TASK_C.canonical("2.1 Descriptive Attacks") == "2.1 descriptive attacks"

    def test_unknown_label_raises(self):
        """An unknown label string is a validation error."""
        with pytest.raises(LabelValidationError):
            TASK_B.canonical("5. something else")

    def test_joint_set_appends_not_sexist(self):
        """The joint label set is the four categories followed by not sexist."""
        assert TASK_B_JOINT.labels[:4] == TASK_B.labels
        assert TASK_B_JOINT.index("not sexist") == 4

    def test_unknown_task(self):
        """Asking for an unknown task fails with a config error."""
        with pytest.raises(ConfigError):
            label_set("D")

    def test_category_of_vector(self):
        """Vectors belong to the category of their numeric prefix."""
        assert category_of_vector("3.4 condescending explanations or unwelcome advice") == "3. animosity"
        assert category_of_vector("1.1 threats of harm") == TASK_B.labels[0]


class TestLabeledExample:
    """Test the hierarchy checks on construction."""

    def test_sexist_example_with_all_labels(self):
        """A sexist example keeps all three labels."""
        ex = LabeledExample(
            id="x1",
            text="some text",
            label_sexist="sexist",
            label_category="2. derogation",
            label_vector="2.1 descriptive attacks",
        )
        assert ex.is_sexist
        assert ex.label_for("B") == "2. derogation"
        assert ex.label_for("B_joint") == "2. derogation"

    def test_none_strings_are_absent(self):
        """'none' maps to an absent category and vector."""
        ex = LabeledExample(id="x2", text="other text", label_sexist="not sexist", label_category="none", label_vector="none")
        assert ex.label_category is None
        assert ex.label_vector is None
        assert ex.label_for("B_joint") == "not sexist"

    def test_not_sexist_with_category_rejected(self):
        """A not sexist text cannot carry a category."""
        with pytest.raises(ValidationError):
            LabeledExample(id="x3", text="t", label_sexist="not sexist", label_category="2. derogation", label_vector="none")

    def test_sexist_without_vector_rejected(self):
        """A sexist text needs both a category and a vector."""
        with pytest.raises(ValidationError):
            LabeledExample(id="x4", text="t", label_sexist="sexist", label_category="2. derogation")

    def test_vector_outside_category_rejected(self):
        """The vector has to belong to the category."""
        with pytest.raises(ValidationError):
            LabeledExample(
                id="x5",
                text="t",
                label_sexist="sexist",
                label_category="3. animosity",
                label_vector="2.1 descriptive attacks",
            )

    def test_empty_text_rejected(self):
        """Whitespace-only text is invalid."""
        with pytest.raises(ValidationError):
            LabeledExample(id="x6", text="   ", label_sexist="not sexist")


class TestLoadDataset:
    """Test CSV loading and saving."""

    def test_load_valid_rows(self, tmp_path):
        """Both schema rows load with the expected labels."""
        path = write_rows(
            tmp_path / "d.csv",
            [
                ["x1", "some text", "sexist", "2. derogation", "2.1 descriptive attacks"],
                ["x2", "other text", "not sexist", "none", "none"],
            ],
        )
        examples = load_dataset(path)
        assert [ex.id for ex in examples] == ["x1", "x2"]
        assert examples[0].label_vector == "2.1 descriptive attacks"
        assert examples[1].label_category is None

    def test_missing_column(self, tmp_path):
        """A missing column is a format error."""
        path = write_rows(tmp_path / "d.csv", [["x1", "t", "sexist", "2. derogation"]], header=HEADER[:-1])
        with pytest.raises(DataFormatError, match="label_vector"):
            load_dataset(path)

    def test_unknown_label_names_row(self, tmp_path):
        """An unknown label raises a validation error naming the row id."""
        path = write_rows(tmp_path / "d.csv", [["ok", "t", "not sexist", "none", "none"], ["bad7", "t", "maybe", "none", "none"]])
        with pytest.raises(LabelValidationError) as info:
            load_dataset(path)
        assert info.value.row_id == "bad7"
        assert "bad7" in str(info.value)

    def test_hierarchy_violation_names_row(self, tmp_path):
        """A not sexist row with a category is rejected."""
        path = write_rows(tmp_path / "d.csv", [["h1", "t", "not sexist", "2. derogation", "none"]])
        with pytest.raises(LabelValidationError) as info:
            load_dataset(path)
        assert info.value.row_id == "h1"

    def test_short_row(self, tmp_path):
        """A row with fewer fields than the header is a format error naming the line."""
        path = write_rows(tmp_path / "d.csv", [["r1", "hello there"]])
        with pytest.raises(DataFormatError, match="row 2"):
            load_dataset(path)

    def test_long_row(self, tmp_path):
        """A row with extra fields is a format error too."""
        path = write_rows(tmp_path / "d.csv", [["r1", "t", "not sexist", "none", "none", "extra"]])
        with pytest.raises(DataFormatError):
            load_dataset(path)

    def test_short_row_exits_with_failure(self, tmp_path):
        """Training on a split with a short row fails cleanly with exit code 1."""
        for name in ("train", "dev", "test"):
            write_rows(tmp_path / f"{name}.csv", [["r1", "hello there"]])
        argv = ["train", "--data", str(tmp_path), "--experiment", "1", "--task", "A", "--out", str(tmp_path / "m")]
        assert cli.run(argv) == 1

    @pytest.mark.parametrize("column", ["label_sexist", "label_category", "label_vector"])
    def test_non_text_label_rejected(self, column):
        """Label columns only accept text."""
        fields = {"label_sexist": "not sexist", column: 3}
        with pytest.raises(LabelValidationError):
            make_example("n1", text="t", **fields)

    def test_missing_file(self, tmp_path):
        """A missing file is a format error."""
        with pytest.raises(DataFormatError):
            load_dataset(tmp_path / "absent.csv")

    def test_rewire_id_column(self, tmp_path):
        """The official id column name can be mapped to id."""
        header = ["rewire_id"] + HEADER[1:]
        path = write_rows(tmp_path / "d.csv", [["sexism2022_english-1", "hello", "not sexist", "none", "none"]], header=header)
        examples = load_dataset(path, id_column="rewire_id")
        assert examples[0].id == "sexism2022_english-1"

    def test_save_then_load_is_identity(self, tmp_path, small_examples):
        """Saving and loading returns the same examples."""
        path = tmp_path / "out" / "all.csv"
        save_dataset(small_examples, path)
        assert load_dataset(path) == small_examples

    def test_quoted_text_survives(self, tmp_path):
        """Commas, quotes and newlines in texts use CSV quoting."""
        ex = LabeledExample(id="q", text='a, "quoted"\nline', label_sexist="not sexist")
        path = tmp_path / "q.csv"
        save_dataset([ex], path)
        assert load_dataset(path)[0].text == ex.text

    def test_reference_label_counts(self, tmp_path):
        """A 14000-row file with 3398 sexist rows loads with those counts."""
        examples = generate_synthetic(SyntheticSpec(total_count=14000, task="A", min_words=1, max_words=2))
        path = tmp_path / "train.csv"
        save_dataset(examples, path)
        counts = class_distribution(load_dataset(path))["A"]
        assert counts["sexist"] == 3398
        assert counts["not sexist"] == 10602


class TestSplitDataset:
    """Test the seeded 70/10/20 partition."""

    def test_full_dataset_sizes(self):
        """20000 texts split into 14000/2000/4000."""
        split = split_dataset(list(range(20000)), seed=0)
        assert (len(split.train), len(split.dev), len(split.test)) == (14000, 2000, 4000)

    def test_ten_examples(self, small_examples):
        """10 texts split into 7/1/2."""
        split = split_dataset(small_examples[:10], seed=1)
        assert (len(split.train), len(split.dev), len(split.test)) == (7, 1, 2)

    def test_remainder_goes_to_train(self):
        """Rounding leftovers are added to train."""
        split = split_dataset(list(range(13)), seed=0)
        assert (len(split.train), len(split.dev), len(split.test)) == (10, 1, 2)

    def test_partition(self, small_examples):
        """The splits are disjoint and cover the input."""
        split = split_dataset(small_examples, seed=5)
        ids = [ex.id for part in split.parts().values() for ex in part]
        assert len(ids) == len(set(ids))
        assert set(ids) == {ex.id for ex in small_examples}

    def test_deterministic(self, small_examples):
        """The same seed gives identical partitions; another seed differs."""
        a = split_dataset(small_examples, seed=9)
        b = split_dataset(small_examples, seed=9)
        c = split_dataset(small_examples, seed=10)
        assert [ex.id for ex in a.train] == [ex.id for ex in b.train]
        assert [ex.id for ex in a.train] != [ex.id for ex in c.train]

    def test_empty_input(self):
        """Empty input gives empty splits."""
        split = split_dataset([], seed=0)
        assert split.train == split.dev == split.test == []

    def test_bad_ratios(self):
        """Ratios must be positive and sum to one."""
        with pytest.raises(ConfigError):
            split_dataset([], ratios=(0.5, 0.5, 0.5))
        with pytest.raises(ConfigError):
            split_dataset([], ratios=(1.0, 0.0, 0.0))

    def test_save_and_load_split(self, tmp_path, small_split):
        """A split directory round-trips through train/dev/test CSV files."""
        save_split(small_split, tmp_path)
        loaded = load_split(tmp_path)
        assert loaded.train == small_split.train
        assert loaded.test == small_split.test


class TestCleanText:
    """Test the preprocessing pipeline."""

    def test_all_off_is_identity(self):
        """With every flag off the text is unchanged."""
        text = "Check https://x.co NOW!! 😀 cats 123abc"
        assert clean_text(text, CleaningOptions()) == text
        assert clean_text(text) == text

    def test_lowercase_link_punctuation(self):
        """Lowercase, link and punctuation steps compose in order."""
        options = CleaningOptions(lowercase=True, link_to_tag=True, strip_punctuation=True)
        assert clean_text("Check https://x.co NOW!!", options) == f"check {LINK_TAG} now"

    def test_stopwords_drop_now(self):
        """Adding stopword removal drops 'now'."""
        options = CleaningOptions(lowercase=True, link_to_tag=True, strip_punctuation=True, drop_stopwords=True)
        assert clean_text("Check https://x.co NOW!!", options) == f"check {LINK_TAG}"

    def test_link_prefixes(self):
        """Tokens starting with http://, https:// or www. become the link tag."""
        options = CleaningOptions(link_to_tag=True)
        assert clean_text("a http://b www.c.d https://e f", options) == f"a {LINK_TAG} {LINK_TAG} {LINK_TAG} f"

    def test_lemmatize(self):
        """Plural and -ing suffixes are stripped."""
        assert clean_text("cats running", CleaningOptions(lemmatize=True)) == "cat run"

    @pytest.mark.parametrize(
        "word, lemma",
        [("cats", "cat"), ("boxes", "box"), ("stories", "story"), ("jumped", "jump"), ("stopped", "stop"), ("glass", "glass"), ("is", "is")],
    )
    def test_lemmatize_word(self, word, lemma):
        """Suffix rules on single words."""
        assert lemmatize_word(word) == lemma

    def test_digits_dropped(self):
        """Whitespace tokens containing any digit are removed."""
        assert clean_text("call me at 555 or x2 now", CleaningOptions(drop_words_with_digits=True)) == "call me at or now"

    def test_emoji_to_text(self):
        """Known emoji are replaced by their name."""
        cleaned = clean_text("hi 😀", CleaningOptions(emoji_to_text=True))
        assert ":grinning_face:" in cleaned.split()

    def test_link_tag_kept_by_punctuation_step(self):
        """Punctuation stripping leaves the link tag intact."""
        options = CleaningOptions(link_to_tag=True, strip_punctuation=True)
        assert clean_text("see www.x.com, ok?", options) == f"see {LINK_TAG} ok"

    @pytest.mark.parametrize(
        "text",
        [
            "Check https://x.co NOW!! 😀",
            "The dogs were RUNNING and jumped over 3 fences...",
            "Stories of boxes, classes and wishes",
            "",
        ],
    )
    def test_idempotent_with_all_flags(self, text):
        """clean(clean(x)) == clean(x) with every step on."""
        options = CleaningOptions.all_on()
        once = clean_text(text, options)
        assert clean_text(once, options) == once

    def test_unknown_option_rejected(self):
        """Unknown cleaning flags are rejected."""
        with pytest.raises(ValidationError):
            CleaningOptions(stem=True)


class TestSynthetic:
    """Test synthetic dataset generation."""

    def test_reference_sexist_share(self):
        """14000 texts give 3398 sexist and 10602 not sexist."""
        examples = generate_synthetic(SyntheticSpec(total_count=14000, task="A", min_words=1, max_words=2))
        counts = class_distribution(examples)["A"]
        assert counts == {"sexist": 3398, "not sexist": 10602}

    def test_reference_vector_counts(self):
        """At full training size the vector counts equal the shared-task counts."""
        examples = generate_synthetic(SyntheticSpec(total_count=14000, min_words=1, max_words=2))
        counts = class_distribution(examples)
        assert [counts["B"][label] for label in TASK_B.labels] == [310, 1590, 1165, 333]
        assert [counts["C"][label] for label in TASK_C.labels] == [56, 254, 717, 673, 200, 637, 417, 64, 47, 75, 258]

    def test_full_strength_has_markers(self, small_examples):
        """With pattern strength 1 every text contains its class markers."""
        for ex in small_examples:
            words = ex.text.split()
            assert marker_token("A", TASK_A.index(ex.label_sexist)) in words
            if ex.is_sexist:
                assert marker_token("C", TASK_C.index(ex.label_vector)) in words

    def test_zero_strength_has_no_markers(self):
        """With pattern strength 0 no marker appears."""
        examples = generate_synthetic(SyntheticSpec(total_count=200, pattern_strength=0.0, rng_seed=4))
        assert not any(word.startswith("mk") for ex in examples for word in ex.text.split())

    def test_texts_shorter_than_64_words(self):
        """Every generated text has fewer than 64 words."""
        examples = generate_synthetic(SyntheticSpec(total_count=300, max_words=59))
        assert max(len(ex.text.split()) for ex in examples) < 64

    def test_deterministic(self):
        """The same seed gives the same texts."""
        spec = SyntheticSpec(total_count=50, rng_seed=11)
        assert generate_synthetic(spec) == generate_synthetic(spec)

    def test_too_few_examples(self):
        """Fewer texts than classes at the requested level is an error."""
        with pytest.raises(ConfigError):
            generate_synthetic(SyntheticSpec(total_count=10, task="C"))
        assert len(generate_synthetic(SyntheticSpec(total_count=10, task="A"))) == 10

    def test_proportions_must_sum_to_one(self):
        """Category proportions are validated."""
        with pytest.raises(ValidationError):
            SyntheticSpec(category_proportions=(0.5, 0.5, 0.5, 0.5))

    def test_unlabeled_corpus(self):
        """The unlabeled mode yields the requested number of texts with domain words."""
        lines = generate_unlabeled(SyntheticSpec(rng_seed=2), 30)
        assert len(lines) == 30
        assert all(line.strip() for line in lines)
        assert lines == generate_unlabeled(SyntheticSpec(rng_seed=2), 30)


class TestLargestRemainder:
    """Test the apportionment helper."""

    def test_counts_within_one(self):
        """Counts sum to the total and stay within one of the exact share."""
        proportions = (0.2, 0.3, 0.5)
        counts = largest_remainder(7, proportions)
        assert sum(counts) == 7
        assert all(abs(c - 7 * p) < 1 for c, p in zip(counts, proportions))

    def test_zero_total(self):
        """A zero total gives zero counts."""
        assert largest_remainder(0, (0.5, 0.5)) == [0, 0]
