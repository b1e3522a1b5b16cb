"""Tests for predictions, the joint Task B rule and hierarchical gating."""

import csv

import numpy as np
import pytest

from edos import numcore as nc
from edos.checkpoint import save_model
from edos.config import HeadVariant
from edos.data import NONE_LABEL, TASK_B, TASK_C, CleaningOptions
from edos.errors import ConfigError, LabelValidationError, ShapeError
from edos.fusion_heads import ModelBundle
from edos.inference import (
    Classifier,
    Prediction,
    class_indices,
    hierarchical_predict,
    joint_b_predict,
    predict,
    probabilities,
    write_hierarchical,
    write_predictions,
)
from tests.conftest import make_encoder_config, make_head_config

TEXTS = ["alpha beta gamma", "delta", "epsilon zeta eta theta", "iota kappa"]


def make_classifier(vocab, task, bias=None, seed=0):
    widths = {"A": 2, "B": 4, "C": 11, "B_joint": 5}
    variant = HeadVariant.DUAL_MLP_CONCAT_MLP if task == "B_joint" else HeadVariant.LAST_LAYER_MLP
    enc_a = make_encoder_config("absolute", vocab.size)
    enc_b = make_encoder_config("disentangled", vocab.size) if variant.is_dual else None
    bundle = ModelBundle.init(make_head_config(variant, widths[task]), enc_a, enc_b, nc.make_rng(seed))
    if bias is not None:
        bundle.params["head.out.bias"].data[...] = bias
    return Classifier(bundle, vocab, task)


class TestJointRule:
    """Test the Task B decision from a 5-way distribution."""

    def test_not_sexist_wins(self):
        """When "not sexist" wins, the runner-up is returned."""
        assert joint_b_predict(np.array([0.1, 0.2, 0.1, 0.1, 0.5])) == 1

    def test_sexist_class_wins(self):
        """Otherwise the winning sexist class is returned."""
        assert joint_b_predict(np.array([0.4, 0.3, 0.1, 0.1, 0.1])) == 0

    def test_tie_takes_lowest(self):
        """Ties between sexist classes resolve to the lowest index."""
        assert joint_b_predict(np.array([0.2, 0.2, 0.1, 0.1, 0.4])) == 0

    def test_equals_second_best_rule(self):
        """On random distributions the rule equals 'argmax, or runner-up if class 4 wins'."""
        rng = np.random.default_rng(0)
        probs = rng.dirichlet(np.ones(5), size=500)
        order = np.argsort(-probs, axis=1, kind="stable")
        expected = np.where(order[:, 0] == 4, order[:, 1], order[:, 0])
        np.testing.assert_array_equal(joint_b_predict(probs), expected)

    def test_never_returns_not_sexist(self):
        """The result is always one of the four sexist classes."""
        probs = np.random.default_rng(1).dirichlet(np.full(5, 0.3), size=200)
        assert set(joint_b_predict(probs).tolist()) <= {0, 1, 2, 3}

    def test_shift_invariant(self):
        """Adding a constant to every score keeps the decision."""
        scores = np.random.default_rng(2).random((50, 5))
        np.testing.assert_array_equal(joint_b_predict(scores), joint_b_predict(scores + 3.0))

    def test_batch_permutation(self):
        """Decisions follow their rows when the batch is permuted."""
        probs = np.random.default_rng(3).dirichlet(np.ones(5), size=30)
        perm = np.random.default_rng(4).permutation(30)
        np.testing.assert_array_equal(joint_b_predict(probs[perm]), joint_b_predict(probs)[perm])

    def test_wrong_width(self):
        """Only 5-way distributions are accepted."""
        with pytest.raises(ShapeError):
            joint_b_predict(np.full(4, 0.25))


class TestClassIndices:
    """Test argmax decisions per task."""

    def test_argmax_lowest_on_tie(self):
        """Plain tasks take the argmax, lowest index on ties."""
        np.testing.assert_array_equal(class_indices(np.array([[0.5, 0.5], [0.2, 0.8]]), "A"), [0, 1])

    def test_joint(self):
        """B_joint applies the joint rule."""
        np.testing.assert_array_equal(class_indices(np.array([[0.1, 0.2, 0.1, 0.1, 0.5]]), "B_joint"), [1])


class TestPredict:
    """Test batched predictions."""

    def test_distribution_and_label(self, tiny_vocab):
        """Every prediction holds a distribution and its argmax label."""
        clf = make_classifier(tiny_vocab, "C")
        preds = clf.predict(TEXTS, ["a", "b", "c", "d"])
        assert [p.id for p in preds] == ["a", "b", "c", "d"]
        for p in preds:
            assert p.probabilities.shape == (11,)
            assert p.probabilities.sum() == pytest.approx(1.0)
            assert p.label == TASK_C.labels[int(np.argmax(p.probabilities))]

    def test_joint_predictions_use_task_b_labels(self, tiny_vocab):
        """A joint model predicts Task B labels even when "not sexist" dominates."""
        clf = make_classifier(tiny_vocab, "B_joint", bias=[0.0, 1.0, 0.0, 0.0, 50.0])
        preds = clf.predict(TEXTS)
        assert {p.label for p in preds} == {TASK_B.labels[1]}
        assert clf.label_task == "B"

    def test_width_mismatch(self, tiny_vocab, tiny_batch):
        """A model must have as many classes as its task."""
        clf = make_classifier(tiny_vocab, "A")
        with pytest.raises(ConfigError):
            predict(clf.model, tiny_batch, "B")

    def test_ids_length(self, tiny_vocab, tiny_batch):
        """One id per row."""
        with pytest.raises(ShapeError):
            predict(make_classifier(tiny_vocab, "A").model, tiny_batch, "A", ["only-one"])

    def test_chunking_matches_single_pass(self, tiny_vocab):
        """Evaluating in small chunks gives the same probabilities."""
        clf = make_classifier(tiny_vocab, "B")
        batch = clf.encode(TEXTS * 3)
        np.testing.assert_allclose(probabilities(clf.model, batch, 5), probabilities(clf.model, batch), atol=1e-6)

    def test_no_dropout_at_prediction(self, tiny_vocab):
        """Predicting twice gives identical outputs."""
        clf = make_classifier(tiny_vocab, "A")
        first = [p.probabilities for p in clf.predict(TEXTS)]
        second = [p.probabilities for p in clf.predict(TEXTS)]
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a, b)

    def test_invalid_prediction(self):
        """Predictions must carry a distribution and a known label."""
        with pytest.raises(ShapeError):
            Prediction("x", "A", np.array([0.7, 0.7]), "sexist")
        with pytest.raises(LabelValidationError):
            Prediction("x", "A", np.array([0.5, 0.5]), "maybe")


class TestClassifierCheckpoint:
    """Test loading a classifier from disk."""

    def test_from_checkpoint(self, tmp_path, tiny_vocab):
        """A reloaded classifier predicts exactly as before, with its cleaning options."""
        clf = make_classifier(tiny_vocab, "B")
        cleaning = CleaningOptions(lowercase=True, strip_punctuation=True)
        path = save_model(tmp_path / "b.ckpt", clf.model, tiny_vocab, {"task": "B", "cleaning": cleaning.model_dump()})
        loaded = Classifier.from_checkpoint(path)
        assert loaded.task == "B"
        assert loaded.cleaning == cleaning
        clf.cleaning = cleaning
        for a, b in zip(clf.predict(TEXTS), loaded.predict(TEXTS)):
            np.testing.assert_array_equal(a.probabilities, b.probabilities)
            assert a.label == b.label


class TestHierarchical:
    """Test gating B and C on the Task A decision."""

    def test_not_sexist_gets_none(self, tiny_vocab):
        """Texts predicted not sexist get "none" for category and vector."""
        classifiers = {
            "A": make_classifier(tiny_vocab, "A", bias=[50.0, 0.0]),
            "B": make_classifier(tiny_vocab, "B"),
            "C": make_classifier(tiny_vocab, "C"),
        }
        preds = hierarchical_predict(classifiers, TEXTS)
        assert all(p.sexist == "not sexist" for p in preds)
        assert all(p.category == NONE_LABEL and p.vector == NONE_LABEL for p in preds)

    def test_sexist_gets_labels(self, tiny_vocab):
        """Texts predicted sexist get the B and C decisions."""
        classifiers = {
            "A": make_classifier(tiny_vocab, "A", bias=[0.0, 50.0]),
            "B": make_classifier(tiny_vocab, "B", bias=[0.0, 0.0, 50.0, 0.0]),
            "C": make_classifier(tiny_vocab, "C"),
        }
        preds = hierarchical_predict(classifiers, TEXTS, ["w", "x", "y", "z"])
        assert [p.id for p in preds] == ["w", "x", "y", "z"]
        assert all(p.sexist == "sexist" for p in preds)
        assert all(p.category == TASK_B.labels[2] for p in preds)
        assert all(p.vector != NONE_LABEL for p in preds)

    def test_joint_model_serves_task_b(self, tiny_vocab):
        """A joint model can fill the Task B slot."""
        classifiers = {
            "A": make_classifier(tiny_vocab, "A", bias=[0.0, 50.0]),
            "B": make_classifier(tiny_vocab, "B_joint", bias=[0.0, 0.0, 0.0, 1.0, 50.0]),
            "C": make_classifier(tiny_vocab, "C"),
        }
        preds = hierarchical_predict(classifiers, TEXTS)
        assert all(p.category == TASK_B.labels[3] for p in preds)

    def test_missing_model(self, tiny_vocab):
        """All three tasks need a model."""
        with pytest.raises(ConfigError):
            hierarchical_predict({"A": make_classifier(tiny_vocab, "A")}, TEXTS)

    def test_wrong_task_slot(self, tiny_vocab):
        """A model trained for C cannot fill the B slot."""
        c = make_classifier(tiny_vocab, "C")
        with pytest.raises(ConfigError):
            hierarchical_predict({"A": make_classifier(tiny_vocab, "A"), "B": c, "C": c}, TEXTS)


class TestWriters:
    """Test the prediction CSV files."""

    def test_predictions_with_probabilities(self, tmp_path):
        """Rows carry id, task, label and six-decimal probabilities."""
        preds = [Prediction("t1", "A", np.array([0.25, 0.75]), "sexist")]
        path = tmp_path / "p.csv"
        write_predictions(preds, path, with_probabilities=True)
        rows = list(csv.reader(path.open(encoding="utf-8")))
        assert rows == [["id", "task", "label", "p0", "p1"], ["t1", "A", "sexist", "0.250000", "0.750000"]]

    def test_predictions_without_probabilities(self, tmp_path):
        """By default only the label is written."""
        path = tmp_path / "p.csv"
        write_predictions([Prediction("t1", "A", np.array([1.0, 0.0]), "not sexist")], path)
        assert path.read_text(encoding="utf-8").splitlines() == ["id,task,label", "t1,A,not sexist"]

    def test_hierarchical(self, tmp_path, tiny_vocab):
        """The hierarchical file has one column per level."""
        classifiers = {
            "A": make_classifier(tiny_vocab, "A", bias=[50.0, 0.0]),
            "B": make_classifier(tiny_vocab, "B"),
            "C": make_classifier(tiny_vocab, "C"),
        }
        path = tmp_path / "h.csv"
        write_hierarchical(hierarchical_predict(classifiers, TEXTS[:1], ["q"]), path)
        assert path.read_text(encoding="utf-8").splitlines() == [
            "id,label_sexist,label_category,label_vector",
            "q,not sexist,none,none",
        ]
