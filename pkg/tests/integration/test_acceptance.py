"""Long acceptance runs: MLM overfitting, learnability, pretraining benefit and determinism.

Deselected by default; run with ``pytest -m slow``.
"""

import numpy as np
import pytest

from edos import numcore as nc
from edos.checkpoint import save_encoders
from edos.config import EncoderConfig, HeadVariant, PretrainConfig, TrainConfig
from edos.data import SyntheticSpec, generate_synthetic, generate_unlabeled, split_dataset
from edos.finetune import train
from edos.fusion_heads import ModelBundle
from edos.pretrain import dapt_run
from edos.tokenizer import build_vocab
from tests.conftest import make_head_config

TEMPLATES = [
    "she should not be allowed to post here",
    "great match last night everyone played well",
    "women belong in the kitchen not the office",
    "check the thread for the full story",
    "he always brings snacks to the meeting",
]


def smoothed(values, window=5):
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def train_task_a(examples, encoder, seed, epochs, init=None, vocab=None, out_path=None, log_path=None):
    split = split_dataset(examples, seed=seed)
    vocab = vocab or build_vocab([ex.text for ex in split.train])
    encoder = encoder.with_vocab(vocab.size)
    head = make_head_config(HeadVariant.DUAL_MLP_CONCAT_MLP, branch_hidden=[32], trunk_hidden=[32])
    bundle = ModelBundle.init(
        head, encoder.with_kind("absolute"), encoder.with_kind("disentangled"), nc.make_rng(seed)
    )
    if init is not None:
        bundle.load_encoder("a", init.encoders["absolute"].state_dict())
        bundle.load_encoder("b", init.encoders["disentangled"].state_dict())
    config = TrainConfig(epochs=epochs, learning_rate=5e-4, batch_size=16, seed=seed, weight_decay=0.0)
    return train(bundle, split, config, vocab, out_path=out_path, log_path=log_path)


@pytest.mark.slow
class TestMlmOverfit:
    """Test that pretraining can memorise a small repetitive corpus."""

    def test_perplexity_drops_below_threshold(self):
        """200 template lines reach held-out perplexity below 1.5 within 200 epochs."""
        corpus = (TEMPLATES * 40)[:200]
        vocab = build_vocab(corpus)
        encoder = EncoderConfig.toy(vocab.size, max_len=16, dropout=0.0)
        settings = PretrainConfig(epochs=200, learning_rate=1e-3, batch_size=32, kinds=["absolute"], seed=0)
        result = dapt_run(corpus, vocab, encoder, settings)
        assert result.final_perplexity("absolute") < 1.5
        trend = smoothed([r.eval_loss for r in result.log])
        assert trend[-1] < trend[0]
        assert all(later <= earlier + 0.05 for earlier, later in zip(trend, trend[1:]))


@pytest.mark.slow
class TestLearnability:
    """Test that marker patterns are learnable and their absence is not."""

    def test_separable_task(self):
        """With full-strength markers dev macro F1 reaches 0.95 within 20 epochs."""
        examples = generate_synthetic(SyntheticSpec(total_count=1000, task="A", rng_seed=1, max_words=16))
        log = train_task_a(examples, EncoderConfig.toy(max_len=32, dropout=0.0), seed=1, epochs=20)
        assert log.best_macro_f1 >= 0.95

    def test_no_pattern_is_chance(self):
        """Without markers dev macro F1 stays in the chance band."""
        spec = SyntheticSpec(total_count=1000, task="A", rng_seed=2, max_words=16, pattern_strength=0.0)
        examples = generate_synthetic(spec)
        log = train_task_a(examples, EncoderConfig.toy(max_len=32, dropout=0.0), seed=2, epochs=20)
        assert log.best_macro_f1 <= 0.60


@pytest.mark.slow
class TestPretrainingBenefit:
    """Test that starting from pretrained encoders helps at equal budget."""

    def test_dapt_beats_random_init(self):
        """Pretrained encoders win on dev macro F1 in at least 4 of 5 seeds."""
        encoder = EncoderConfig(n_layers=2, n_heads=2, d_model=32, d_ff=64, max_len=32, dropout=0.0)
        wins = 0
        for seed in range(5):
            spec = SyntheticSpec(total_count=400, task="A", rng_seed=seed, max_words=16, pattern_strength=0.6)
            examples = generate_synthetic(spec)
            corpus = generate_unlabeled(spec, 1500)
            vocab = build_vocab(corpus + [ex.text for ex in examples])
            settings = PretrainConfig(epochs=5, learning_rate=1e-3, batch_size=32, seed=seed)
            pretrained = dapt_run(corpus, vocab, encoder.with_vocab(vocab.size), settings)
            random_log = train_task_a(examples, encoder, seed, epochs=4, vocab=vocab)
            dapt_log = train_task_a(examples, encoder, seed, epochs=4, init=pretrained, vocab=vocab)
            wins += dapt_log.best_macro_f1 > random_log.best_macro_f1
        assert wins >= 4


@pytest.mark.slow
class TestDeterminism:
    """Test byte-identical outputs under a fixed seed."""

    def test_pretraining_checkpoints(self, tmp_path):
        """Two pretraining runs with one seed write identical checkpoints."""
        corpus = TEMPLATES * 8
        vocab = build_vocab(corpus)
        encoder = EncoderConfig(n_layers=2, n_heads=2, d_model=16, d_ff=32, max_len=16, vocab_size=vocab.size)
        settings = PretrainConfig(epochs=3, learning_rate=1e-3, batch_size=8, seed=3)
        for name in ("1.ckpt", "2.ckpt"):
            result = dapt_run(corpus, vocab, encoder, settings)
            save_encoders(tmp_path / name, result.encoders, result.configs, vocab, {"seed": 3})
        assert (tmp_path / "1.ckpt").read_bytes() == (tmp_path / "2.ckpt").read_bytes()

    def test_fine_tuning_checkpoints(self, tmp_path):
        """Two fine-tuning runs with one seed write identical models and dev logs."""
        examples = generate_synthetic(SyntheticSpec(total_count=300, task="A", rng_seed=5, max_words=16))
        encoder = EncoderConfig.toy(max_len=32)
        logs = []
        for name in ("1", "2"):
            logs.append(
                train_task_a(
                    examples, encoder, seed=5, epochs=3,
                    out_path=tmp_path / f"{name}.ckpt", log_path=tmp_path / f"{name}.log",
                )
            )
        assert (tmp_path / "1.ckpt").read_bytes() == (tmp_path / "2.ckpt").read_bytes()
        assert (tmp_path / "1.log").read_text(encoding="utf-8") == (tmp_path / "2.log").read_text(encoding="utf-8")
        assert logs[0].records == logs[1].records
        assert logs[0].best_epoch == logs[1].best_epoch
