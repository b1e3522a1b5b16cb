"""Command-line front end: ``edos gen-data | pretrain | train | eval | predict | score-matrix | inspect``.

Exit codes: 0 on success, 1 when a command fails, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from pathlib import Path

import dotenv
from pydantic import ValidationError

from . import numcore as nc
from .checkpoint import describe, load_encoders, save_encoders
from .config import ExperimentConfig, wiring
from .data import (
    SyntheticSpec,
    clean_text,
    generate_synthetic,
    generate_unlabeled,
    label_set,
    load_split,
    log_distribution,
    read_corpus,
    save_split,
    split_dataset,
    write_corpus,
)
from .errors import ConfigError, DataFormatError, EdosError
from .finetune import select_eval_set, train
from .fusion_heads import ModelBundle
from .inference import Classifier, hierarchical_predict, write_hierarchical, write_predictions
from .metrics import EvalReport, confusion, error_report, format_errors, macro_f1, read_matrix_csv
from .pretrain import dapt_run
from .tokenizer import Vocabulary, build_vocab

logger = logging.getLogger(__name__)

SEED_ENV = "EDOS_SEED"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class UsageError(ConfigError):
    """Invalid flag combination; reported with exit code 2."""


def resolve_seed(flag: int | None, configured: int | None = None) -> int:
    """``--seed`` beats ``EDOS_SEED``, which beats the config value; default 0."""
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return configured if configured is not None else 0


def load_config(path: str | None) -> ExperimentConfig:
    return ExperimentConfig.from_yaml(path) if path else ExperimentConfig()


def _derived_path(path: str | Path, suffix: str) -> Path:
    path = Path(path)
    return path.with_name(path.name + suffix)


# -- commands -------------------------------------------------------------------------


def cmd_gen_data(args) -> None:
    seed = resolve_seed(args.seed)
    spec = SyntheticSpec(
        total_count=args.total,
        task=args.task,
        pattern_strength=args.pattern_strength,
        rng_seed=seed,
    )
    examples = generate_synthetic(spec)
    log_distribution(examples, "generated")
    split = split_dataset(examples, seed=seed)
    out = Path(args.out)
    save_split(split, out)
    logger.info(
        "Wrote %d/%d/%d examples to %s", len(split.train), len(split.dev), len(split.test), out
    )
    if args.unlabeled:
        write_corpus(generate_unlabeled(spec, args.unlabeled), out / "unlabeled.txt")
        logger.info("Wrote %d unlabeled lines to %s", args.unlabeled, out / "unlabeled.txt")
    print(out)


def cmd_pretrain(args) -> None:
    config = load_config(args.config)
    seed = resolve_seed(args.seed, config.seed if args.config else None)
    settings = config.pretrain.model_copy(update={"seed": seed, "progress": args.progress})
    if args.epochs is not None:
        settings = settings.model_copy(update={"epochs": args.epochs})
    corpus = read_corpus(args.corpus)
    if not corpus:
        raise DataFormatError(f"corpus {args.corpus} is empty")
    corpus = [clean_text(line, config.cleaning) for line in corpus]
    vocab_texts = list(corpus)
    if args.data:
        vocab_texts += [clean_text(ex.text, config.cleaning) for ex in load_split(args.data).train]
    vocab = build_vocab(vocab_texts, config.min_freq, config.max_vocab)

    result = dapt_run(corpus, vocab, config.encoder, settings)
    save_encoders(
        args.out,
        result.encoders,
        result.configs,
        vocab,
        {"seed": seed, "epochs": settings.epochs, "cleaning": config.cleaning.model_dump()},
    )
    log_path = args.log or _derived_path(args.out, ".log")
    result.write_log(log_path)
    for kind in result.encoders:
        ppl = result.final_perplexity(kind)
        if ppl is None or math.isnan(ppl):
            logger.warning("%s has no held-out perplexity", kind)
        else:
            logger.info("%s final eval perplexity %.3f", kind, ppl)
    print(args.out)


def _train_config(args) -> ExperimentConfig:
    config = load_config(args.config)
    updates = {"experiment": args.experiment, "task": args.task}
    updates["seed"] = resolve_seed(args.seed, config.seed if args.config else None)
    config = config.model_copy(update=updates)
    if args.epochs is not None:
        config = config.model_copy(
            update={"train": config.train.model_copy(update={"epochs": args.epochs})}
        )
    if args.progress:
        config = config.model_copy(
            update={"train": config.train.model_copy(update={"progress": True})}
        )
    try:
        spec, _ = wiring(config.experiment, config.task)
    except ConfigError as e:
        raise UsageError(str(e)) from None
    if spec.needs_dapt and not args.init:
        raise UsageError(
            f"experiment {config.experiment} starts from pretrained encoders; pass --init CKPT"
        )
    return config.resolved()


def build_bundle(config: ExperimentConfig, vocab: Vocabulary, init: str | None) -> ModelBundle:
    """Wire encoders and head for ``config.experiment``, optionally from a DAPT checkpoint."""
    spec, _ = wiring(config.experiment, config.task)
    pretrained = load_encoders(init) if init else None
    configs = []
    for kind in spec.kinds:
        if pretrained is not None:
            if kind not in pretrained.configs:
                raise ConfigError(f"{init} holds no {kind} encoder")
            configs.append(pretrained.configs[kind])
        else:
            configs.append(config.encoder.with_kind(kind).with_vocab(vocab.size))
    encoder_b = configs[1] if len(configs) > 1 else None
    bundle = ModelBundle.init(config.head, configs[0], encoder_b, nc.make_rng(config.seed))
    if pretrained is not None:
        for slot, kind in zip("ab", spec.kinds):
            bundle.load_encoder(slot, pretrained.arrays[kind])
            logger.info("Encoder %s initialised from %s (%s)", slot, init, kind)
    return bundle


def cmd_train(args) -> None:
    config = _train_config(args)
    split = load_split(args.data)
    log_distribution(split.train, "train")
    if args.init:
        vocab = load_encoders(args.init).vocab
    else:
        texts = [clean_text(ex.text, config.cleaning) for ex in split.train]
        vocab = build_vocab(texts, config.min_freq, config.max_vocab)
    bundle = build_bundle(config, vocab, args.init)
    metadata = {
        "experiment": config.experiment,
        "seed": config.seed,
        "config": config.model_dump(mode="json"),
        "init": Path(args.init).name if args.init else None,
    }
    log_path = args.log or _derived_path(args.out, ".log")
    log = train(
        bundle, split, config.train, vocab, args.out, metadata, log_path, config.cleaning
    )
    if log.best_epoch is not None:
        logger.info("Best dev macro F1 %.4f at epoch %d", log.best_macro_f1, log.best_epoch)
    print(args.out)


def cmd_eval(args) -> None:
    classifier = Classifier.from_checkpoint(args.model)
    if classifier.label_task != args.task:
        raise ConfigError(
            f"model {args.model} was trained for task {classifier.task}, not {args.task}"
        )
    split = load_split(args.data)
    examples, golds, label_task = select_eval_set(getattr(split, args.split), classifier.task)
    predictions = classifier.predict([ex.text for ex in examples], [ex.id for ex in examples])
    cm = confusion(golds.tolist(), [p.label for p in predictions], label_set(label_task))
    report = EvalReport(label_task, cm, args.exclude_zero_support)
    for path in report.save(args.report):
        logger.info("Wrote %s", path)
    print(f"{report.macro_f1:.4f}")


def _read_inputs(path: str) -> tuple[list[str], list[str]]:
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            reader = csv.DictReader(f)
            if not reader.fieldnames or "text" not in reader.fieldnames:
                raise DataFormatError(f"{path}: expected a CSV with a 'text' column")
            rows = list(reader)
    except FileNotFoundError:
        raise DataFormatError(f"input file not found: {path}") from None
    id_column = "id" if "id" in reader.fieldnames else None
    ids = [row[id_column] if id_column else str(i) for i, row in enumerate(rows)]
    return ids, [row["text"] for row in rows]


def cmd_predict(args) -> None:
    ids, texts = _read_inputs(args.input)
    if args.model_b or args.model_c:
        if not (args.model_b and args.model_c):
            raise UsageError("hierarchical prediction needs both --model-b and --model-c")
        classifiers = {
            "A": Classifier.from_checkpoint(args.model),
            "B": Classifier.from_checkpoint(args.model_b),
            "C": Classifier.from_checkpoint(args.model_c),
        }
        write_hierarchical(hierarchical_predict(classifiers, texts, ids), args.out)
    else:
        classifier = Classifier.from_checkpoint(args.model)
        write_predictions(classifier.predict(texts, ids), args.out, args.probabilities)
    logger.info("Wrote predictions for %d texts to %s", len(texts), args.out)
    print(args.out)


def cmd_score_matrix(args) -> None:
    cm = read_matrix_csv(args.matrix)
    print(f"{macro_f1(cm, args.exclude_zero_support):.4f}")
    print(format_errors(error_report(cm)))


def cmd_inspect(args) -> None:
    print(describe(args.model))


# -- parser ---------------------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None, help=f"overrides {SEED_ENV} and the config")
    parser.add_argument("--config", type=str, default=None, help="YAML experiment config")
    parser.add_argument("--epochs", type=int, default=None, help="override the configured epochs")
    parser.add_argument("--log", type=str, default=None, help="per-epoch log file (default: OUT.log)")
    parser.add_argument("--progress", action="store_true", help="show tqdm progress bars")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edos", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic train/dev/test split")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--total", type=int, default=20000, help="number of labeled texts")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--pattern-strength", type=float, default=1.0)
    p.add_argument("--task", choices=["A", "B", "C"], default="C",
                   help="task whose class count bounds --total")
    p.add_argument("--unlabeled", type=int, default=0, help="also write M unlabeled lines")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="domain-adaptive MLM pretraining")
    p.add_argument("--corpus", required=True, help="UTF-8 text, one document per line")
    p.add_argument("--out", required=True, help="checkpoint to write")
    p.add_argument("--data", default=None, help="also build the vocabulary from DIR/train.csv")
    _add_common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="fine-tune one experiment")
    p.add_argument("--data", required=True, help="directory with train/dev/test CSVs")
    p.add_argument("--experiment", type=int, required=True, choices=range(1, 9))
    p.add_argument("--task", required=True, choices=["A", "B", "C"])
    p.add_argument("--init", default=None, help="pretraining checkpoint")
    p.add_argument("--out", required=True, help="checkpoint to write")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a labeled split")
    p.add_argument("--data", required=True)
    p.add_argument("--task", required=True, choices=["A", "B", "C"])
    p.add_argument("--model", required=True)
    p.add_argument("--report", required=True, help="text report; CSV files are written next to it")
    p.add_argument("--split", choices=["train", "dev", "test"], default="test")
    p.add_argument("--exclude-zero-support", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write predictions for a CSV of texts")
    p.add_argument("--in", dest="input", required=True, help="CSV with id,text columns")
    p.add_argument("--model", required=True, help="checkpoint (task A model when gating)")
    p.add_argument("--model-b", default=None, help="task B model for hierarchical gating")
    p.add_argument("--model-c", default=None, help="task C model for hierarchical gating")
    p.add_argument("--out", required=True)
    p.add_argument("--probabilities", action="store_true", help="add p0..pK-1 columns")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("score-matrix", help="macro F1 and error rates of a confusion matrix CSV")
    p.add_argument("--matrix", required=True)
    p.add_argument("--exclude-zero-support", action="store_true")
    p.set_defaults(func=cmd_score_matrix)

    p = sub.add_parser("inspect", help="print checkpoint metadata and tensor directory")
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format=LOG_FORMAT,
        stream=sys.stderr,
    )
    try:
        args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        logger.error("%s", e)
        return 2
    except (EdosError, ValidationError) as e:
        logger.error("%s failed: %s", args.command, e)
        return 1
    return 0


def main() -> None:
    if os.path.exists(".env"):
        dotenv.load_dotenv()
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
