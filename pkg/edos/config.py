"""Configuration structures shared by the training pipeline and the CLI."""

from __future__ import annotations

from enum import Enum
from pathlib import Path
from typing import Literal, NamedTuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .data import CleaningOptions
from .errors import ConfigError

AttentionKind = Literal["absolute", "disentangled"]
Task = Literal["A", "B", "C", "B_joint"]

NUM_CLASSES = {"A": 2, "B": 4, "C": 11, "B_joint": 5}


class EncoderConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_layers: int = Field(4, ge=0)
    n_heads: int = Field(4, ge=1)
    d_model: int = Field(128, ge=1)
    d_ff: int = Field(512, ge=1)
    vocab_size: int = Field(0, ge=0, description="0 means: take it from the vocabulary")
    max_len: int = Field(64, ge=3)
    attention_kind: AttentionKind = "absolute"
    relative_clip: int = Field(8, description="k; relative distances clip to [-k, k]")
    dropout: float = Field(0.1, ge=0.0, lt=1.0)
    layer_norm_eps: float = Field(1e-5, ge=0.0)
    init_std: float = Field(0.02, gt=0.0)

    @model_validator(mode="after")
    def _check(self) -> EncoderConfig:
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.attention_kind == "disentangled" and self.relative_clip < 1:
            raise ConfigError("relative_clip must be >= 1 for disentangled attention")
        return self

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def with_vocab(self, vocab_size: int) -> EncoderConfig:
        return self.model_copy(update={"vocab_size": vocab_size})

    def with_kind(self, kind: AttentionKind) -> EncoderConfig:
        return self.model_copy(update={"attention_kind": kind})

    @classmethod
    def toy(cls, vocab_size: int = 0, **overrides) -> EncoderConfig:
        return cls(vocab_size=vocab_size, **overrides)

    @classmethod
    def base(cls, vocab_size: int = 0, **overrides) -> EncoderConfig:
        """12 layers, 12 heads, hidden size 768."""
        values = dict(n_layers=12, n_heads=12, d_model=768, d_ff=3072)
        values.update(overrides)
        return cls(vocab_size=vocab_size, **values)


class HeadVariant(str, Enum):
    LAST_LAYER_MLP = "LastLayerMLP"
    AVG_LAYERS_MLP = "AvgLayersMLP"
    DUAL_CONCAT_MLP = "DualConcatMLP"
    DUAL_MLP_CONCAT_MLP = "DualMLPConcatMLP"

    @property
    def is_dual(self) -> bool:
        return self in (HeadVariant.DUAL_CONCAT_MLP, HeadVariant.DUAL_MLP_CONCAT_MLP)


class HeadConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    variant: HeadVariant = HeadVariant.LAST_LAYER_MLP
    branch_hidden: list[int] = Field(default_factory=lambda: [256])
    trunk_hidden: list[int] = Field(default_factory=lambda: [256])
    num_classes: int = 2
    activation: Literal["relu"] = "relu"
    dropout: float = Field(0.1, ge=0.0, lt=1.0)
    pooling: Literal["cls", "mean"] = "cls"

    @field_validator("num_classes")
    @classmethod
    def _known_width(cls, value: int) -> int:
        if value not in (2, 4, 5, 11):
            raise ConfigError(f"num_classes must be one of 2, 4, 5, 11; got {value}")
        return value


class OptimizerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    learning_rate: float = Field(1e-5, gt=0.0)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    epochs: int = Field(20, ge=0)
    learning_rate: float = Field(1e-5, gt=0.0)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = Field(16, ge=1)
    loss: Literal["cross_entropy"] = "cross_entropy"
    seed: int = 0
    task: Task = "A"
    init: Literal["random", "from_dapt_checkpoint"] = "random"
    class_weighting: bool = False
    freeze_encoders: bool = False
    progress: bool = False

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            weight_decay=self.weight_decay,
        )


class PretrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    epochs: int = Field(10, ge=0)
    learning_rate: float = Field(1e-5, gt=0.0)
    weight_decay: float = 0.01
    batch_size: int = Field(16, ge=1)
    mask_rate: float = Field(0.15, ge=0.0, le=1.0)
    eval_fraction: float = Field(0.05, gt=0.0, lt=1.0)
    seed: int = 0
    kinds: list[AttentionKind] = Field(default_factory=lambda: ["absolute", "disentangled"])
    progress: bool = False

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(learning_rate=self.learning_rate, weight_decay=self.weight_decay)


class Wiring(NamedTuple):
    kinds: tuple[AttentionKind, ...]
    variant: HeadVariant
    needs_dapt: bool
    joint: bool = False


# Encoder and head wiring per experiment number.
EXPERIMENTS: dict[int, Wiring] = {
    1: Wiring(("absolute",), HeadVariant.LAST_LAYER_MLP, False),
    2: Wiring(("disentangled",), HeadVariant.LAST_LAYER_MLP, False),
    3: Wiring(("absolute",), HeadVariant.AVG_LAYERS_MLP, False),
    4: Wiring(("disentangled",), HeadVariant.AVG_LAYERS_MLP, False),
    5: Wiring(("absolute", "disentangled"), HeadVariant.DUAL_MLP_CONCAT_MLP, False),
    6: Wiring(("absolute", "disentangled"), HeadVariant.DUAL_MLP_CONCAT_MLP, True),
    7: Wiring(("absolute", "disentangled"), HeadVariant.DUAL_MLP_CONCAT_MLP, False, joint=True),
    8: Wiring(("absolute", "disentangled"), HeadVariant.DUAL_CONCAT_MLP, True),
}


def wiring(experiment: int, task: str) -> tuple[Wiring, Task]:
    """Wiring of ``experiment`` and the training task it implies for ``task``."""
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {experiment}; expected 1-8")
    if task not in ("A", "B", "C"):
        raise ConfigError(f"unknown task {task!r}")
    spec = EXPERIMENTS[experiment]
    if spec.joint:
        if task != "B":
            raise ConfigError(f"experiment {experiment} is joint learning for task B only")
        return spec, "B_joint"
    return spec, task


class ExperimentConfig(BaseModel):
    """Everything one ``edos train`` / ``edos pretrain`` run depends on."""

    model_config = ConfigDict(extra="forbid")

    experiment: int = Field(1, ge=1, le=8)
    task: Literal["A", "B", "C"] = "A"
    seed: int = 0
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    head: HeadConfig = Field(default_factory=HeadConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    cleaning: CleaningOptions = Field(default_factory=CleaningOptions)
    min_freq: int = Field(1, ge=1)
    max_vocab: int | None = None
    data_dir: str | None = None
    init_checkpoint: str | None = None

    @classmethod
    def from_yaml(cls, path: str | Path) -> ExperimentConfig:
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: expected a mapping at the top level")
        return cls.model_validate(raw)

    def to_yaml(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump(self.model_dump(mode="json"), f, sort_keys=False)

    def resolved(self) -> ExperimentConfig:
        """Apply the experiment wiring: head variant, class count, train task, seed.

        An explicitly configured head variant is kept as long as it fuses as many
        encoders as the experiment builds.
        """
        spec, train_task = wiring(self.experiment, self.task)
        variant = spec.variant
        if "variant" in self.head.model_fields_set:
            variant = self.head.variant
            if variant.is_dual != (len(spec.kinds) == 2):
                raise ConfigError(
                    f"head variant {variant.value} does not fit experiment {self.experiment}, "
                    f"which builds {len(spec.kinds)} encoder(s)"
                )
        head = self.head.model_copy(
            update={"variant": variant, "num_classes": NUM_CLASSES[train_task]}
        )
        train = self.train.model_copy(
            update={
                "task": train_task,
                "seed": self.seed,
                "init": "from_dapt_checkpoint" if spec.needs_dapt else self.train.init,
            }
        )
        return self.model_copy(update={"head": head, "train": train})
