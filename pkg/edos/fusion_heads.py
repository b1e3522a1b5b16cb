"""Pooling, fusion and MLP classification heads over one or two encoders."""

from __future__ import annotations

import contextlib
import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .config import EncoderConfig, HeadConfig, HeadVariant
from .encoder import HiddenStates, encode_all_layers, init_encoder_params, linear
from .errors import ConfigError, ShapeError
from .numcore import ParamStore, Tensor
from .tokenizer import TokenBatch

logger = logging.getLogger(__name__)

__all__ = [
    "HeadConfig",
    "HeadVariant",
    "ModelBundle",
    "pool_last",
    "pool_avg",
    "fuse_concat",
    "fuse_mlp_then_concat",
    "classify",
    "mlp",
]


def _pool(x: Tensor, attention_mask: np.ndarray | None, pooling: str) -> Tensor:
    if pooling == "cls":
        return x[:, 0]
    if pooling != "mean":
        raise ConfigError(f"unknown pooling {pooling!r}")
    if attention_mask is None:
        return nc.mean(x, axis=1)
    mask = np.asarray(attention_mask, dtype=x.dtype)
    counts = np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
    return nc.sum_(x * Tensor(mask[:, :, None], dtype=x.dtype), axis=1) * Tensor(1.0 / counts, dtype=x.dtype)


def pool_last(
    states: HiddenStates, attention_mask: np.ndarray | None = None, pooling: str = "cls"
) -> Tensor:
    """[CLS] vector of the final layer, shape (batch, d_model)."""
    return _pool(states.last, attention_mask, pooling)


def pool_avg(
    states: HiddenStates, attention_mask: np.ndarray | None = None, pooling: str = "cls"
) -> Tensor:
    """Mean over the transformer layers H1..Hn; H0 is not included."""
    if states.n_layers == 0:
        raise ShapeError("pool_avg needs at least one transformer layer")
    total = _pool(states[1], attention_mask, pooling)
    for h in states.layers[2:]:
        total = total + _pool(h, attention_mask, pooling)
    return total * (1.0 / states.n_layers)


def fuse_concat(ha: Tensor, hb: Tensor) -> Tensor:
    return nc.concat([ha, hb], axis=-1)


def _depth(params: ParamStore) -> int:
    return sum(1 for name in params if name.endswith(".weight"))


def mlp(
    x: Tensor,
    params: ParamStore,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """``params`` holds ``{i}.weight``/``{i}.bias``; every layer is linear, relu, dropout."""
    for i in range(_depth(params)):
        x = nc.dropout(nc.relu(linear(x, params, str(i))), dropout, rng)
    return x


def fuse_mlp_then_concat(
    ha: Tensor,
    hb: Tensor,
    branch_params: ParamStore,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """``concat(MLP_a(ha), MLP_b(hb))`` with separate ``branch_a.``/``branch_b.`` weights."""
    branch_a, branch_b = branch_params.sub("branch_a."), branch_params.sub("branch_b.")
    if not branch_a or not branch_b:
        raise ConfigError("fuse_mlp_then_concat needs two configured branch MLPs")
    return fuse_concat(mlp(ha, branch_a, dropout, rng), mlp(hb, branch_b, dropout, rng))


def classify(
    features: Tensor,
    head_params: ParamStore,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Trunk MLP, then a final linear layer to class logits (no softmax)."""
    trunk = head_params.sub("trunk.")
    hidden = mlp(features, trunk, dropout, rng)
    if hidden.shape[-1] != head_params["out.weight"].shape[0]:
        raise ShapeError(
            f"classifier input width {hidden.shape[-1]} != {head_params['out.weight'].shape[0]}"
        )
    return linear(hidden, head_params, "out")


def _mlp_params(
    params: ParamStore,
    prefix: str,
    widths: Sequence[int],
    rng: np.random.Generator,
    std: float,
) -> int:
    for i, (fan_in, fan_out) in enumerate(zip(widths, widths[1:])):
        params.add(f"{prefix}{i}.weight", nc.init_normal(rng, (fan_in, fan_out), std))
        params.add(f"{prefix}{i}.bias", np.zeros(fan_out))
    return widths[-1]


def init_head_params(
    config: HeadConfig,
    widths: Sequence[int],
    rng: np.random.Generator,
    std: float = 0.02,
) -> ParamStore:
    """Head parameters for encoders of output width ``widths`` (one or two)."""
    params = ParamStore()
    if config.variant == HeadVariant.DUAL_MLP_CONCAT_MLP:
        out_a = _mlp_params(params, "branch_a.", [widths[0], *config.branch_hidden], rng, std)
        out_b = _mlp_params(params, "branch_b.", [widths[1], *config.branch_hidden], rng, std)
        fused = out_a + out_b
    elif config.variant == HeadVariant.DUAL_CONCAT_MLP:
        fused = widths[0] + widths[1]
    else:
        fused = widths[0]
    last = _mlp_params(params, "trunk.", [fused, *config.trunk_hidden], rng, std)
    params.add("out.weight", nc.init_normal(rng, (last, config.num_classes), std))
    params.add("out.bias", np.zeros(config.num_classes))
    return params


@dataclass
class ModelBundle:
    """Encoder(s) plus head, all parameters in one store.

    Names are prefixed ``encoder_a.``, ``encoder_b.`` (dual variants only)
    and ``head.``.
    """

    head_config: HeadConfig
    encoder_a_config: EncoderConfig
    encoder_b_config: EncoderConfig | None
    params: ParamStore

    def __post_init__(self):
        dual = self.head_config.variant.is_dual
        has_b = self.encoder_b_config is not None
        if dual and not has_b:
            raise ConfigError(f"{self.head_config.variant.value} needs a second encoder")
        if not dual and has_b:
            raise ConfigError(f"{self.head_config.variant.value} takes a single encoder")
        if self.head_config.variant == HeadVariant.AVG_LAYERS_MLP and self.encoder_a_config.n_layers == 0:
            raise ConfigError("AvgLayersMLP needs at least one encoder layer")

    @classmethod
    def init(
        cls,
        head_config: HeadConfig,
        encoder_a_config: EncoderConfig,
        encoder_b_config: EncoderConfig | None,
        rng: np.random.Generator,
    ) -> ModelBundle:
        params = ParamStore()
        params.merge(init_encoder_params(encoder_a_config, rng).prefixed("encoder_a."))
        widths = [encoder_a_config.d_model]
        if encoder_b_config is not None:
            params.merge(init_encoder_params(encoder_b_config, rng).prefixed("encoder_b."))
            widths.append(encoder_b_config.d_model)
        std = encoder_a_config.init_std
        if head_config.variant.is_dual and len(widths) < 2:
            raise ConfigError(f"{head_config.variant.value} needs a second encoder")
        params.merge(init_head_params(head_config, widths, rng, std).prefixed("head."))
        bundle = cls(head_config, encoder_a_config, encoder_b_config, params)
        logger.info(
            "Model %s: %d parameters", head_config.variant.value, params.num_parameters()
        )
        return bundle

    @property
    def encoder_a(self) -> ParamStore:
        return self.params.sub("encoder_a.")

    @property
    def encoder_b(self) -> ParamStore | None:
        return self.params.sub("encoder_b.") if self.encoder_b_config is not None else None

    @property
    def head(self) -> ParamStore:
        return self.params.sub("head.")

    def encoder_params(self) -> ParamStore:
        return ParamStore({k: t for k, t in self.params.items() if not k.startswith("head.")})

    def load_encoder(self, slot: str, arrays) -> list[str]:
        """Copy pretrained encoder weights into ``encoder_a`` or ``encoder_b``."""
        if slot not in ("a", "b") or (slot == "b" and self.encoder_b_config is None):
            raise ConfigError(f"no encoder slot {slot!r} in this model")
        return self.params.sub(f"encoder_{slot}.").load_state_dict(arrays)

    def hidden_states(
        self, batch: TokenBatch, rng: np.random.Generator | None = None
    ) -> tuple[HiddenStates, HiddenStates | None]:
        states_a = encode_all_layers(batch, self.encoder_a_config, self.encoder_a, rng)
        states_b = None
        if self.encoder_b_config is not None:
            states_b = encode_all_layers(batch, self.encoder_b_config, self.encoder_b, rng)
        return states_a, states_b

    def features(
        self,
        batch: TokenBatch,
        rng: np.random.Generator | None = None,
        freeze_encoders: bool = False,
    ) -> Tensor:
        """Pooled or fused input to the trunk MLP."""
        cfg = self.head_config
        mask = batch.attention_mask
        with nc.no_grad() if freeze_encoders else contextlib.nullcontext():
            states_a, states_b = self.hidden_states(batch, rng)
        if cfg.variant == HeadVariant.LAST_LAYER_MLP:
            return pool_last(states_a, mask, cfg.pooling)
        if cfg.variant == HeadVariant.AVG_LAYERS_MLP:
            return pool_avg(states_a, mask, cfg.pooling)
        ha = pool_last(states_a, mask, cfg.pooling)
        hb = pool_last(states_b, mask, cfg.pooling)
        if cfg.variant == HeadVariant.DUAL_CONCAT_MLP:
            return fuse_concat(ha, hb)
        return fuse_mlp_then_concat(ha, hb, self.head, cfg.dropout, rng)

    def forward(
        self,
        batch: TokenBatch,
        rng: np.random.Generator | None = None,
        freeze_encoders: bool = False,
    ) -> Tensor:
        """Class logits of shape (batch, num_classes); ``rng`` enables dropout."""
        x = self.features(batch, rng, freeze_encoders)
        return classify(x, self.head, self.head_config.dropout, rng)

    __call__ = forward
