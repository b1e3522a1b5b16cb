"""Transformer encoders with absolute or disentangled relative-position attention.

Parameters live in a flat ``ParamStore`` keyed by dotted names::

    token_embeddings                 (vocab_size, d_model)
    position_embeddings              (max_len, d_model)       absolute only
    rel_embeddings                   (2k + 1, d_model)        disentangled only
    embed_norm.{gamma,beta}
    layers.{i}.attn.{q,k,v,o}.{weight,bias}
    layers.{i}.attn.{q_rel,k_rel}.weight                      disentangled only
    layers.{i}.attn_norm.{gamma,beta}
    layers.{i}.ffn.{in,out}.{weight,bias}
    layers.{i}.ffn_norm.{gamma,beta}

Blocks are post-layer-norm: ``H = LN(H + sublayer(H))``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .config import EncoderConfig
from .errors import ConfigError, ShapeError
from .numcore import ParamStore, Tensor
from .tokenizer import TokenBatch

logger = logging.getLogger(__name__)

MASK_BIAS = -1e9

__all__ = [
    "EncoderConfig",
    "HiddenStates",
    "init_encoder_params",
    "embed",
    "self_attention",
    "disentangled_attention",
    "relative_index",
    "encode_all_layers",
]


@dataclass
class HiddenStates:
    """Embedding output H0 followed by the output of every layer."""

    layers: list[Tensor]

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("HiddenStates needs at least the embedding output")
        shape = self.layers[0].shape
        for i, h in enumerate(self.layers):
            if h.shape != shape:
                raise ShapeError(f"layer {i} has shape {h.shape}, expected {shape}")

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, index: int) -> Tensor:
        return self.layers[index]

    @property
    def n_layers(self) -> int:
        return len(self.layers) - 1

    @property
    def last(self) -> Tensor:
        return self.layers[-1]


def _layer_norm_params(params: ParamStore, name: str, width: int) -> None:
    params.add(f"{name}.gamma", np.ones(width))
    params.add(f"{name}.beta", np.zeros(width))


def _linear_params(
    params: ParamStore,
    name: str,
    shape: tuple[int, int],
    rng: np.random.Generator,
    std: float,
    bias: bool = True,
) -> None:
    params.add(f"{name}.weight", nc.init_normal(rng, shape, std))
    if bias:
        params.add(f"{name}.bias", np.zeros(shape[1]))


def init_encoder_params(config: EncoderConfig, rng: np.random.Generator) -> ParamStore:
    if config.vocab_size <= 0:
        raise ConfigError("encoder vocab_size is not set")
    d, std = config.d_model, config.init_std
    params = ParamStore()
    params.add("token_embeddings", nc.init_normal(rng, (config.vocab_size, d), std))
    if config.attention_kind == "absolute":
        params.add("position_embeddings", nc.init_normal(rng, (config.max_len, d), std))
    else:
        params.add("rel_embeddings", nc.init_normal(rng, (2 * config.relative_clip + 1, d), std))
    _layer_norm_params(params, "embed_norm", d)

    for i in range(config.n_layers):
        prefix = f"layers.{i}."
        for proj in ("q", "k", "v", "o"):
            _linear_params(params, f"{prefix}attn.{proj}", (d, d), rng, std)
        if config.attention_kind == "disentangled":
            _linear_params(params, f"{prefix}attn.q_rel", (d, d), rng, std, bias=False)
            _linear_params(params, f"{prefix}attn.k_rel", (d, d), rng, std, bias=False)
        _layer_norm_params(params, f"{prefix}attn_norm", d)
        _linear_params(params, f"{prefix}ffn.in", (d, config.d_ff), rng, std)
        _linear_params(params, f"{prefix}ffn.out", (config.d_ff, d), rng, std)
        _layer_norm_params(params, f"{prefix}ffn_norm", d)

    logger.debug(
        "Initialised %s encoder: %d layers, %d parameters",
        config.attention_kind,
        config.n_layers,
        params.num_parameters(),
    )
    return params


def linear(x: Tensor, params: ParamStore, name: str) -> Tensor:
    out = x @ params[f"{name}.weight"]
    bias = params.get(f"{name}.bias")
    return out if bias is None else out + bias


def embed(
    batch: TokenBatch,
    config: EncoderConfig,
    params: ParamStore,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Token (plus absolute position) embeddings, then layer norm and dropout."""
    length = batch.max_len
    h = nc.embedding(params["token_embeddings"], batch.ids)
    if config.attention_kind == "absolute":
        if length > config.max_len:
            raise ShapeError(f"sequence length {length} exceeds max_len {config.max_len}")
        h = h + params["position_embeddings"][:length]
    h = nc.layer_norm(h, params["embed_norm.gamma"], params["embed_norm.beta"], config.layer_norm_eps)
    return nc.dropout(h, config.dropout, rng)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, length, d = x.shape
    return nc.transpose(nc.reshape(x, (b, length, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, length, dh = x.shape
    return nc.reshape(nc.transpose(x, (0, 2, 1, 3)), (b, length, h * dh))


def _mask_bias(h: Tensor, attention_mask: np.ndarray) -> Tensor:
    mask = np.asarray(attention_mask)
    if mask.shape != h.shape[:2]:
        raise ShapeError(f"attention mask {mask.shape} does not match hidden states {h.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ShapeError("attention mask must contain only 0 and 1")
    bias = np.where(mask == 1, 0.0, MASK_BIAS).astype(h.dtype)
    return Tensor(bias[:, None, None, :], dtype=h.dtype)


def _attend(scores: Tensor, v: Tensor, params: ParamStore) -> Tensor:
    weights = nc.softmax(scores)
    return linear(_merge_heads(weights @ v), params, "o")


def self_attention(
    h: Tensor, attention_mask: np.ndarray, params: ParamStore, n_heads: int
) -> Tensor:
    """Multi-head scaled dot-product attention; ``params`` holds ``{q,k,v,o}.*``."""
    if h.ndim != 3 or h.shape[-1] % n_heads:
        raise ShapeError(f"hidden states {h.shape} cannot be split into {n_heads} heads")
    bias = _mask_bias(h, attention_mask)
    q = _split_heads(linear(h, params, "q"), n_heads)
    k = _split_heads(linear(h, params, "k"), n_heads)
    v = _split_heads(linear(h, params, "v"), n_heads)
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = (q @ nc.swapaxes(k)) * scale + bias
    return _attend(scores, v, params)


def relative_index(length: int, k: int) -> np.ndarray:
    """``idx[i, j] = clip(i - j, -k, k) + k``, a row into the relative tables."""
    pos = np.arange(length)
    return np.clip(pos[:, None] - pos[None, :], -k, k) + k


def _relative_heads(rel: Tensor, weight: Tensor, n_heads: int) -> Tensor:
    r, d = rel.shape
    projected = rel @ weight
    return nc.transpose(nc.reshape(projected, (r, n_heads, d // n_heads)), (1, 0, 2))


def disentangled_attention(
    h: Tensor,
    rel_embeddings: Tensor,
    attention_mask: np.ndarray,
    params: ParamStore,
    n_heads: int,
) -> Tensor:
    """Content-to-content, content-to-position and position-to-content attention.

    ``rel_embeddings`` has 2k + 1 rows for relative distances clipped to
    [-k, k]. Logits are scaled by 1 / sqrt(3 * d_head).
    """
    rows = rel_embeddings.shape[0]
    if rows < 3 or rows % 2 == 0:
        raise ConfigError(f"relative table of {rows} rows; need 2k + 1 rows with k >= 1")
    if h.ndim != 3 or h.shape[-1] % n_heads:
        raise ShapeError(f"hidden states {h.shape} cannot be split into {n_heads} heads")
    if rel_embeddings.shape[1] != h.shape[-1]:
        raise ShapeError(f"relative table width {rel_embeddings.shape[1]} != {h.shape[-1]}")
    k = (rows - 1) // 2
    bias = _mask_bias(h, attention_mask)

    qc = _split_heads(linear(h, params, "q"), n_heads)
    kc = _split_heads(linear(h, params, "k"), n_heads)
    v = _split_heads(linear(h, params, "v"), n_heads)
    qr = _relative_heads(rel_embeddings, params["q_rel.weight"], n_heads)
    kr = _relative_heads(rel_embeddings, params["k_rel.weight"], n_heads)

    idx = relative_index(h.shape[1], k)
    c2c = qc @ nc.swapaxes(kc)
    c2p = nc.gather_last(qc @ nc.swapaxes(kr), idx)
    # p2c[i, j] = Kc_j . Qr[delta(j, i)]
    p2c = nc.swapaxes(nc.gather_last(kc @ nc.swapaxes(qr), idx))
    scale = 1.0 / math.sqrt(3 * qc.shape[-1])
    scores = (c2c + c2p + p2c) * scale + bias
    return _attend(scores, v, params)


def _block(
    h: Tensor,
    attention_mask: np.ndarray,
    config: EncoderConfig,
    params: ParamStore,
    layer: ParamStore,
    rng: np.random.Generator | None,
) -> Tensor:
    attn = layer.sub("attn.")
    if config.attention_kind == "absolute":
        a = self_attention(h, attention_mask, attn, config.n_heads)
    else:
        a = disentangled_attention(
            h, params["rel_embeddings"], attention_mask, attn, config.n_heads
        )
    eps = config.layer_norm_eps
    h = nc.layer_norm(
        h + nc.dropout(a, config.dropout, rng),
        layer["attn_norm.gamma"],
        layer["attn_norm.beta"],
        eps,
    )
    f = linear(nc.gelu(linear(h, layer, "ffn.in")), layer, "ffn.out")
    return nc.layer_norm(
        h + nc.dropout(f, config.dropout, rng),
        layer["ffn_norm.gamma"],
        layer["ffn_norm.beta"],
        eps,
    )


def encode_all_layers(
    batch: TokenBatch,
    config: EncoderConfig,
    params: ParamStore,
    rng: np.random.Generator | None = None,
) -> HiddenStates:
    """Run the encoder; ``rng`` enables dropout (training mode)."""
    h = embed(batch, config, params, rng)
    states = [h]
    for i in range(config.n_layers):
        layer = params.sub(f"layers.{i}.")
        if not layer:
            raise ShapeError(f"parameters for layer {i} are missing")
        h = _block(h, batch.attention_mask, config, params, layer, rng)
        states.append(h)
    return HiddenStates(states)
