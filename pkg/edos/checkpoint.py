"""Binary checkpoint files.

Layout::

    b"EDOSCKPT"                     magic
    uint32 LE                       format version
    uint64 LE                       metadata length in bytes
    UTF-8 JSON                      metadata (sorted keys) with a tensor directory
    payload                         tensors back to back, little-endian

float32 tensors are stored as ``<f4`` and float64 tensors as ``<f8``, so
``load(save(x))`` is bitwise exact. Nothing time- or host-dependent is written:
the same parameters and metadata give the same bytes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import numcore as nc
from .config import EncoderConfig, HeadConfig
from .errors import CheckpointError
from .fusion_heads import ModelBundle
from .numcore import ParamStore, Tensor
from .tokenizer import Vocabulary

logger = logging.getLogger(__name__)

MAGIC = b"EDOSCKPT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQ")
_DTYPES = {np.dtype(np.float32): "<f4", np.dtype(np.float64): "<f8"}

KIND_CLASSIFIER = "classifier"
KIND_DAPT = "dapt"


@dataclass
class Checkpoint:
    metadata: dict[str, Any]
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    directory: list[dict[str, Any]] = field(default_factory=list)

    def with_prefix(self, prefix: str) -> dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def _as_array(value) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value)


def save_checkpoint(
    path: str | Path, tensors: Mapping[str, np.ndarray | Tensor], metadata: Mapping[str, Any]
) -> Path:
    path = Path(path)
    directory, chunks, offset = [], [], 0
    for name, value in tensors.items():
        array = _as_array(value)
        code = _DTYPES.get(array.dtype)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {array.dtype}")
        raw = np.ascontiguousarray(array, dtype=np.dtype(code)).tobytes()
        directory.append(
            {"name": name, "dtype": code, "shape": list(array.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    header = {"format_version": FORMAT_VERSION, "metadata": dict(metadata), "tensors": directory}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(blob)))
        f.write(blob)
        for raw in chunks:
            f.write(raw)
    logger.debug("Wrote %d tensors (%d bytes) to %s", len(directory), offset, path)
    return path


def _read_header(f, path) -> dict[str, Any]:
    head = f.read(_HEADER.size)
    if len(head) != _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, length = _HEADER.unpack(head)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not an edos checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    blob = f.read(length)
    if len(blob) != length:
        raise CheckpointError(f"{path}: truncated metadata")
    try:
        header = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt metadata ({e})") from None
    names = [entry["name"] for entry in header.get("tensors", [])]
    if len(names) != len(set(names)):
        raise CheckpointError(f"{path}: duplicate tensor names in directory")
    return header


def read_header(path: str | Path) -> Checkpoint:
    """Metadata and tensor directory only, without the payload."""
    try:
        with open(path, "rb") as f:
            header = _read_header(f, path)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    return Checkpoint(header["metadata"], {}, header["tensors"])


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            header = _read_header(f, path)
            payload = f.read()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    tensors = {}
    for entry in header["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise CheckpointError(f"{path}: tensor {entry['name']} is truncated")
        stored = np.dtype(entry["dtype"])
        values = np.frombuffer(payload[start : start + nbytes], dtype=stored)
        native = np.float32 if entry["dtype"] == "<f4" else np.float64
        tensors[entry["name"]] = values.astype(native).reshape(entry["shape"])
    return Checkpoint(header["metadata"], tensors, header["tensors"])


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- model checkpoints ----------------------------------------------------------------


def save_model(
    path: str | Path,
    bundle: ModelBundle,
    vocab: Vocabulary,
    metadata: Mapping[str, Any] | None = None,
) -> Path:
    """Classifier checkpoint: every bundle tensor plus what is needed to rebuild it."""
    meta = dict(metadata or {})
    meta.update(
        kind=KIND_CLASSIFIER,
        head=bundle.head_config.model_dump(mode="json"),
        encoder_a=bundle.encoder_a_config.model_dump(mode="json"),
        encoder_b=None if bundle.encoder_b_config is None else bundle.encoder_b_config.model_dump(mode="json"),
        vocab=list(vocab.regular_tokens),
    )
    return save_checkpoint(path, bundle.params, meta)


@dataclass
class LoadedModel:
    bundle: ModelBundle
    vocab: Vocabulary
    metadata: dict[str, Any]

    @property
    def task(self) -> str:
        return self.metadata.get("task", "A")


def _precision_of(ckpt: Checkpoint) -> type:
    return np.float64 if any(e["dtype"] == "<f8" for e in ckpt.directory) else np.float32


def load_model(path: str | Path) -> LoadedModel:
    ckpt = load_checkpoint(path)
    meta = ckpt.metadata
    if meta.get("kind") != KIND_CLASSIFIER:
        raise CheckpointError(f"{path}: not a classifier checkpoint (kind={meta.get('kind')!r})")
    head = HeadConfig.model_validate(meta["head"])
    enc_a = EncoderConfig.model_validate(meta["encoder_a"])
    enc_b = None if meta.get("encoder_b") is None else EncoderConfig.model_validate(meta["encoder_b"])
    with nc.precision(_precision_of(ckpt)):
        bundle = ModelBundle.init(head, enc_a, enc_b, nc.make_rng(0))
    try:
        bundle.params.load_state_dict(ckpt.tensors)
    except KeyError as e:
        raise CheckpointError(f"{path}: {e.args[0]}") from None
    extra = set(ckpt.tensors) - set(bundle.params)
    if extra:
        raise CheckpointError(f"{path}: unexpected tensors {sorted(extra)}")
    return LoadedModel(bundle, Vocabulary(meta["vocab"]), meta)


def save_encoders(
    path: str | Path,
    encoders: Mapping[str, ParamStore],
    configs: Mapping[str, EncoderConfig],
    vocab: Vocabulary,
    metadata: Mapping[str, Any] | None = None,
) -> Path:
    """DAPT checkpoint; tensors are named ``encoder_<kind>.*`` per attention kind."""
    tensors: dict[str, Tensor] = {}
    for kind, params in encoders.items():
        for name, tensor in params.items():
            tensors[f"encoder_{kind}.{name}"] = tensor
    meta = dict(metadata or {})
    meta.update(
        kind=KIND_DAPT,
        encoders={kind: configs[kind].model_dump(mode="json") for kind in encoders},
        vocab=list(vocab.regular_tokens),
    )
    return save_checkpoint(path, tensors, meta)


@dataclass
class LoadedEncoders:
    arrays: dict[str, dict[str, np.ndarray]]
    configs: dict[str, EncoderConfig]
    vocab: Vocabulary
    metadata: dict[str, Any]


def load_encoders(path: str | Path) -> LoadedEncoders:
    ckpt = load_checkpoint(path)
    meta = ckpt.metadata
    if meta.get("kind") != KIND_DAPT:
        raise CheckpointError(f"{path}: not a pretraining checkpoint (kind={meta.get('kind')!r})")
    configs = {k: EncoderConfig.model_validate(v) for k, v in meta["encoders"].items()}
    arrays = {kind: ckpt.with_prefix(f"encoder_{kind}.") for kind in configs}
    return LoadedEncoders(arrays, configs, Vocabulary(meta["vocab"]), meta)


def describe(path: str | Path) -> str:
    """Human-readable summary of a checkpoint header."""
    ckpt = read_header(path)
    meta = {k: v for k, v in ckpt.metadata.items() if k != "vocab"}
    lines = [f"checkpoint: {path}", f"format version: {FORMAT_VERSION}"]
    if "vocab" in ckpt.metadata:
        lines.append(f"vocabulary: {len(ckpt.metadata['vocab'])} regular tokens")
    lines.append("metadata:")
    lines.append(json.dumps(meta, sort_keys=True, indent=2))
    total = 0
    lines.append(f"tensors ({len(ckpt.directory)}):")
    for entry in ckpt.directory:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        total += count
        shape = "x".join(map(str, entry["shape"])) or "scalar"
        lines.append(f"  {entry['name']}  {entry['dtype']}  {shape}")
    lines.append(f"parameters: {total}")
    return "\n".join(lines)
