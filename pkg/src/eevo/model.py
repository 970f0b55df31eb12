"""Decoder-only toy transformer.

Pre-norm blocks (causal multi-head attention, then a GELU feed-forward),
learned absolute position embeddings, no biases. One unembedding matrix
``W`` is shared by every exit; hidden states pass through a shared final
layer norm (``ln_f``) before being projected, as a pre-norm stack does at
its last layer.

Weight file layout (little-endian, no padding)::

    b"EEVO"  u32 version
    u32 L, d_model, d_vocab, n_heads, d_ff, max_seq
    float32 tensors, row-major, in the order of ``tensor_layout(config)``

Vectors (layer-norm gains) are stored as their ``n`` values.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import core, flops
from .errors import (
    BadMagicError,
    CapacityError,
    ConfigError,
    HeaderConfigError,
    InvalidInputError,
    ShapeMismatchError,
    TruncatedFileError,
    WeightFormatError,
)

MAGIC = b"EEVO"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4s7I")

# Std of the unembedding relative to 1/sqrt(d_model). Exits see layer-normed
# states, so logits have std ~UNEMBED_GAIN; the other tensors follow
# BLOCK_STD_BASE / sqrt(L).
UNEMBED_GAIN = 4.0
BLOCK_STD_BASE = 0.02


@dataclass(frozen=True)
class ModelConfig:
    L: int = 8
    d_model: int = 64
    d_vocab: int = 512
    n_heads: int = 4
    d_ff: int = 256
    max_seq: int = 128

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("L", "d_model", "d_vocab", "n_heads", "d_ff", "max_seq"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.L < 2:
            raise ConfigError(f"L must be >= 2, got {self.L}")
        if self.d_vocab < 2:
            raise ConfigError(f"d_vocab must be >= 2, got {self.d_vocab}")
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class Block:
    ln1: np.ndarray
    Wq: np.ndarray
    Wk: np.ndarray
    Wv: np.ndarray
    Wo: np.ndarray
    ln2: np.ndarray
    W1: np.ndarray
    W2: np.ndarray

    TENSORS = ("ln1", "Wq", "Wk", "Wv", "Wo", "ln2", "W1", "W2")


@dataclass
class ModelWeights:
    config: ModelConfig
    E: np.ndarray
    P: np.ndarray
    blocks: list[Block]
    ln_f: np.ndarray
    W: np.ndarray

    def __post_init__(self):
        for name, expected, array in _iter_tensors(self):
            if array.shape != expected:
                raise ConfigError(f"{name} has shape {array.shape}, expected {expected}")
            if array.dtype != core.DTYPE:
                raise ConfigError(f"{name} must be float32, got {array.dtype}")
            core.check_finite(array, name)
            array.setflags(write=False)

    def tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        for name, _, array in _iter_tensors(self):
            yield name, array

    def equals(self, other: "ModelWeights") -> bool:
        """Bit-exact comparison (including the config)."""
        if self.config != other.config:
            return False
        return all(
            a.tobytes() == b.tobytes()
            for (_, a), (_, b) in zip(self.tensors(), other.tensors())
        )


def tensor_layout(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Names and shapes of every stored tensor, in file order."""
    d, V, F = config.d_model, config.d_vocab, config.d_ff
    layout = [("E", (V, d)), ("P", (config.max_seq, d))]
    block_shapes = {
        "ln1": (d,), "Wq": (d, d), "Wk": (d, d), "Wv": (d, d), "Wo": (d, d),
        "ln2": (d,), "W1": (F, d), "W2": (d, F),
    }
    for layer in range(1, config.L + 1):
        layout += [(f"blocks.{layer}.{n}", block_shapes[n]) for n in Block.TENSORS]
    layout += [("ln_f", (d,)), ("W", (V, d))]
    return layout


def _iter_tensors(weights: ModelWeights):
    for name, shape in tensor_layout(weights.config):
        if name.startswith("blocks."):
            _, layer, attr = name.split(".")
            array = getattr(weights.blocks[int(layer) - 1], attr)
        else:
            array = getattr(weights, name)
        yield name, shape, array


def _assemble(config: ModelConfig, tensors: dict[str, np.ndarray]) -> ModelWeights:
    blocks = [
        Block(**{n: tensors[f"blocks.{layer}.{n}"] for n in Block.TENSORS})
        for layer in range(1, config.L + 1)
    ]
    return ModelWeights(
        config=config,
        E=tensors["E"],
        P=tensors["P"],
        blocks=blocks,
        ln_f=tensors["ln_f"],
        W=tensors["W"],
    )


def init_random(config: ModelConfig, seed: int) -> ModelWeights:
    """Seeded Gaussian initialization.

    Draws come from numpy's Philox counter-based generator keyed by
    ``seed``, consumed tensor by tensor in file order. Layer-norm gains are
    ones. The unembedding has std ``UNEMBED_GAIN / sqrt(d_model)``; every
    other matrix has std ``0.02 / sqrt(L)``.
    """
    config.validate()
    if int(seed) < 0:
        raise InvalidInputError(f"seed must be non-negative, got {seed}")
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    std = BLOCK_STD_BASE / math.sqrt(config.L)
    tensors = {}
    for name, shape in tensor_layout(config):
        if len(shape) == 1:
            tensors[name] = np.ones(shape, dtype=core.DTYPE)
            continue
        scale = UNEMBED_GAIN / math.sqrt(config.d_model) if name == "W" else std
        tensors[name] = (rng.standard_normal(shape) * scale).astype(core.DTYPE)
    return _assemble(config, tensors)


def save_weights(weights: ModelWeights, path) -> None:
    c = weights.config
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, c.L, c.d_model, c.d_vocab,
                             c.n_heads, c.d_ff, c.max_seq))
        for _, array in weights.tensors():
            f.write(array.astype("<f4", copy=False).tobytes(order="C"))


def load_weights(path) -> ModelWeights:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"bad magic: expected {MAGIC!r}, got {data[:4]!r}", field="magic")
    if len(data) < _HEADER.size:
        raise TruncatedFileError("file truncated inside the header", field="header")
    _, version, *dims = _HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise HeaderConfigError(f"unsupported format version {version}", field="version")
    names = ("L", "d_model", "d_vocab", "n_heads", "d_ff", "max_seq")
    try:
        config = ModelConfig(**dict(zip(names, dims)))
    except ConfigError as exc:
        offending = next((n for n in names if str(exc).startswith(n)), "header")
        raise HeaderConfigError(f"config invariant violated: {exc}", field=offending) from exc

    offset = _HEADER.size
    tensors = {}
    for name, shape in tensor_layout(config):
        nbytes = 4 * math.prod(shape)
        if offset + nbytes > len(data):
            raise TruncatedFileError(
                f"file truncated in tensor {name}: need {nbytes} bytes at offset {offset}, "
                f"file has {len(data)}",
                field=name,
            )
        array = np.frombuffer(data, dtype="<f4", count=math.prod(shape), offset=offset)
        tensors[name] = array.astype(core.DTYPE).reshape(shape)
        offset += nbytes
    if offset != len(data):
        raise ShapeMismatchError(
            f"{len(data) - offset} trailing bytes after the last tensor; "
            "header dimensions do not match the payload",
            field="payload",
        )
    try:
        return _assemble(config, tensors)
    except Exception as exc:
        raise WeightFormatError(f"invalid tensor data: {exc}", field="payload") from exc


@dataclass
class KvCache:
    """Per-layer keys and values for every position processed so far."""

    config: ModelConfig
    keys: np.ndarray = field(init=False)
    values: np.ndarray = field(init=False)
    lengths: list[int] = field(init=False)

    def __post_init__(self):
        c = self.config
        self.keys = np.zeros((c.L, c.max_seq, c.d_model), dtype=core.DTYPE)
        self.values = np.zeros_like(self.keys)
        self.lengths = [0] * c.L

    def write(self, layer: int, position: int, k: np.ndarray, v: np.ndarray) -> None:
        i = layer - 1
        if position >= self.config.max_seq:
            raise CapacityError(
                f"position {position} exceeds max_seq {self.config.max_seq}"
            )
        if position != self.lengths[i]:
            raise InvalidInputError(
                f"cache at layer {layer} holds {self.lengths[i]} positions, "
                f"cannot write position {position}"
            )
        self.keys[i, position] = k
        self.values[i, position] = v
        self.lengths[i] = position + 1

    def clone(self) -> "KvCache":
        other = KvCache(self.config)
        other.keys[...] = self.keys
        other.values[...] = self.values
        other.lengths = list(self.lengths)
        return other


def embed(weights: ModelWeights, token_id: int, position: int | None = None) -> np.ndarray:
    """Row ``token_id`` of E, plus the position embedding when a position is given."""
    V = weights.config.d_vocab
    if not isinstance(token_id, (int, np.integer)) or not 0 <= token_id < V:
        raise InvalidInputError(f"token id {token_id!r} out of range [0, {V})")
    if position is None:
        return weights.E[token_id].copy()
    if not 0 <= position < weights.config.max_seq:
        raise CapacityError(f"position {position} exceeds max_seq {weights.config.max_seq}")
    return weights.E[token_id] + weights.P[position]


def kv_projection(block: Block, h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = core.layer_norm(h, block.ln1)
    return core.matvec(block.Wk, x), core.matvec(block.Wv, x)


def forward_block(
    weights: ModelWeights,
    layer: int,
    h: np.ndarray,
    cache: KvCache,
    position: int,
    ledger: "flops.FlopsLedger | None" = None,
) -> np.ndarray:
    """Compute the layer-``layer`` hidden state from the previous one.

    Keys/values for ``position`` are appended to the cache at this layer;
    attention covers positions ``0..position``.
    """
    c = weights.config
    if not 1 <= layer <= c.L:
        raise InvalidInputError(f"layer must be in [1, {c.L}], got {layer}")
    if position >= c.max_seq:
        raise CapacityError(f"position {position} exceeds max_seq {c.max_seq}")
    h = core.as_vector(h, "h")
    if h.shape[0] != c.d_model:
        raise InvalidInputError(f"hidden state has length {h.shape[0]}, expected {c.d_model}")
    block = weights.blocks[layer - 1]

    x = core.layer_norm(h, block.ln1)
    q = core.matvec(block.Wq, x)
    k = core.matvec(block.Wk, x)
    v = core.matvec(block.Wv, x)
    cache.write(layer, position, k, v)

    T = position + 1
    H, dh = c.n_heads, c.d_head
    keys = cache.keys[layer - 1, :T].reshape(T, H, dh)
    values = cache.values[layer - 1, :T].reshape(T, H, dh)
    scores = (keys * q.reshape(H, dh)).sum(axis=2, dtype=core.DTYPE) / core.DTYPE(math.sqrt(dh))
    scores = np.exp(scores - scores.max(axis=0))
    weights_t = scores / scores.sum(axis=0, dtype=core.DTYPE)
    mixed = (weights_t[:, :, None] * values).sum(axis=0, dtype=core.DTYPE).reshape(c.d_model)
    h = h + core.matvec(block.Wo, mixed)

    x = core.layer_norm(h, block.ln2)
    h = h + core.matvec(block.W2, core.gelu(core.matvec(block.W1, x)))

    if ledger is not None:
        ledger.record("layernorm", 2 * flops.layernorm_cost(c.d_model))
        ledger.record("attention", flops.attention_cost(c, T))
        ledger.record("ffn", flops.ffn_cost(c))
    return h


def final_norm(weights: ModelWeights, h: np.ndarray) -> np.ndarray:
    """Shared layer norm applied to a hidden state before unembedding."""
    return core.layer_norm(h, weights.ln_f)
