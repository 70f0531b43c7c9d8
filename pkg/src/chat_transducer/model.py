"""Toy chunk-aware encoder, stateless predictor, parameters and checkpoints."""

from __future__ import annotations

import math
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import numerics as nx
from .chunking import ChunkSpec, EmptyInputError, encoder_mask
from .errors import VocabularyError
from .numerics import Tensor


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    d_enc: int
    num_sa_layers: int = 1
    num_heads_enc: int = 2
    stack_factor: int = 1

    def __post_init__(self):
        if self.stack_factor < 1:
            raise ValueError("stack_factor must be >= 1")
        if self.d_enc % self.num_heads_enc:
            raise ValueError(f"d_enc={self.d_enc} not divisible by num_heads_enc={self.num_heads_enc}")


@dataclass(frozen=True)
class PredictorConfig:
    vocab_size: int
    d_pred: int
    context_size: int = 1

    def __post_init__(self):
        if self.context_size < 1:
            raise ValueError("context_size must be >= 1")


class ModelParams:
    """Ordered name -> Tensor registry; shapes are fixed once registered."""

    def __init__(self, items: Sequence[tuple[str, Tensor]] = ()):
        self._t: OrderedDict[str, Tensor] = OrderedDict()
        for name, t in items:
            self.add(name, t)

    def add(self, name: str, t: Tensor) -> Tensor:
        if name in self._t:
            raise KeyError(f"duplicate parameter name {name!r}")
        t.requires_grad = True
        t.name = name
        self._t[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._t[name]

    def __contains__(self, name: str) -> bool:
        return name in self._t

    def __iter__(self) -> Iterator[str]:
        return iter(self._t)

    def __len__(self) -> int:
        return len(self._t)

    def items(self):
        return self._t.items()

    def names(self) -> list[str]:
        return list(self._t)

    def zero_grad(self) -> None:
        for t in self._t.values():
            t.grad = None

    def assign(self, name: str, value) -> None:
        """Overwrite a parameter's values in place of its array (shape must match)."""
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != self._t[name].shape:
            raise nx.DimensionError(f"{name}: expected {list(self._t[name].shape)}, got {list(arr.shape)}")
        self._t[name].data = np.ascontiguousarray(arr)

    def copy(self) -> ModelParams:
        return ModelParams([(n, Tensor(t.data.copy())) for n, t in self._t.items()])

    def frozen(self) -> ModelParams:
        """Same arrays, wrapped in tensors that never record on a graph."""
        out = ModelParams()
        out._t.update((n, Tensor(t.data, name=n)) for n, t in self._t.items())
        return out

    def num_elements(self) -> int:
        return int(sum(t.data.size for t in self._t.values()))

    def equal(self, other: ModelParams) -> bool:
        """Bitwise equality of names, shapes and values."""
        if self.names() != other.names():
            return False
        return all(
            a.shape == b.shape and a.data.tobytes() == b.data.tobytes()
            for a, b in zip(self._t.values(), other._t.values())
        )


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape))


def init_encoder(params: ModelParams, cfg: EncoderConfig, rng: np.random.Generator) -> None:
    fan = cfg.input_dim * cfg.stack_factor
    params.add("enc.in", uniform_init(rng, (fan, cfg.d_enc), fan))
    for i in range(cfg.num_sa_layers):
        for w in ("q", "k", "v", "o"):
            params.add(f"enc.sa{i}.{w}", uniform_init(rng, (cfg.d_enc, cfg.d_enc), cfg.d_enc))


def init_predictor(params: ModelParams, cfg: PredictorConfig, rng: np.random.Generator) -> None:
    # one-hot lookups have fan-in 1
    params.add("pred.embed", uniform_init(rng, (cfg.vocab_size, cfg.d_pred), 1))
    params.add("pred.start", uniform_init(rng, (cfg.d_pred,), 1))


def stack_frames(x: Tensor, s: int) -> Tensor:
    T_in, dim = x.shape
    T = T_in // s
    if T == 0:
        raise EmptyInputError(f"{T_in} input frames cannot fill one stack of {s}")
    if T * s != T_in:
        x = nx.split(x, [T * s, T_in - T * s], dim=0)[0]
    return nx.reshape(x, (T, s * dim)) if s > 1 else x


def _masked_self_attention(x: Tensor, params: ModelParams, prefix: str, heads: int, bias: Tensor) -> Tensor:
    T, d = x.shape
    dh = d // heads

    def split_heads(t: Tensor) -> Tensor:
        return nx.transpose(nx.reshape(t, (T, heads, dh)), (1, 0, 2))

    q = split_heads(nx.matmul(x, params[f"{prefix}.q"]))
    k = split_heads(nx.matmul(x, params[f"{prefix}.k"]))
    v = split_heads(nx.matmul(x, params[f"{prefix}.v"]))
    scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    attn = nx.softmax(nx.add(scores, bias), dim=-1)
    ctx = nx.reshape(nx.transpose(nx.matmul(attn, v), (1, 0, 2)), (T, d))
    return nx.matmul(ctx, params[f"{prefix}.o"])


def encode(x: Tensor, spec: ChunkSpec, cfg: EncoderConfig, params: ModelParams) -> Tensor:
    """Map [T_in, input_dim] features to [T_in // s, d_enc] chunk-causal encodings."""
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise nx.DimensionError(f"encoder expects [T, {cfg.input_dim}] input, got {list(x.shape)}")
    h = nx.relu(nx.matmul(stack_frames(x, cfg.stack_factor), params["enc.in"]))
    if cfg.num_sa_layers:
        mask = encoder_mask(h.shape[0], spec)
        bias = Tensor(np.where(mask, 0.0, -np.inf))
        for i in range(cfg.num_sa_layers):
            h = nx.add(h, _masked_self_attention(h, params, f"enc.sa{i}", cfg.num_heads_enc, bias))
    return h


def _check_ids(ids: Sequence[int], vocab_size: int) -> None:
    for t in ids:
        if not 0 <= t < vocab_size:
            raise VocabularyError(f"token id {t} outside [0, {vocab_size})")


def predict(history: Sequence[int], cfg: PredictorConfig, params: ModelParams) -> Tensor:
    """Predictor state for one label history: mean of the last context_size embeddings."""
    _check_ids(history, cfg.vocab_size)
    if not history:
        return params["pred.start"]
    recent = list(history)[-cfg.context_size:]
    return nx.mean(nx.embedding(params["pred.embed"], recent), dim=0)


def predict_states(targets: Sequence[int], cfg: PredictorConfig, params: ModelParams) -> Tensor:
    """Stack predictor states for histories y[:0], y[:1], ..., y[:U] into [U+1, d_pred]."""
    _check_ids(targets, cfg.vocab_size)
    start = nx.reshape(params["pred.start"], (1, cfg.d_pred))
    U = len(targets)
    if U == 0:
        return start
    emb = nx.embedding(params["pred.embed"], list(targets))
    if cfg.context_size > 1:
        avg = np.zeros((U, U))
        for u in range(1, U + 1):
            lo = max(0, u - cfg.context_size)
            avg[u - 1, lo:u] = 1.0 / (u - lo)
        emb = nx.matmul(Tensor(avg), emb)
    return nx.concat([start, emb], dim=0)


# checkpoint layout: b"CHATCKPT", u32 version, u32 count, then per entry
# u16 name length, name, u8 ndim, u32 dims..., little-endian f64 values
MAGIC = b"CHATCKPT"
VERSION = 1


def save_checkpoint(params: ModelParams, path) -> None:
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(params))
    for name, t in params.items():
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", t.ndim)
        out += struct.pack(f"<{t.ndim}I", *t.shape)
        out += t.data.astype("<f8", copy=False).tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> ModelParams:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedCheckpointError(f"{path}: needed {n} bytes at offset {pos}, file has {len(buf)}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if len(buf) >= len(MAGIC) and buf[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (bad magic)")
    take(len(MAGIC))
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: checkpoint version {version}, expected {VERSION}")
    params = ModelParams()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(dims)) if ndim else 1
        values = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
        params.add(name, Tensor(values))
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return params
