"""Chunk partitioning of encoder outputs and chunk-aware attention masks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import Tensor


class EmptyInputError(ValueError):
    pass


@dataclass(frozen=True)
class ChunkSpec:
    """Streaming geometry: frames per chunk, visible history, frame duration."""

    chunk_size: int = 12
    left_context: int = 6
    frame_duration_ms: float = 10.0

    def __post_init__(self):
        if self.chunk_size < 1:
            raise ValueError(f"chunk_size must be >= 1, got {self.chunk_size}")
        if self.left_context < 0:
            raise ValueError(f"left_context must be >= 0, got {self.left_context}")
        if not self.frame_duration_ms > 0:
            raise ValueError(f"frame_duration_ms must be > 0, got {self.frame_duration_ms}")

    def num_chunks(self, total_frames: int) -> int:
        return math.ceil(total_frames / self.chunk_size)

    def chunk_of(self, frame: int) -> int:
        return frame // self.chunk_size


@dataclass
class ChunkedEncoding:
    """Encoder output split into chunks, each ending with an all-zero row.

    ``chunks[n]`` has ``real_lens[n] + 1`` rows. The chunks may be slices of a
    differentiable encoder output (training) or plain constants (inference).
    """

    chunks: list[Tensor]
    real_lens: list[int]
    total_frames: int
    chunk_size: int
    starts: list[int] = field(default_factory=list)
    source: Tensor | None = None  # the unchunked [T, d] encoder output

    @property
    def num_chunks(self) -> int:
        return len(self.chunks)

    def real_frames(self, n: int) -> np.ndarray:
        return self.chunks[n].data[: self.real_lens[n]]


def partition(enc: Tensor, spec: ChunkSpec) -> ChunkedEncoding:
    """Split ``enc`` [T, d] into ceil(T / C) chunks and append a zero frame to each.

    The final chunk keeps its natural length when C does not divide T.
    """
    if enc.ndim != 2:
        raise ValueError(f"partition expects a [T, d] matrix, got shape {list(enc.shape)}")
    T, d = enc.shape
    if T == 0:
        raise EmptyInputError("cannot partition an empty encoder output")
    C = spec.chunk_size
    sizes = [min(C, T - s) for s in range(0, T, C)]
    pieces = nx.split(enc, sizes, dim=0)
    zero = Tensor(np.zeros((1, d)))
    chunks = [nx.concat([p, zero], dim=0) for p in pieces]
    return ChunkedEncoding(chunks, sizes, T, C, list(range(0, T, C)), source=enc)


def encoder_mask(T: int, spec: ChunkSpec) -> np.ndarray:
    """Boolean [T, T] mask: frame i sees frame j iff chunk(j) is in [chunk(i) - L, chunk(i)]."""
    if T < 1:
        raise EmptyInputError("encoder_mask needs T >= 1")
    c = np.arange(T) // spec.chunk_size
    diff = c[:, None] - c[None, :]
    return (diff >= 0) & (diff <= spec.left_context)
