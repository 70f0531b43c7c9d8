"""Synthetic token-to-frames corpus and its line-oriented file format.

One record per line, tab-separated::

    utt_id  T_in  input_dim  f_0 f_1 ... f_{T_in*input_dim-1}  y_0 y_1 ...

Features are row-major and written with ``repr`` so they round-trip exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import VocabularyError


class DataFormatError(ValueError):
    pass


@dataclass
class DataRecord:
    utt_id: str
    features: np.ndarray  # [T_in, input_dim]
    targets: list[int]

    def to_line(self) -> str:
        T, d = self.features.shape
        feats = " ".join(repr(float(v)) for v in self.features.reshape(-1))
        toks = " ".join(str(t) for t in self.targets)
        return f"{self.utt_id}\t{T}\t{d}\t{feats}\t{toks}"

    @classmethod
    def from_line(cls, line: str, lineno: int = 0) -> DataRecord:
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 5:
            raise DataFormatError(f"line {lineno}: expected 5 tab-separated fields, got {len(parts)}")
        uid, T, d, feats, toks = parts
        try:
            T, d = int(T), int(d)
            values = np.array([float(v) for v in feats.split()], dtype=np.float64)
            targets = [int(t) for t in toks.split()]
        except ValueError as e:
            raise DataFormatError(f"line {lineno}: {e}") from None
        if values.size != T * d:
            raise DataFormatError(f"line {lineno}: {values.size} feature values, expected {T}x{d}")
        return cls(uid, values.reshape(T, d), targets)


def write_records(records: Sequence[DataRecord], path) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(r.to_line() + "\n")


def read_records(path, vocab_size: int | None = None, stack_factor: int = 1) -> list[DataRecord]:
    out = []
    for i, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        rec = DataRecord.from_line(line, i)
        if vocab_size is not None and any(not 0 <= t < vocab_size for t in rec.targets):
            raise VocabularyError(f"{path}:{i}: target id outside [0, {vocab_size})")
        if rec.features.shape[0] < stack_factor:
            raise DataFormatError(f"{path}:{i}: {rec.features.shape[0]} frames < stack_factor {stack_factor}")
        out.append(rec)
    return out


def gen_synthetic(
    n_utts: int,
    vocab_size: int,
    repeat: int = 4,
    noise: float = 0.0,
    seed: int = 0,
    input_dim: int = 16,
    min_tokens: int = 3,
    max_tokens: int = 8,
    adjacent_repeats: bool = False,
) -> list[DataRecord]:
    """Each token becomes ``repeat`` frames of its fixed random embedding plus noise.

    By default consecutive tokens differ: with a position-free encoder, two
    adjacent copies of one token produce indistinguishable frames.
    """
    if repeat < 1:
        raise ValueError("repeat must be >= 1")
    if not adjacent_repeats and vocab_size < 2:
        raise ValueError("need vocab_size >= 2 without adjacent repeats")
    rng = np.random.default_rng(seed)
    table = rng.normal(size=(vocab_size, input_dim))
    records = []
    for i in range(n_utts):
        n = int(rng.integers(min_tokens, max_tokens + 1))
        toks: list[int] = []
        while len(toks) < n:
            t = int(rng.integers(vocab_size))
            if adjacent_repeats or not toks or t != toks[-1]:
                toks.append(t)
        feats = np.repeat(table[toks], repeat, axis=0)
        if noise > 0:
            feats = feats + rng.normal(scale=noise, size=feats.shape)
        records.append(DataRecord(f"utt{i:05d}", feats, toks))
    return records
