"""Error rates, emission latency, alignment export and joint-lattice memory."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .chunking import ChunkSpec
from .decode import DecodePath

ALIGNMENT_FORMAT_VERSION = 1
LATENCY_COLUMNS = ("utterance_id", "n_tokens", "mean_ts_ms")


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance with unit substitution, deletion and insertion costs."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def _words(x) -> list:
    return x.split() if isinstance(x, str) else list(x)


def wer(ref, hyp) -> float:
    ref, hyp = _words(ref), _words(hyp)
    if not ref:
        raise ZeroDivisionError("WER is undefined for an empty reference")
    return edit_distance(ref, hyp) / len(ref)


def corpus_wer(refs: Iterable, hyps: Iterable) -> float:
    errors = words = 0
    for r, h in zip(refs, hyps):
        r = _words(r)
        errors += edit_distance(r, _words(h))
        words += len(r)
    if not words:
        raise ZeroDivisionError("WER is undefined for an empty reference corpus")
    return errors / words


@dataclass
class LatencyReport:
    utterance_id: str
    timestamps_ms: list[float] = field(default_factory=list)

    @property
    def n_tokens(self) -> int:
        return len(self.timestamps_ms)

    @property
    def mean_ms(self) -> float | None:
        """None when nothing was emitted."""
        if not self.timestamps_ms:
            return None
        return sum(self.timestamps_ms) / len(self.timestamps_ms)


def chunk_duration_ms(spec: ChunkSpec, subsample: int = 1) -> float:
    return spec.chunk_size * subsample * spec.frame_duration_ms


def emission_timestamps(path: DecodePath, spec: ChunkSpec, subsample: int = 1, utterance_id: str = "") -> LatencyReport:
    """Tokens are released at the end of the chunk they were emitted from."""
    dur = chunk_duration_ms(spec, subsample)
    if path.variant == "chat":
        chunks = path.emit_steps
    else:
        chunks = [t // spec.chunk_size for t in path.emit_steps]
    return LatencyReport(utterance_id, [(n + 1) * dur for n in chunks])


def write_latency_csv(reports: Sequence[LatencyReport], out) -> None:
    with open(out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LATENCY_COLUMNS)
        for r in reports:
            w.writerow([r.utterance_id, r.n_tokens, "" if r.mean_ms is None else repr(r.mean_ms)])


def lattice_memory(B: int, T: int, U: int, V: int, C: int, bytes_per_element: int = 8) -> tuple[int, int, Fraction]:
    """Joint-tensor bytes for RNN-T and CHAT, and their exact ratio."""
    if min(B, T, U, V, C, bytes_per_element) <= 0:
        raise ValueError("lattice_memory arguments must all be positive")
    per_step = B * (U + 1) * (V + 1) * bytes_per_element
    rnnt = T * per_step
    chat = math.ceil(T / C) * per_step
    return rnnt, chat, Fraction(chat, rnnt)


@dataclass
class AlignmentDump:
    utterance_id: str
    variant: str
    chunk_path: list[tuple[int, int]]
    frame_heat: list[list[float]] | None = None
    frame_heat_raw: list[list[float]] | None = None
    chunk_starts: list[int] | None = None
    version: int = ALIGNMENT_FORMAT_VERSION

    def to_json(self) -> str:
        rec = {
            "version": self.version,
            "utterance_id": self.utterance_id,
            "variant": self.variant,
            "chunk_path": [list(p) for p in self.chunk_path],
        }
        if self.frame_heat is not None:
            rec["chunk_starts"] = self.chunk_starts
            rec["frame_heat"] = self.frame_heat
        if self.frame_heat_raw is not None:
            rec["frame_heat_raw"] = self.frame_heat_raw
        return json.dumps(rec, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> AlignmentDump:
        rec = json.loads(line)
        if rec.get("version") != ALIGNMENT_FORMAT_VERSION:
            raise ValueError(f"unsupported alignment format version {rec.get('version')!r}")
        return cls(
            rec["utterance_id"],
            rec["variant"],
            [tuple(p) for p in rec["chunk_path"]],
            rec.get("frame_heat"),
            rec.get("frame_heat_raw"),
            rec.get("chunk_starts"),
        )


def alignment_record(path: DecodePath, spec: ChunkSpec, utterance_id: str = "", raw: bool = False) -> AlignmentDump:
    """Chunk-level path plus, for CHAT, head-summed attention spread over frames.

    Each heat row covers the emitting chunk's real frames followed by its zero
    frame. ``frame_heat`` divides the head sum by the head count so rows sum
    to one; ``raw`` additionally keeps the undivided sums.
    """
    if path.variant == "chat":
        chunk_path = list(zip(path.tokens, path.emit_steps))
    else:
        chunk_path = [(k, t // spec.chunk_size) for k, t in zip(path.tokens, path.emit_steps)]
    dump = AlignmentDump(utterance_id, path.variant, chunk_path)
    if path.variant == "chat":
        sums = [rec.summed_weights for rec in path.attn]
        dump.frame_heat = [(s / rec.num_heads).tolist() for s, rec in zip(sums, path.attn)]
        dump.chunk_starts = [n * spec.chunk_size for n in path.emit_steps]
        if raw:
            dump.frame_heat_raw = [s.tolist() for s in sums]
    return dump


def export_alignment(dumps: Iterable[AlignmentDump], out) -> None:
    """Write one JSON record per line."""
    with open(out, "w") as f:
        for d in dumps:
            f.write(d.to_json() + "\n")


def read_alignment(path) -> list[AlignmentDump]:
    return [AlignmentDump.from_json(line) for line in Path(path).read_text().splitlines() if line.strip()]


def heat_row_sums(dump: AlignmentDump) -> np.ndarray:
    return np.array([sum(r) for r in dump.frame_heat or []])
