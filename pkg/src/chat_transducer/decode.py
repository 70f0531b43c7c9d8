"""Greedy transducer decoding: per-utterance and batched label-looping.

At every decision step (a frame for RNN-T, a chunk for CHAT) the joiner is
evaluated for the current label history. A non-blank argmax is emitted and
the decoder stays on the step with an updated predictor state; a blank, or
reaching ``max_symbols_per_step`` emissions, moves to the next step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .joiner import AttentionRecord, FrameCache, StepKernel, frame_cache
from .transducer import Transducer


@dataclass(frozen=True)
class DecodeConfig:
    max_symbols_per_step: int = 10

    def __post_init__(self):
        if self.max_symbols_per_step < 1:
            raise ValueError("max_symbols_per_step must be >= 1")


@dataclass
class DecodePath:
    tokens: list[int] = field(default_factory=list)
    emit_steps: list[int] = field(default_factory=list)
    attn: list[AttentionRecord] = field(default_factory=list)
    blank_count: int = 0
    num_steps: int = 0
    variant: str = "chat"

    def same_output(self, other: DecodePath) -> bool:
        return (
            self.tokens == other.tokens
            and self.emit_steps == other.emit_steps
            and self.blank_count == other.blank_count
        )


def count_joiner_calls(path: DecodePath) -> int:
    """Blanks plus emissions: the number of joiner evaluations in an uncapped decode."""
    return path.blank_count + len(path.tokens)


class _Predictor:
    def __init__(self, model: Transducer):
        self.embed = model.params["pred.embed"].data
        self.start = model.params["pred.start"].data
        self.k = model.pred_cfg.context_size

    def state(self, history: Sequence[int]) -> np.ndarray:
        if not history:
            return self.start
        return self.embed[list(history[-self.k:])].mean(axis=0)


def prepare(model: Transducer, features) -> FrameCache:
    """Encode one utterance and precompute its encoder-side joiner inputs."""
    enc = model.encode_np(features)
    return frame_cache(enc, model.spec, model.params, model.join_cfg)


def _step_rows(kernel: StepKernel, caches: Sequence[FrameCache], steps: Sequence[int], preds: np.ndarray):
    if len(caches) == 1:
        c, s = caches[0], int(steps[0])
        if kernel.cfg.variant == "rnnt":
            return kernel.rnnt(c.proj[s : s + 1], preds), None
        return kernel.chat(c.keys[s : s + 1], c.values[s : s + 1], c.bias[s : s + 1], preds)
    if kernel.cfg.variant == "rnnt":
        enc = np.stack([c.proj[s] for c, s in zip(caches, steps)])
        return kernel.rnnt(enc, preds), None
    keys = np.stack([c.keys[s] for c, s in zip(caches, steps)])
    values = np.stack([c.values[s] for c, s in zip(caches, steps)])
    bias = np.stack([c.bias[s] for c, s in zip(caches, steps)])
    return kernel.chat(keys, values, bias, preds)


def greedy_decode(model: Transducer, source, cfg: DecodeConfig = DecodeConfig()) -> DecodePath:
    """Decode one utterance given its features or a prepared :class:`FrameCache`."""
    cache = source if isinstance(source, FrameCache) else prepare(model, source)
    kernel = StepKernel(model.params, model.join_cfg)
    pred = _Predictor(model)
    blank = model.blank
    path = DecodePath(num_steps=cache.steps, variant=model.variant)
    state = pred.state(path.tokens)[None, :]
    for s in range(cache.steps):
        emitted = 0
        while True:
            logp, alpha = _step_rows(kernel, [cache], [s], state)
            k = int(np.argmax(logp[0]))
            if k == blank:
                break
            path.tokens.append(k)
            path.emit_steps.append(s)
            if alpha is not None:
                path.attn.append(AttentionRecord(alpha[0, :, : cache.lens[s]].copy()))
            state = pred.state(path.tokens)[None, :]
            emitted += 1
            if emitted == cfg.max_symbols_per_step:
                break
        path.blank_count += 1
    return path


def batched_decode(model: Transducer, sources: Sequence, cfg: DecodeConfig = DecodeConfig()) -> list[DecodePath]:
    """Label-looping greedy decode of a batch; identical to per-utterance greedy_decode.

    Each iteration makes one joiner call for every still-active utterance.
    Rows that emit a label stay on their step and refresh their predictor
    state; rows that emit blank (or hit the emission cap) advance their step.
    Utterances past their last step drop out of the active set.
    """
    if not sources:
        raise ValueError("batched_decode needs at least one utterance")
    caches = [s if isinstance(s, FrameCache) else prepare(model, s) for s in sources]
    kernel = StepKernel(model.params, model.join_cfg)
    pred = _Predictor(model)
    blank = model.blank
    B = len(caches)
    paths = [DecodePath(num_steps=c.steps, variant=model.variant) for c in caches]
    step = np.zeros(B, dtype=np.int64)
    emitted = np.zeros(B, dtype=np.int64)
    states = np.stack([pred.state([]) for _ in range(B)])
    active = np.array([c.steps > 0 for c in caches])
    while active.any():
        rows = np.flatnonzero(active)
        logp, alpha = _step_rows(kernel, [caches[b] for b in rows], step[rows], states[rows])
        labels = np.argmax(logp, axis=-1)
        for i, b in enumerate(rows):
            k = int(labels[i])
            path = paths[b]
            advance = k == blank
            if not advance:
                path.tokens.append(k)
                path.emit_steps.append(int(step[b]))
                if alpha is not None:
                    path.attn.append(AttentionRecord(alpha[i, :, : caches[b].lens[step[b]]].copy()))
                states[b] = pred.state(path.tokens)
                emitted[b] += 1
                advance = emitted[b] == cfg.max_symbols_per_step
            if advance:
                path.blank_count += 1
                step[b] += 1
                emitted[b] = 0
                if step[b] == caches[b].steps:
                    active[b] = False
    return paths
