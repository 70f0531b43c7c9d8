"""Additive RNN-T joiner and the chunk-wise multi-head attention joiner.

Weights are stored as [in, out] and applied to row vectors (``x @ W``). No
projection carries a bias, so the zero frame appended to every chunk always
has an exactly-zero key and value.

Two code paths exist for each joiner: differentiable :class:`Tensor` functions
used for training and lattice construction, and batched numpy kernels used by
the decoders. The kernels reduce only along the trailing axis, so a row's
result does not depend on how many other rows share the call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .chunking import ChunkedEncoding, ChunkSpec
from .errors import ContractError
from .lattice import JointLattice
from .model import ModelParams, uniform_init
from .numerics import Tensor

VARIANTS = ("rnnt", "chat")


@dataclass(frozen=True)
class JoinerConfig:
    d_enc: int
    d_pred: int
    d_joint: int
    vocab_size: int
    num_heads: int = 4
    variant: str = "chat"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant == "chat":
            if self.d_joint % self.num_heads:
                raise ValueError(f"d_joint={self.d_joint} not divisible by num_heads={self.num_heads}")
            if self.d_pred != self.d_joint:
                raise ValueError(f"chat joiner adds c and h_pred directly: d_pred={self.d_pred} != d_joint={self.d_joint}")

    @property
    def blank(self) -> int:
        return self.vocab_size

    @property
    def head_dim(self) -> int:
        return self.d_joint // self.num_heads


def init_joiner(params: ModelParams, cfg: JoinerConfig, rng: np.random.Generator) -> None:
    if cfg.variant == "rnnt":
        params.add("join.enc", uniform_init(rng, (cfg.d_enc, cfg.d_joint), cfg.d_enc))
        params.add("join.pred", uniform_init(rng, (cfg.d_pred, cfg.d_joint), cfg.d_pred))
    else:
        params.add("join.q", uniform_init(rng, (cfg.d_pred, cfg.d_joint), cfg.d_pred))
        params.add("join.k", uniform_init(rng, (cfg.d_enc, cfg.d_joint), cfg.d_enc))
        params.add("join.v", uniform_init(rng, (cfg.d_enc, cfg.d_joint), cfg.d_enc))
    params.add("join.out", uniform_init(rng, (cfg.d_joint, cfg.vocab_size + 1), cfg.d_joint))


@dataclass
class AttentionRecord:
    """Per-head attention over the chunk's real frames plus the zero frame."""

    weights: np.ndarray  # [H, m + 1]

    @property
    def summed_weights(self) -> np.ndarray:
        return self.weights.sum(axis=0)

    @property
    def num_heads(self) -> int:
        return self.weights.shape[0]


def additive_join(h_enc: Tensor, h_pred: Tensor, params: ModelParams) -> Tensor:
    """log_softmax(W_out . ReLU(W_enc h_enc + W_pred h_pred)) for one (frame, label) cell."""
    hidden = nx.relu(nx.add(nx.matmul(_row(h_enc), params["join.enc"]), nx.matmul(_row(h_pred), params["join.pred"])))
    return nx.reshape(nx.log_softmax(nx.matmul(hidden, params["join.out"])), (-1,))


def attention_join(
    chunk: Tensor, h_pred: Tensor, params: ModelParams, cfg: JoinerConfig
) -> tuple[Tensor, AttentionRecord]:
    """Attend from one predictor state over one chunk (zero frame last)."""
    if chunk.ndim != 2 or chunk.shape[0] < 2:
        raise nx.DimensionError(f"chunk must be [(m+1), d_enc] with m >= 1, got {list(chunk.shape)}")
    if __debug__ and np.any(chunk.data[-1] != 0.0):
        raise ContractError("last chunk row must be the appended zero frame")
    H, dh = cfg.num_heads, cfg.head_dim
    rows = chunk.shape[0]
    q = nx.reshape(nx.matmul(_row(h_pred), params["join.q"]), (H, 1, dh))
    k = nx.transpose(nx.reshape(nx.matmul(chunk, params["join.k"]), (rows, H, dh)), (1, 2, 0))
    v = nx.transpose(nx.reshape(nx.matmul(chunk, params["join.v"]), (rows, H, dh)), (1, 0, 2))
    alpha = nx.softmax(nx.scale(nx.matmul(q, k), 1.0 / math.sqrt(dh)), dim=-1)  # [H, 1, rows]
    ctx = nx.reshape(nx.matmul(alpha, v), (1, cfg.d_joint))
    hidden = nx.relu(nx.add(ctx, _row(h_pred)))
    logp = nx.reshape(nx.log_softmax(nx.matmul(hidden, params["join.out"])), (-1,))
    return logp, AttentionRecord(alpha.data[:, 0, :].copy())


def _row(x: Tensor) -> Tensor:
    return nx.reshape(x, (1, -1)) if x.ndim == 1 else x


def chunk_gather_plan(real_lens: list[int], starts: list[int], T: int, C: int) -> tuple[np.ndarray, np.ndarray]:
    """Row indices [N, C+1] into ``concat(enc, zero_row)`` and a validity mask.

    Chunk n lists its real frames, then the zero row (index T), then padding
    (also index T, masked out) up to C + 1 positions.
    """
    N = len(real_lens)
    idx = np.full((N, C + 1), T, dtype=np.int64)
    valid = np.zeros((N, C + 1), dtype=bool)
    for n, (s, m) in enumerate(zip(starts, real_lens)):
        idx[n, :m] = np.arange(s, s + m)
        valid[n, : m + 1] = True
    return idx, valid


def _lattice_rnnt(enc: Tensor, pred_states: Tensor, params: ModelParams) -> JointLattice:
    T, U1 = enc.shape[0], pred_states.shape[0]
    e = nx.matmul(enc, params["join.enc"])
    p = nx.matmul(pred_states, params["join.pred"])
    dj = e.shape[1]
    hidden = nx.relu(nx.add(nx.reshape(e, (T, 1, dj)), nx.reshape(p, (1, U1, dj))))
    return JointLattice(nx.log_softmax(nx.matmul(hidden, params["join.out"]), dim=-1))


def _lattice_chat(chunked: ChunkedEncoding, enc: Tensor, pred_states: Tensor, params: ModelParams, cfg: JoinerConfig) -> JointLattice:
    T, d = enc.shape
    C, H, dh = chunked.chunk_size, cfg.num_heads, cfg.head_dim
    N, U1 = chunked.num_chunks, pred_states.shape[0]
    idx, valid = chunk_gather_plan(chunked.real_lens, chunked.starts, T, C)
    table = nx.concat([enc, Tensor(np.zeros((1, d)))], dim=0)
    x = nx.embedding(table, idx)  # [N, C+1, d]
    k = nx.transpose(nx.reshape(nx.matmul(x, params["join.k"]), (N, C + 1, H, dh)), (0, 2, 3, 1))
    v = nx.transpose(nx.reshape(nx.matmul(x, params["join.v"]), (N, C + 1, H, dh)), (0, 2, 1, 3))
    q = nx.transpose(nx.reshape(nx.matmul(pred_states, params["join.q"]), (1, U1, H, dh)), (0, 2, 1, 3))
    scores = nx.scale(nx.matmul(q, k), 1.0 / math.sqrt(dh))  # [N, H, U+1, C+1]
    bias = Tensor(np.where(valid, 0.0, -np.inf)[:, None, None, :])
    alpha = nx.softmax(nx.add(scores, bias), dim=-1)
    ctx = nx.reshape(nx.transpose(nx.matmul(alpha, v), (0, 2, 1, 3)), (N, U1, cfg.d_joint))
    hidden = nx.relu(nx.add(ctx, nx.reshape(pred_states, (1, U1, cfg.d_pred))))
    logp = nx.log_softmax(nx.matmul(hidden, params["join.out"]), dim=-1)
    return JointLattice(logp, attention=alpha.data)


def build_joint_lattice(
    chunked: ChunkedEncoding,
    pred_states: Tensor,
    params: ModelParams,
    cfg: JoinerConfig,
    cellwise: bool = False,
) -> JointLattice:
    """Joint log-probabilities over every (decision step, label position).

    rnnt gives [T, U+1, V+1] (one step per frame); chat gives [N, U+1, V+1]
    (one step per chunk). ``cellwise`` evaluates each cell with the single-cell
    joins instead of the vectorized path; both agree to rounding.
    """
    enc = chunked.source if chunked.source is not None else _real_frames(chunked)
    if cellwise:
        return _lattice_cellwise(chunked, enc, pred_states, params, cfg)
    if cfg.variant == "rnnt":
        return _lattice_rnnt(enc, pred_states, params)
    return _lattice_chat(chunked, enc, pred_states, params, cfg)


def _real_frames(chunked: ChunkedEncoding) -> Tensor:
    parts = [nx.split(c, [m, 1], dim=0)[0] for c, m in zip(chunked.chunks, chunked.real_lens)]
    return nx.concat(parts, dim=0)


def _lattice_cellwise(chunked, enc, pred_states, params, cfg) -> JointLattice:
    U1 = pred_states.shape[0]
    preds = nx.split(pred_states, [1] * U1, dim=0)
    rows = []
    if cfg.variant == "rnnt":
        for frame in nx.split(enc, [1] * enc.shape[0], dim=0):
            rows.append(nx.concat([nx.reshape(additive_join(frame, p, params), (1, 1, -1)) for p in preds], dim=1))
    else:
        for chunk in chunked.chunks:
            cells = [attention_join(chunk, p, params, cfg)[0] for p in preds]
            rows.append(nx.concat([nx.reshape(c, (1, 1, -1)) for c in cells], dim=1))
    return JointLattice(nx.concat(rows, dim=0))


# numpy inference kernels --------------------------------------------------


def _rowdot(x: np.ndarray, w_t: np.ndarray) -> np.ndarray:
    """[B, k] x ([n, k] transposed weight) -> [B, n], reducing along the last axis only."""
    return (x[:, None, :] * w_t[None, :, :]).sum(axis=-1)


def _log_softmax_rows(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@dataclass
class FrameCache:
    """Per-utterance encoder-side joiner inputs, computed once before decoding."""

    steps: int
    proj: np.ndarray | None = None  # rnnt: [T, d_joint]
    keys: np.ndarray | None = None  # chat: [N, H, C+1, dh]
    values: np.ndarray | None = None  # chat: [N, H, dh, C+1]
    lens: np.ndarray | None = None  # chat: real_len + 1 per chunk
    bias: np.ndarray | None = None  # chat: [N, C+1], 0 on valid positions, -inf on padding


def frame_cache(enc: np.ndarray, spec: ChunkSpec, params: ModelParams, cfg: JoinerConfig) -> FrameCache:
    T = enc.shape[0]
    if cfg.variant == "rnnt":
        return FrameCache(T, proj=enc @ params["join.enc"].data)
    C, H, dh = spec.chunk_size, cfg.num_heads, cfg.head_dim
    starts = list(range(0, T, C))
    real = [min(C, T - s) for s in starts]
    idx, valid = chunk_gather_plan(real, starts, T, C)
    x = np.concatenate([enc, np.zeros((1, enc.shape[1]))])[idx]
    N = len(starts)
    keys = (x @ params["join.k"].data).reshape(N, C + 1, H, dh).transpose(0, 2, 1, 3)
    values = (x @ params["join.v"].data).reshape(N, C + 1, H, dh).transpose(0, 2, 3, 1)
    return FrameCache(N, keys=np.ascontiguousarray(keys), values=np.ascontiguousarray(values),
                      lens=np.asarray(real) + 1, bias=np.where(valid, 0.0, -np.inf))


class StepKernel:
    """Batched joiner evaluation for decoding; holds transposed weights."""

    def __init__(self, params: ModelParams, cfg: JoinerConfig):
        self.cfg = cfg
        self.out_t = np.ascontiguousarray(params["join.out"].data.T)
        if cfg.variant == "rnnt":
            self.pred_t = np.ascontiguousarray(params["join.pred"].data.T)
        else:
            self.q_t = np.ascontiguousarray(params["join.q"].data.T)

    def rnnt(self, enc_proj: np.ndarray, pred: np.ndarray) -> np.ndarray:
        hidden = np.maximum(enc_proj + _rowdot(pred, self.pred_t), 0.0)
        return _log_softmax_rows(_rowdot(hidden, self.out_t))

    def chat(self, keys: np.ndarray, values: np.ndarray, bias: np.ndarray, pred: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """keys [B, H, C+1, dh], values [B, H, dh, C+1], bias [B, C+1], pred [B, d_pred]
        -> (logp [B, V+1], alpha [B, H, C+1])."""
        B, H, P, dh = keys.shape
        q = _rowdot(pred, self.q_t).reshape(B, H, 1, dh)
        scores = (q * keys).sum(axis=-1) * (1.0 / math.sqrt(dh)) + bias[:, None, :]  # [B, H, P]
        z = np.exp(scores - scores.max(axis=-1, keepdims=True))
        alpha = z / z.sum(axis=-1, keepdims=True)
        ctx = (alpha[:, :, None, :] * values).sum(axis=-1)  # [B, H, dh]
        hidden = np.maximum(ctx.reshape(B, H * dh) + pred, 0.0)
        return _log_softmax_rows(_rowdot(hidden, self.out_t)), alpha
