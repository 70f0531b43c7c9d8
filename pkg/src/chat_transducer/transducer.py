"""A complete toy transducer: encoder + stateless predictor + one joiner variant."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .chunking import ChunkSpec, partition
from .joiner import JoinerConfig, build_joint_lattice, init_joiner
from .lattice import JointLattice, batch_loss, transducer_loss
from .model import (
    EncoderConfig,
    ModelParams,
    PredictorConfig,
    encode,
    init_encoder,
    init_predictor,
    predict_states,
)
from .numerics import Tensor


@dataclass
class Transducer:
    spec: ChunkSpec
    enc_cfg: EncoderConfig
    pred_cfg: PredictorConfig
    join_cfg: JoinerConfig
    params: ModelParams

    @classmethod
    def create(
        cls,
        variant: str,
        input_dim: int,
        vocab_size: int,
        d_enc: int = 32,
        d_pred: int = 32,
        d_joint: int = 32,
        num_heads: int = 4,
        chunk_size: int = 12,
        left_context: int = 6,
        frame_duration_ms: float = 10.0,
        num_sa_layers: int = 1,
        num_heads_enc: int = 2,
        stack_factor: int = 1,
        context_size: int = 1,
        seed: int = 0,
    ) -> Transducer:
        spec = ChunkSpec(chunk_size, left_context, frame_duration_ms)
        enc_cfg = EncoderConfig(input_dim, d_enc, num_sa_layers, num_heads_enc, stack_factor)
        pred_cfg = PredictorConfig(vocab_size, d_pred, context_size)
        join_cfg = JoinerConfig(d_enc, d_pred, d_joint, vocab_size, num_heads, variant)
        rng = np.random.default_rng(seed)
        params = ModelParams()
        init_encoder(params, enc_cfg, rng)
        init_predictor(params, pred_cfg, rng)
        init_joiner(params, join_cfg, rng)
        return cls(spec, enc_cfg, pred_cfg, join_cfg, params)

    @property
    def variant(self) -> str:
        return self.join_cfg.variant

    @property
    def blank(self) -> int:
        return self.join_cfg.blank

    def with_params(self, params: ModelParams) -> Transducer:
        return Transducer(self.spec, self.enc_cfg, self.pred_cfg, self.join_cfg, params)

    def num_steps(self, num_input_frames: int) -> int:
        T = num_input_frames // self.enc_cfg.stack_factor
        return self.spec.num_chunks(T) if self.variant == "chat" else T

    def encode(self, features) -> Tensor:
        x = features if isinstance(features, Tensor) else Tensor(features)
        return encode(x, self.spec, self.enc_cfg, self.params)

    def encode_np(self, features) -> np.ndarray:
        """Encoder output as a plain array; safe to call inside an active graph."""
        x = Tensor(np.asarray(features, dtype=np.float64))
        return encode(x, self.spec, self.enc_cfg, self.params.frozen()).data

    def lattice(self, features, targets: Sequence[int]) -> JointLattice:
        enc = self.encode(features)
        states = predict_states(targets, self.pred_cfg, self.params)
        return build_joint_lattice(partition(enc, self.spec), states, self.params, self.join_cfg)

    def loss(self, features, targets: Sequence[int]) -> Tensor:
        return transducer_loss(self.lattice(features, targets), targets)

    def batch_loss(self, batch: Sequence[tuple[np.ndarray, Sequence[int]]]) -> tuple[Tensor, int]:
        """Batch-mean loss and the total number of joint-lattice elements built."""
        items = [(self.lattice(x, y), y) for x, y in batch]
        return batch_loss(items), sum(lat.num_elements for lat, _ in items)

