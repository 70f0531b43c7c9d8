"""Chunk-wise attention transducer (CHAT) and an RNN-T baseline on a small numpy autodiff core."""

from .chunking import ChunkSpec, ChunkedEncoding, encoder_mask, partition
from .decode import DecodeConfig, DecodePath, batched_decode, count_joiner_calls, greedy_decode
from .joiner import AttentionRecord, JoinerConfig, additive_join, attention_join, build_joint_lattice
from .lattice import AlignmentPath, JointLattice, best_path, oracle_loss, transducer_loss
from .metrics import emission_timestamps, export_alignment, lattice_memory, wer
from .model import EncoderConfig, ModelParams, PredictorConfig, load_checkpoint, save_checkpoint
from .transducer import Transducer

__version__ = "0.1.0"
