"""SGD training on the batch-mean transducer loss, plus end-to-end gradient checks."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .config import RunConfig
from .data import DataRecord
from .decode import DecodeConfig, batched_decode
from .metrics import corpus_wer
from .model import ModelParams, save_checkpoint
from .transducer import Transducer

log = logging.getLogger(__name__)

TRAIN_LOG_COLUMNS = ("step", "loss", "wall_ms", "lattice_elems")


class TrainingError(RuntimeError):
    pass


def build_model(cfg: RunConfig, input_dim: int) -> Transducer:
    return Transducer.create(
        cfg.variant,
        input_dim=input_dim,
        vocab_size=cfg.vocab_size,
        d_enc=cfg.d_enc,
        d_pred=cfg.d_pred,
        d_joint=cfg.d_joint,
        num_heads=cfg.num_heads,
        chunk_size=cfg.chunk_size,
        left_context=cfg.left_context,
        frame_duration_ms=cfg.frame_duration_ms,
        num_sa_layers=cfg.num_sa_layers,
        num_heads_enc=cfg.num_heads_enc,
        stack_factor=cfg.stack_factor,
        context_size=cfg.context_size,
        seed=cfg.seed,
    )


def input_dim_of(cfg: RunConfig, records: Sequence[DataRecord]) -> int:
    if cfg.input_dim:
        return cfg.input_dim
    if not records:
        raise ValueError("input_dim is 0 and there is no data to infer it from")
    return records[0].features.shape[1]


def sgd_step(params: ModelParams, lr: float) -> None:
    for _, t in params.items():
        if t.grad is not None:
            t.data = t.data - lr * t.grad


def training_wer(model: Transducer, records: Sequence[DataRecord], dcfg: DecodeConfig, batch: int = 64) -> float:
    hyps = []
    for i in range(0, len(records), batch):
        hyps += [p.tokens for p in batched_decode(model, [r.features for r in records[i : i + batch]], dcfg)]
    return corpus_wer([r.targets for r in records], hyps)


class BatchSampler:
    """Seeded epoch-wise shuffling; batches may straddle epoch boundaries."""

    def __init__(self, n: int, batch: int, seed: int):
        self.n, self.batch = n, batch
        self.rng = np.random.default_rng(seed)
        self.queue: list[int] = []

    def next(self) -> list[int]:
        while len(self.queue) < self.batch:
            self.queue += self.rng.permutation(self.n).tolist()
        out, self.queue = self.queue[: self.batch], self.queue[self.batch :]
        return out


@dataclass
class TrainResult:
    model: Transducer
    best: ModelParams
    log: list[tuple[int, float, float, int]] = field(default_factory=list)
    evals: list[tuple[int, float]] = field(default_factory=list)
    steps_run: int = 0
    final_wer: float | None = None

    @property
    def peak_lattice_elems(self) -> int:
        return max((row[3] for row in self.log), default=0)


def train(cfg: RunConfig, records: Sequence[DataRecord], out_dir: str | Path | None = None) -> TrainResult:
    """Run ``cfg.steps`` SGD updates; stop early once training WER hits 0 (if evaluating)."""
    model = build_model(cfg, input_dim_of(cfg, records))
    dcfg = DecodeConfig(cfg.max_symbols_per_step)
    sampler = BatchSampler(len(records), min(cfg.batch, len(records)), cfg.seed)
    result = TrainResult(model, model.params.copy())
    best_key = (float("inf"), float("inf"))
    for step in range(1, cfg.steps + 1):
        idx = sampler.next()
        t0 = time.perf_counter()
        model.params.zero_grad()
        with nx.Graph() as g:
            try:
                loss, elems = model.batch_loss([(records[i].features, records[i].targets) for i in idx])
            except (nx.NonFiniteError, FloatingPointError) as e:
                raise TrainingError(f"step {step}: {e}; utterances {[records[i].utt_id for i in idx]}") from None
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(f"step {step}: loss {value}; utterances {[records[i].utt_id for i in idx]}")
        g.backward(loss)
        sgd_step(model.params, cfg.lr)
        wall = (time.perf_counter() - t0) * 1e3
        result.log.append((step, value, wall, elems))
        result.steps_run = step
        key = (float("inf"), value)
        if cfg.eval_every and step % cfg.eval_every == 0:
            w = training_wer(model, records, dcfg)
            result.evals.append((step, w))
            key = (w, value)
            log.info("step %d loss %.5f train WER %.4f", step, value, w)
        if key < best_key:
            best_key = key
            result.best = model.params.copy()
        if result.evals and result.evals[-1] == (step, 0.0):
            break
    if result.evals:
        result.final_wer = result.evals[-1][1]
    if out_dir is not None:
        write_outputs(result, cfg, out_dir)
    return result


def write_outputs(result: TrainResult, cfg: RunConfig, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.best, out / "best.ckpt")
    save_checkpoint(result.model.params, out / "last.ckpt")
    (out / "config.txt").write_text(cfg.to_text())
    with open(out / "train_log.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TRAIN_LOG_COLUMNS)
        for step, loss, wall, elems in result.log:
            w.writerow([step, repr(loss), f"{wall:.3f}", elems])
    if result.evals:
        with open(out / "eval_log.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("step", "train_wer"))
            w.writerows(result.evals)


# gradient checking -----------------------------------------------------------


@dataclass
class GradcheckReport:
    errors: dict[str, float]
    tolerance: float = 1e-4

    @property
    def failed(self) -> list[str]:
        return [n for n, e in self.errors.items() if not e < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failed

    def lines(self) -> list[str]:
        out = [f"{n:16s} max_rel_err={e:.3e} {'ok' if e < self.tolerance else 'FAIL'}" for n, e in self.errors.items()]
        out.append("PASS" if self.passed else "FAIL: " + ", ".join(self.failed))
        return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest entry-wise discrepancy, relative to the tensor's largest gradient entry."""
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def gradcheck_utterance(cfg: RunConfig, input_dim: int = 4, frames: int = 10, labels: int = 3):
    rng = np.random.default_rng(cfg.seed + 1)
    x = rng.uniform(-2, 2, size=(frames * cfg.stack_factor, input_dim))
    y = rng.integers(cfg.vocab_size, size=labels).tolist()
    return x, y


def gradcheck(cfg: RunConfig, h: float = 1e-5, corrupt: str | None = None, input_dim: int = 4) -> GradcheckReport:
    """Central finite differences of the end-to-end loss against the tape gradients.

    ``corrupt`` names a parameter whose analytic gradient is deliberately
    perturbed before comparison (negative control).
    """
    if max(cfg.d_enc, cfg.d_pred, cfg.d_joint) > 8:
        raise ValueError("gradcheck is meant for small models (d <= 8)")
    model = build_model(cfg, input_dim)
    x, y = gradcheck_utterance(cfg, input_dim)
    model.params.zero_grad()
    with nx.Graph() as g:
        loss = model.loss(x, y)
    g.backward(loss)
    errors = {}
    for name, t in model.params.items():
        analytic = t.grad.copy()
        if name == corrupt:
            analytic.reshape(-1)[0] += 1.0 + abs(analytic.reshape(-1)[0])
        numeric = np.zeros_like(t.data)
        base = t.data
        for i in range(base.size):
            probe = base.copy()
            probe.reshape(-1)[i] += h
            t.data = probe
            up = model.loss(x, y).item()
            probe.reshape(-1)[i] -= 2 * h
            down = model.loss(x, y).item()
            numeric.reshape(-1)[i] = (up - down) / (2 * h)
        t.data = base
        errors[name] = relative_error(analytic, numeric)
    return GradcheckReport(errors)
