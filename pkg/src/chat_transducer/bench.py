"""Chunk-size sweeps: step time, decode time, joiner calls, lattice size, peak memory."""

from __future__ import annotations

import csv
import time
import tracemalloc
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

from . import numerics as nx
from .config import RunConfig
from .data import DataRecord
from .decode import DecodeConfig, count_joiner_calls, greedy_decode
from .model import ModelParams
from .train import BatchSampler, build_model, input_dim_of, sgd_step
from .transducer import Transducer

BENCH_COLUMNS = ("chunk_size", "variant", "train_ms_per_step", "decode_ms", "joiner_calls", "lattice_elems")
MEMORY_COLUMNS = ("step", "variant", "chunk_size", "peak_bytes", "lattice_elems")


@dataclass
class BenchRow:
    chunk_size: int
    variant: str
    train_ms_per_step: float
    decode_ms: float
    joiner_calls: int
    lattice_elems: int

    def as_list(self) -> list:
        return [self.chunk_size, self.variant, f"{self.train_ms_per_step:.3f}", f"{self.decode_ms:.3f}",
                self.joiner_calls, self.lattice_elems]


def lattice_elements(model: Transducer, records: Sequence[DataRecord]) -> int:
    """Closed-form joint-lattice size summed over utterances."""
    V1 = model.join_cfg.vocab_size + 1
    return sum(model.num_steps(r.features.shape[0]) * (len(r.targets) + 1) * V1 for r in records)


def train_step(model: Transducer, batch: Sequence[DataRecord], lr: float) -> tuple[float, int]:
    model.params.zero_grad()
    with nx.Graph() as g:
        loss, elems = model.batch_loss([(r.features, r.targets) for r in batch])
    g.backward(loss)
    sgd_step(model.params, lr)
    return loss.item(), elems


def peak_step_bytes(model: Transducer, batch: Sequence[DataRecord], lr: float) -> tuple[int, int]:
    """Peak traced allocation during one forward/backward/update step."""
    tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        base = tracemalloc.get_traced_memory()[0]
        _, elems = train_step(model, batch, lr)
        peak = tracemalloc.get_traced_memory()[1] - base
    finally:
        tracemalloc.stop()
    return peak, elems


def timed_train(model: Transducer, records: Sequence[DataRecord], cfg: RunConfig, steps: int) -> float:
    sampler = BatchSampler(len(records), min(cfg.batch, len(records)), cfg.seed)
    train_step(model, [records[i] for i in sampler.next()], cfg.lr)  # warm-up, not timed
    total = 0.0
    for _ in range(steps):
        batch = [records[i] for i in sampler.next()]
        t0 = time.perf_counter()
        train_step(model, batch, cfg.lr)
        total += time.perf_counter() - t0
    return total * 1e3 / max(steps, 1)


def timed_decode(model: Transducer, records: Sequence[DataRecord], dcfg: DecodeConfig) -> tuple[float, int]:
    """Batch=1 decode of every record; returns (total ms, total joiner calls)."""
    greedy_decode(model, records[0].features, dcfg)  # warm-up, not timed
    calls = 0
    total = 0.0
    for r in records:
        t0 = time.perf_counter()
        path = greedy_decode(model, r.features, dcfg)
        total += time.perf_counter() - t0
        calls += count_joiner_calls(path)
    return total * 1e3, calls


def bench_models(cfg: RunConfig, records: Sequence[DataRecord], chunk_sizes: Sequence[int],
                 params: dict[str, ModelParams] | None = None):
    """Yield (chunk_size, variant, model) for every sweep point, fresh or from given params."""
    dim = input_dim_of(cfg, records)
    for C in chunk_sizes:
        for variant in ("rnnt", "chat"):
            model = build_model(replace(cfg, chunk_size=C, variant=variant).validate(), dim)
            if params and variant in params:
                model = model.with_params(params[variant].copy())
            yield C, variant, model


def run_bench(
    cfg: RunConfig,
    records: Sequence[DataRecord],
    chunk_sizes: Sequence[int],
    train_steps: int = 3,
    memory_steps: int = 5,
    memory_batch: int = 32,
    params: dict[str, ModelParams] | None = None,
) -> tuple[list[BenchRow], list[tuple]]:
    dcfg = DecodeConfig(cfg.max_symbols_per_step)
    rows, memory = [], []
    for C, variant, model in bench_models(cfg, records, chunk_sizes, params):
        decode_ms, calls = timed_decode(model, records, dcfg)
        elems = lattice_elements(model, records)
        step_ms = timed_train(model, records, cfg, train_steps)
        rows.append(BenchRow(C, variant, step_ms, decode_ms, calls, elems))
        sampler = BatchSampler(len(records), min(memory_batch, len(records)), cfg.seed)
        for step in range(1, memory_steps + 1):
            peak, step_elems = peak_step_bytes(model, [records[i] for i in sampler.next()], cfg.lr)
            memory.append((step, variant, C, peak, step_elems))
    return rows, memory


def write_bench_csv(rows: Sequence[BenchRow], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(BENCH_COLUMNS)
        for r in rows:
            w.writerow(r.as_list())


def write_memory_csv(memory: Sequence[tuple], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MEMORY_COLUMNS)
        w.writerows(memory)


_COLORS = ("#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def memory_svg(memory: Sequence[tuple], width: int = 640, height: int = 360) -> str:
    """Line chart of peak step allocation (MB) against training step, one line per run."""
    series: dict[str, list[tuple[int, float]]] = {}
    for step, variant, C, peak, _ in memory:
        series.setdefault(f"{variant} C={C}", []).append((step, peak / 2**20))
    pad = 50
    max_step = max((s for pts in series.values() for s, _ in pts), default=1)
    max_mb = max((m for pts in series.values() for _, m in pts), default=1.0) or 1.0

    def xy(step, mb):
        x = pad + (step - 1) / max(max_step - 1, 1) * (width - 2 * pad)
        y = height - pad - mb / max_mb * (height - 2 * pad)
        return f"{x:.1f},{y:.1f}"

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2:.0f}" y="{height - 15}" text-anchor="middle">training step</text>',
        f'<text x="12" y="{height / 2:.0f}" transform="rotate(-90 12 {height / 2:.0f})" text-anchor="middle">peak MB</text>',
        f'<text x="{pad - 5}" y="{pad + 4}" text-anchor="end">{max_mb:.2f}</text>',
    ]
    for i, (label, pts) in enumerate(sorted(series.items())):
        color = _COLORS[i % len(_COLORS)]
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{" ".join(xy(s, m) for s, m in pts)}"/>')
        out.append(f'<text x="{pad + 10}" y="{pad + 14 * i}" fill="{color}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_outputs(rows, memory, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_bench_csv(rows, out / "bench.csv")
    write_memory_csv(memory, out / "memory.csv")
    (out / "memory.svg").write_text(memory_svg(memory))
