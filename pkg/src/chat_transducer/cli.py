"""Command-line entry point: gen-data, train, decode, align, bench, gradcheck.

Every subcommand reads an optional ``--config`` file of ``key=value`` lines;
per-key flags such as ``--chunk-size 4`` override the file.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import bench as bench_mod
from .config import ConfigError, RunConfig, load_config
from .data import DataFormatError, gen_synthetic, read_records, write_records
from .decode import DecodeConfig, batched_decode
from .errors import VocabularyError
from .metrics import alignment_record, corpus_wer, emission_timestamps, export_alignment, write_latency_csv
from .model import CheckpointError, load_checkpoint
from .numerics import NonFiniteError
from .train import TrainingError, build_model, gradcheck, input_dim_of, train

EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT, EXIT_NUMERIC, EXIT_CHECK_FAILED = 2, 3, 4, 5, 1

log = logging.getLogger("chat_transducer")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value run configuration file")
    g = p.add_argument_group("config overrides")
    for f in fields(RunConfig):
        g.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, metavar=f.type.upper())


def _config(args) -> RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return load_config(args.config, overrides)


def _records(cfg: RunConfig):
    if not cfg.data:
        raise ConfigError("no data file configured (set data=... or --data)")
    return read_records(cfg.data, cfg.vocab_size, cfg.stack_factor)


def _model(cfg: RunConfig, records, checkpoint: str | None):
    model = build_model(cfg, input_dim_of(cfg, records))
    ckpt = checkpoint or str(Path(cfg.output_dir) / "best.ckpt")
    params = load_checkpoint(ckpt)
    if params.names() != model.params.names() or any(
        params[n].shape != model.params[n].shape for n in params
    ):
        raise CheckpointError(f"{ckpt} does not match the configured {cfg.variant} model")
    return model.with_params(params)


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = args.out or cfg.data
    if not out:
        raise ConfigError("gen-data needs --out or a configured data path")
    recs = gen_synthetic(args.n_utts, cfg.vocab_size, args.repeat, args.noise, cfg.seed, cfg.input_dim or 16,
                         args.min_tokens, args.max_tokens)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    write_records(recs, out)
    print(f"wrote {len(recs)} utterances to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    records = _records(cfg)
    result = train(cfg, records, cfg.output_dir)
    last = result.log[-1] if result.log else None
    print(f"{cfg.variant}: {result.steps_run} steps, final loss {last[1]:.5f}" if last else "0 steps")
    print(f"peak joint-lattice elements per step: {result.peak_lattice_elems}")
    if result.final_wer is not None:
        print(f"training-set WER at last evaluation: {result.final_wer:.4f}")
    print(f"checkpoints and logs in {cfg.output_dir}")
    return 0


def _decode_all(cfg, records, model):
    dcfg = DecodeConfig(cfg.max_symbols_per_step)
    paths = []
    for i in range(0, len(records), 64):
        paths += batched_decode(model, [r.features for r in records[i : i + 64]], dcfg)
    return paths


def cmd_decode(args) -> int:
    cfg = _config(args)
    records = _records(cfg)
    model = _model(cfg, records, args.checkpoint)
    paths = _decode_all(cfg, records, model)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "hyps.txt", "w") as f:
        for r, p in zip(records, paths):
            f.write(f"{r.utt_id}\t{' '.join(map(str, p.tokens))}\n")
    reports = [emission_timestamps(p, model.spec, cfg.stack_factor, r.utt_id) for r, p in zip(records, paths)]
    write_latency_csv(reports, out / "latency.csv")
    print(f"WER {corpus_wer([r.targets for r in records], [p.tokens for p in paths]):.4f} over {len(records)} utterances")
    return 0


def cmd_align(args) -> int:
    cfg = _config(args)
    records = _records(cfg)
    model = _model(cfg, records, args.checkpoint)
    paths = _decode_all(cfg, records, model)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dumps = [alignment_record(p, model.spec, r.utt_id, raw=args.raw_heat) for r, p in zip(records, paths)]
    export_alignment(dumps, out / "alignments.jsonl")
    print(f"wrote {len(dumps)} alignment records to {out / 'alignments.jsonl'}")
    return 0


def cmd_bench(args) -> int:
    cfg = _config(args)
    records = _records(cfg)
    sizes = [int(s) for s in args.chunk_sizes.split(",")]
    rows, memory = bench_mod.run_bench(cfg, records, sizes, args.train_steps, args.memory_steps, args.memory_batch)
    bench_mod.write_outputs(rows, memory, cfg.output_dir)
    for r in rows:
        print(",".join(map(str, r.as_list())))
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    report = gradcheck(cfg, corrupt=args.corrupt)
    print("\n".join(report.lines()))
    return 0 if report.passed else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chat-transducer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic corpus")
    p.add_argument("--out")
    p.add_argument("--n-utts", type=int, default=64)
    p.add_argument("--repeat", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--min-tokens", type=int, default=3)
    p.add_argument("--max-tokens", type=int, default=8)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="SGD training; writes checkpoints and a loss log")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("decode", cmd_decode, "greedy decode, WER and latency CSV"),
                                 ("align", cmd_align, "export chunk/frame alignments")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", help="defaults to <output_dir>/best.ckpt")
        if name == "align":
            p.add_argument("--raw-heat", action="store_true", help="also keep undivided head sums")
        p.set_defaults(func=func)

    p = sub.add_parser("bench", help="chunk-size sweep: timings, joiner calls, lattice size, memory")
    p.add_argument("--chunk-sizes", default="4,12")
    p.add_argument("--train-steps", type=int, default=3)
    p.add_argument("--memory-steps", type=int, default=5)
    p.add_argument("--memory-batch", type=int, default=32)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient")
    p.add_argument("--corrupt", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    for p in sub.choices.values():
        _add_config_flags(p)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, VocabularyError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (TrainingError, NonFiniteError) as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
