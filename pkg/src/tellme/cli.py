"""Command line entry points: ``tellme {run,make-toy,sched,pack,bench}`` and ``tlmm-bench``."""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, ModelConfig
from .container import WeightFileError, WeightRecord, write_weights
from .decode import ContextOverflowError
from .packing import pack_matrix, ternarize
from .runtime import GenerationRequest, Runtime, load_model, make_toy, save_model
from .sched import emit_csv, sweep
from .tlmm import QuantTensor, naive_ternary_matmul, partial_table_matmul, tl_matmul

EXIT_OK, EXIT_CONFIG, EXIT_OVERFLOW = 0, 2, 3


def _int_list(text: str) -> list[int]:
    if text.startswith("@"):
        text = Path(text[1:]).read_text()
    return [int(tok) for tok in text.replace("\n", ",").replace(" ", ",").split(",") if tok.strip()]


def cmd_run(args) -> int:
    model = load_model(args.weights)
    runtime = Runtime(model, p=args.p, kv_scale_mode=args.kv_scale)
    result = runtime.generate(GenerationRequest(_int_list(args.prompt_ids), args.max_new))
    report = result.report()
    if args.report == "json":
        print(json.dumps(report, indent=2))
    else:
        print("generated:", " ".join(map(str, result.generated)))
        print(f"prefill: {result.prefill_seconds:.4f} s")
        print(f"decode: {result.decode_tokens_per_second:.2f} tokens/s")
        print("prefill kv loads per layer:", report["kv_loads"])
        print("quant saturations:", result.quant_saturations)
    return EXIT_OK


def cmd_make_toy(args) -> int:
    cfg = ModelConfig(hidden=args.hidden, layers=args.layers, heads=args.heads, head_dim=args.hidden // args.heads,
                      ffn=args.ffn, vocab=args.vocab, capacity=args.capacity, parallelism=args.p)
    save_model(args.out, make_toy(args.seed, cfg))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_sched(args) -> int:
    costs = sweep(_int_list(args.N), args.p)
    emit_csv(costs, args.out)
    print(f"wrote {len(costs)} rows to {args.out}")
    return EXIT_OK


def cmd_pack(args) -> int:
    w = np.load(args.inp)
    if w.ndim != 2:
        raise ConfigError(f"expected a 2-d matrix, got shape {w.shape}")
    if np.issubdtype(w.dtype, np.integer):
        trits, scale = w, args.scale
    else:
        trits, scale = ternarize(w)
    packed = pack_matrix(trits, args.group, args.tables, scale)
    write_weights(args.out, WeightRecord(None, {args.name: packed}))
    print(f"packed {w.shape} -> {packed.indices.shape} indices, scale {scale:.6g}")
    return EXIT_OK


VARIANTS = ("naive", "partial", "tl")


def cmd_bench(args) -> int:
    rng = np.random.default_rng(args.seed)
    a = QuantTensor(rng.integers(-127, 128, size=(args.m, args.n)), 1.0)
    w = rng.integers(-1, 2, size=(args.n, args.k))
    packed = pack_matrix(w, args.group, args.tables)
    t0 = time.perf_counter()
    if args.variant == "tl":
        out = tl_matmul(a, packed, args.q)
    elif args.variant == "partial":
        out = partial_table_matmul(a, packed, args.q)
    else:
        out = naive_ternary_matmul(a, w)
    elapsed = time.perf_counter() - t0
    checksum = int(np.asarray(out, dtype=np.int64).sum())
    print(f"variant={args.variant} m={args.m} n={args.n} k={args.k} seconds={elapsed:.6f} checksum={checksum}")
    return EXIT_OK


def _bench_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--m", type=int, default=16)
    p.add_argument("--n", type=int, default=1536)
    p.add_argument("--k", type=int, default=1536)
    p.add_argument("--variant", choices=VARIANTS, default="tl")
    p.add_argument("--group", type=int, default=3)
    p.add_argument("--tables", type=int, default=32)
    p.add_argument("--q", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tellme", description="Ternary LLM inference toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="prefill + greedy decode from a weight file")
    run.add_argument("--weights", required=True)
    run.add_argument("--prompt-ids", required=True, help="comma list of token ids or @file")
    run.add_argument("--max-new", type=int, default=16)
    run.add_argument("--p", type=int, default=None)
    run.add_argument("--report", choices=("json", "text"), default="text")
    run.add_argument("--kv-scale", choices=("token", "frozen"), default="token")
    run.set_defaults(func=cmd_run)

    toy = sub.add_parser("make-toy", help="write a deterministic random ternary checkpoint")
    toy.add_argument("--seed", type=int, default=0)
    toy.add_argument("--out", required=True)
    toy.add_argument("--hidden", type=int, default=64)
    toy.add_argument("--layers", type=int, default=2)
    toy.add_argument("--heads", type=int, default=4)
    toy.add_argument("--ffn", type=int, default=128)
    toy.add_argument("--vocab", type=int, default=256)
    toy.add_argument("--capacity", type=int, default=1024)
    toy.add_argument("--p", type=int, default=4)
    toy.set_defaults(func=cmd_make_toy)

    sched = sub.add_parser("sched", help="attention schedule costs as CSV")
    sched.add_argument("--N", default="64,128,256,512,1024")
    sched.add_argument("--p", type=int, default=4)
    sched.add_argument("--out", required=True)
    sched.set_defaults(func=cmd_sched)

    pack = sub.add_parser("pack", help="pack a .npy weight matrix into a weight file")
    pack.add_argument("--in", dest="inp", required=True, help=".npy of trits (int) or fp32 weights")
    pack.add_argument("--out", required=True)
    pack.add_argument("--group", type=int, default=3)
    pack.add_argument("--tables", type=int, default=32)
    pack.add_argument("--scale", type=float, default=1.0, help="weight scale for trit input")
    pack.add_argument("--name", default="weight")
    pack.set_defaults(func=cmd_pack)

    _bench_args(sub.add_parser("bench", help="ternary matmul microbenchmark"))
    return parser


def _dispatch(args) -> int:
    try:
        return args.func(args)
    except ContextOverflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OVERFLOW
    except (ConfigError, WeightFileError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main(argv=None) -> int:
    return _dispatch(build_parser().parse_args(argv))


def bench_main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="tlmm-bench", description="ternary matmul microbenchmark")
    _bench_args(parser)
    return _dispatch(parser.parse_args(argv))


if __name__ == "__main__":
    sys.exit(main())
