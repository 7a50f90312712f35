"""``deepfusion`` command line.

Exit codes: 0 success, 1 invariant failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import mutants
from .bench import BenchConfig, MemoryBudgetError, emit_report, run_sweep
from .fused import KernelConfig, TileConfig
from .scheduler import CacheFormatError, CacheVersionError, Scheduler, default_candidates
from .tensor import Matrix, MlpShape
from .tp import comm_volume, make_plan, run_tp_mlp
from .traffic import arithmetic_intensity, predict_traffic
from .variants import MlpWeights, VariantTag, run_four_kernel
from .verify import run_verify

CACHE_ENV = "DEEPFUSION_CACHE"
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def default_cache_path() -> Path:
    env = os.environ.get(CACHE_ENV)
    if env:
        return Path(env)
    base = os.environ.get("XDG_CACHE_HOME") or Path.home() / ".cache"
    return Path(base) / "deepfusion" / "tuning.json"


def _int_list(text: str) -> list[int]:
    try:
        values = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return values


def _variant_list(text: str) -> list[VariantTag]:
    try:
        return [VariantTag.parse(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _positive(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--d-model", type=_positive, default=512)
    common.add_argument("--d-ff", type=_positive, default=2048)
    common.add_argument("--layers", type=_positive, default=4)
    common.add_argument("--batch", type=_int_list, default=[1, 2, 4, 8], help="comma-separated batch sizes")
    common.add_argument("--steps", type=_int_list, default=[8], help="comma-separated decode step counts")
    common.add_argument("--reps", type=_positive, default=4)
    common.add_argument("--variants", type=_variant_list, default=list(VariantTag),
                        help="comma-separated subset of four_kernel,two_kernel,fused")
    common.add_argument("--tp", type=_positive, default=1, help="simulated tensor-parallel devices")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--format", choices=["csv", "markdown"], default="markdown")
    common.add_argument("--cache-path", type=Path, default=None,
                        help=f"tuning cache file (default: ${CACHE_ENV} or ~/.cache/deepfusion/tuning.json)")
    common.add_argument("--out", type=Path, default=None, help="write the report here instead of stdout")

    parser = argparse.ArgumentParser(prog="deepfusion", description="Fused SwiGLU MLP desk-scale toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("bench", parents=[common], help="throughput sweep and report")
    sub.add_parser("traffic", parents=[common], help="predicted global traffic per variant")
    sub.add_parser("tune", parents=[common], help="profile candidate kernels and cache the choice")
    sub.add_parser("tp-check", parents=[common], help="tensor-parallel equivalence report")
    p_verify = sub.add_parser("verify", parents=[common], help="run the full invariant suite")
    p_verify.add_argument("--no-timing", action="store_true", help="skip the soft timing check")
    return parser


def _emit(text: str, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    else:
        out.write_text(text, encoding="utf-8")


def cmd_bench(args) -> int:
    cfg = BenchConfig(d_model=args.d_model, d_ff=args.d_ff, num_layers=args.layers, batch_sizes=args.batch,
                      decode_steps=args.steps, repetitions=args.reps, variants=args.variants,
                      tp_devices=args.tp, seed=args.seed, output_format=args.format)
    scheduler = Scheduler(args.cache_path or default_cache_path(), runs=3, seed=args.seed)
    rows = run_sweep(cfg, scheduler)
    _emit(emit_report(rows, cfg.output_format), args.out)
    return EXIT_OK


def cmd_traffic(args) -> int:
    lines = []
    if args.format == "csv":
        lines.append("batch,d_model,d_ff,variant,stage1_elements,total_elements,total_bytes,intensity_flops_per_byte")
    else:
        lines += ["| Batch | Variant | Stage-1 elements | Total elements | Total bytes | FLOPs/byte |",
                  "|---:|---|---:|---:|---:|---:|"]
    for b in args.batch:
        shape = MlpShape(b, args.d_model, args.d_ff)
        for v in args.variants:
            tile = TileConfig.single(shape) if v is VariantTag.FUSED else None
            s1 = predict_traffic(v, shape, tile, include_down=False).total_elements
            full = predict_traffic(v, shape, tile)
            ai = arithmetic_intensity(v, shape, tile)
            if args.format == "csv":
                lines.append(f"{b},{shape.d_model},{shape.d_ff},{v.value},{s1},{full.total_elements},"
                             f"{full.total_bytes},{ai!r}")
            else:
                lines.append(f"| {b} | {v.value} | {s1} | {full.total_elements} | {full.total_bytes} | {ai:.3f} |")
    _emit("\n".join(lines), args.out)
    return EXIT_OK


def cmd_tune(args) -> int:
    path = args.cache_path or default_cache_path()
    scheduler = Scheduler(path, runs=max(3, args.reps), seed=args.seed)
    lines = []
    for b in args.batch:
        shape = MlpShape(b, args.d_model, args.d_ff)
        cands = [c for c in default_candidates(shape) if c.variant in args.variants]
        entry = scheduler.tune(shape, cands)
        source = "cache hit, profiling skipped" if scheduler.last_was_cache_hit else f"profiled {len(cands)} candidates"
        lines.append(f"{shape.key()}: chose {entry.chosen} ({source})")
        for r in entry.all_results:
            status = f"median {r.median_ns / 1e3:.1f} us" if r.qualified else f"disqualified: {r.error}"
            lines.append(f"  {r.config_label}: {status}")
    lines.append(f"cache: {path}")
    _emit("\n".join(lines), args.out)
    return EXIT_OK


def cmd_tp_check(args) -> int:
    devices = sorted({1, args.tp} | ({2, 4} if args.tp == 1 else set()))
    rng = np.random.default_rng(args.seed)
    ok = True
    lines = []
    for b in args.batch:
        shape = MlpShape(b, args.d_model, args.d_ff)
        w = MlpWeights.random(shape, rng, scale=shape.d_model ** -0.5)
        x = Matrix.random(b, shape.d_model, rng)
        single = run_four_kernel(x, w).values
        for p in devices:
            for v in args.variants:
                cfg = KernelConfig(v, TileConfig(min(b, 4), 128, 128) if v is VariantTag.FUSED else None)
                y, log = run_tp_mlp(x, w, make_plan(shape.d_ff, p), cfg)
                dev = float(np.max(np.abs(y.values - single)))
                good = dev <= 1e-10 and len(log) == 1
                ok &= good
                lines.append(f"{'ok  ' if good else 'FAIL'} B={b} P={p} {v.value}: max|dev|={dev:.2e} "
                             f"collectives={len(log)} ring_bytes={comm_volume(log, p, 'ring'):.0f}")
    _emit("\n".join(lines), args.out)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_verify(args) -> int:
    lines: list[str] = []
    echo = (lambda s: print(s, flush=True)) if args.out is None else lines.append
    report = run_verify(timing=not args.no_timing, echo=echo)
    for w in report.warnings:
        echo(f"warning: {w.name} outside its target on this host; not counted as a failure")
    echo("verify: " + ("OK" if report.ok else "FAILED"))
    if args.out is not None:
        _emit("\n".join(lines), args.out)
    return EXIT_OK if report.ok else EXIT_FAIL


COMMANDS = {"bench": cmd_bench, "traffic": cmd_traffic, "tune": cmd_tune, "tp-check": cmd_tp_check,
            "verify": cmd_verify}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        with mutants.activate(os.environ.get(mutants.ENV_VAR)):
            return COMMANDS[args.command](args)
    except (ValueError, MemoryBudgetError, CacheFormatError, CacheVersionError) as exc:
        print(f"deepfusion: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
