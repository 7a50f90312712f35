"""Decode-throughput sweeps over MLP-only decoding, with CSV/markdown reports.

A "decode step" pushes a B-row activation (prompt length 1) through
``num_layers`` SwiGLU blocks; the output, RMS-normalized, feeds the next
step. Each (batch, steps, variant) cell is timed ``repetitions`` times and
reported as mean +/- population std of tokens/s.
"""

from __future__ import annotations

import csv
import io
import os
import statistics
import time
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from . import fused as _fused
from .fused import KernelConfig
from .scheduler import Scheduler, fused_candidates
from .tensor import Matrix, MlpShape
from .tp import make_plan, run_tp_mlp
from .traffic import DEFAULT_BYTES_PER_ELEMENT, predict_traffic
from .variants import MlpWeights, VariantTag

BASELINE = VariantTag.FOUR_KERNEL


class MemoryBudgetError(MemoryError):
    def __init__(self, required: int, available: int):
        self.required = required
        self.available = available
        super().__init__(
            f"sweep needs about {required / 2**20:.1f} MiB but only {available / 2**20:.1f} MiB is available"
        )


@dataclass
class BenchConfig:
    d_model: int = 512
    d_ff: int = 2048
    num_layers: int = 4
    batch_sizes: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    decode_steps: list[int] = field(default_factory=lambda: [8])
    repetitions: int = 4
    variants: list[VariantTag] = field(default_factory=lambda: list(VariantTag))
    tp_devices: int = 1
    seed: int = 0
    output_format: str = "markdown"
    bytes_per_element: int = DEFAULT_BYTES_PER_ELEMENT

    def __post_init__(self) -> None:
        self.variants = [VariantTag(v) for v in self.variants]
        if self.repetitions < 2:
            raise ValueError("repetitions must be >= 2 so a standard deviation exists")
        if not self.batch_sizes or not self.decode_steps or not self.variants:
            raise ValueError("batch_sizes, decode_steps and variants must be non-empty")
        if min(self.batch_sizes) < 1 or min(self.decode_steps) < 1:
            raise ValueError("batch sizes and decode steps must be >= 1")
        if self.num_layers < 1 or self.tp_devices < 1:
            raise ValueError("num_layers and tp_devices must be >= 1")
        if self.output_format not in ("csv", "markdown"):
            raise ValueError(f"unknown output format {self.output_format!r}")
        MlpShape(1, self.d_model, self.d_ff)


@dataclass
class ThroughputRow:
    batch: int
    steps: int
    variant: str
    mean_tokens_per_s: float
    std_tokens_per_s: float
    speedup_vs_baseline: float
    traffic_bytes_per_token: float


COLUMNS = [f.name for f in fields(ThroughputRow)]


def required_bytes(cfg: BenchConfig) -> int:
    weights = cfg.num_layers * 3 * cfg.d_model * cfg.d_ff * 8
    b = max(cfg.batch_sizes)
    # X, Y and the largest set of stage-1 intermediates (four-kernel keeps 4, plus temporaries)
    activations = b * (2 * cfg.d_model + 6 * cfg.d_ff) * 8
    return weights + activations


def available_bytes() -> int:
    try:
        return os.sysconf("SC_AVPHYS_PAGES") * os.sysconf("SC_PAGE_SIZE")
    except (ValueError, OSError, AttributeError):
        return 1 << 62


def _rms_normalize(y: np.ndarray) -> np.ndarray:
    rms = np.sqrt(np.mean(y * y, axis=1, keepdims=True))
    return y / np.maximum(rms, 1e-12)


def _make_layers(cfg: BenchConfig) -> list[MlpWeights]:
    rng = np.random.default_rng(cfg.seed)
    shape = MlpShape(1, cfg.d_model, cfg.d_ff)
    return [MlpWeights.random(shape, rng, scale=cfg.d_model ** -0.5) for _ in range(cfg.num_layers)]


def run_sweep(cfg: BenchConfig, scheduler: Scheduler | None = None) -> list[ThroughputRow]:
    need, have = required_bytes(cfg), available_bytes()
    if need > have:
        raise MemoryBudgetError(need, have)
    scheduler = scheduler or Scheduler(runs=3)
    layers = _make_layers(cfg)
    measured = list(dict.fromkeys([BASELINE, *cfg.variants]))
    rows: list[ThroughputRow] = []

    for batch in cfg.batch_sizes:
        shape = MlpShape(batch, cfg.d_model, cfg.d_ff)
        configs: dict[VariantTag, KernelConfig] = {}
        for v in measured:
            if v is VariantTag.FUSED:
                cands = fused_candidates(shape)
                entry = scheduler.tune(shape, cands, fingerprint=f"{scheduler.fingerprint}|fused")
                configs[v] = Scheduler.resolve(entry, cands)
            else:
                configs[v] = KernelConfig(v)
        plan = make_plan(cfg.d_ff, cfg.tp_devices) if cfg.tp_devices > 1 else None
        x0 = np.random.default_rng(cfg.seed + batch).standard_normal((batch, cfg.d_model))

        def forward(config: KernelConfig, x: Matrix, w: MlpWeights) -> Matrix:
            if plan is None:
                return _fused.run_mlp(config, x, w)
            return run_tp_mlp(x, w, plan, config).output

        for steps in cfg.decode_steps:
            rates: dict[VariantTag, list[float]] = {v: [] for v in measured}
            for _ in range(cfg.repetitions):
                # interleaved so slow drift in machine state hits every variant alike
                for v in measured:
                    config = configs[v]
                    x = x0
                    t0 = time.perf_counter()
                    for _ in range(steps):
                        h = Matrix(x)
                        for w in layers:
                            h = forward(config, h, w)
                        x = _rms_normalize(h.values)
                    elapsed = time.perf_counter() - t0
                    rates[v].append(batch * steps / elapsed)
            base_mean = statistics.fmean(rates[BASELINE])
            for v in cfg.variants:
                mean = statistics.fmean(rates[v])
                traffic = predict_traffic(v, shape, configs[v].tile, bytes_per_element=cfg.bytes_per_element)
                rows.append(ThroughputRow(
                    batch=batch,
                    steps=steps,
                    variant=v.value,
                    mean_tokens_per_s=mean,
                    std_tokens_per_s=statistics.pstdev(rates[v]),
                    speedup_vs_baseline=mean / base_mean,
                    traffic_bytes_per_token=traffic.total_bytes * cfg.num_layers / batch,
                ))
    return rows


# -- reports ------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def to_csv(rows: Sequence[ThroughputRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for r in rows:
        writer.writerow([_fmt(getattr(r, c)) for c in COLUMNS])
    return buf.getvalue()


def parse_csv(text: str) -> list[ThroughputRow]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != COLUMNS:
        raise ValueError(f"unexpected CSV header {reader.fieldnames}")
    out = []
    for rec in reader:
        out.append(ThroughputRow(
            batch=int(rec["batch"]),
            steps=int(rec["steps"]),
            variant=rec["variant"],
            mean_tokens_per_s=float(rec["mean_tokens_per_s"]),
            std_tokens_per_s=float(rec["std_tokens_per_s"]),
            speedup_vs_baseline=float(rec["speedup_vs_baseline"]),
            traffic_bytes_per_token=float(rec["traffic_bytes_per_token"]),
        ))
    return out


def to_markdown(rows: Sequence[ThroughputRow]) -> str:
    variants = list(dict.fromkeys(r.variant for r in rows))
    lines = []
    for steps in dict.fromkeys(r.steps for r in rows):
        subset = [r for r in rows if r.steps == steps]
        lines.append(f"### Decode steps = {steps}")
        lines.append("")
        header = ["Batch"] + [f"{v} tok/s" for v in variants] + [f"{v} speedup" for v in variants if v != BASELINE.value]
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "|".join("---:" for _ in header) + "|")
        for batch in dict.fromkeys(r.batch for r in subset):
            cells = {r.variant: r for r in subset if r.batch == batch}
            best = max(cells.values(), key=lambda r: r.mean_tokens_per_s).variant
            row = [str(batch)]
            for v in variants:
                r = cells.get(v)
                if r is None:
                    row.append("")
                    continue
                text = f"{r.mean_tokens_per_s:.2f} ± {r.std_tokens_per_s:.2f}"
                row.append(f"**{text}**" if v == best else text)
            for v in variants:
                if v == BASELINE.value:
                    continue
                r = cells.get(v)
                row.append("" if r is None else f"{(r.speedup_vs_baseline - 1) * 100:+.1f}%")
            lines.append("| " + " | ".join(row) + " |")
        lines.append("")
    return "\n".join(lines)


def emit_report(rows: Sequence[ThroughputRow], fmt: str = "markdown") -> str:
    if not rows:
        raise ValueError("no rows to report")
    if fmt == "csv":
        return to_csv(rows)
    if fmt == "markdown":
        return to_markdown(rows)
    raise ValueError(f"unknown report format {fmt!r}")
