"""Analytic global-memory traffic for the three stage-1 layouts.

Counts are logical element transfers at kernel boundaries. A naive GEMM is
charged one read per input element per kernel (perfect reuse inside the
kernel), so layouts differ only through the intermediates they
materialize and, for the fused pass, through the loop-order reuse model
in :func:`deepfusion.fused.predicted_reuse_counts`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import fused as _fused
from .fused import KernelConfig, TileConfig, predicted_reuse_counts
from .tensor import AccessLedger, Matrix, MlpShape
from .variants import (
    A_1,
    A_2,
    A_GATE,
    A_GATE_UP,
    A_SILU,
    W_DOWN,
    W_GATE,
    W_UP,
    X,
    Y,
    MlpWeights,
    VariantTag,
    down_projection,
)

DEFAULT_BYTES_PER_ELEMENT = 2  # FP16-equivalent reporting units
SILU_MUL_FLOPS = 4  # sigmoid ~3 + one multiply per hidden element


@dataclass(frozen=True)
class TrafficReport:
    per_buffer: dict[str, tuple[int, int]]
    bytes_per_element: int = DEFAULT_BYTES_PER_ELEMENT
    label: str = ""

    def __post_init__(self) -> None:
        for name, (r, w) in self.per_buffer.items():
            if r < 0 or w < 0:
                raise ValueError(f"negative count for {name}: {(r, w)}")

    @property
    def total_elements(self) -> int:
        return sum(r + w for r, w in self.per_buffer.values())

    @property
    def total_bytes(self) -> int:
        return self.total_elements * self.bytes_per_element

    def reads(self, name: str) -> int:
        return self.per_buffer.get(name, (0, 0))[0]

    def writes(self, name: str) -> int:
        return self.per_buffer.get(name, (0, 0))[1]

    @classmethod
    def from_ledger(cls, ledger: AccessLedger, bytes_per_element: int = DEFAULT_BYTES_PER_ELEMENT,
                    label: str = "") -> "TrafficReport":
        return cls(ledger.snapshot(), bytes_per_element, label)

    def as_rows(self) -> list[dict]:
        return [
            {"buffer": name, "reads": r, "writes": w, "bytes": (r + w) * self.bytes_per_element}
            for name, (r, w) in sorted(self.per_buffer.items())
        ]


class TrafficMismatch(NamedTuple):
    buffer: str
    predicted: tuple[int, int]
    observed: tuple[int, int]

    def __str__(self) -> str:
        return f"{self.buffer}: predicted (reads, writes) = {self.predicted}, observed {self.observed}"


def _add(table: dict[str, list[int]], name: str, reads: int = 0, writes: int = 0) -> None:
    entry = table.setdefault(name, [0, 0])
    entry[0] += reads
    entry[1] += writes


def predict_traffic(variant: VariantTag | str, shape: MlpShape, tile: TileConfig | None = None, *,
                    include_down: bool = True,
                    bytes_per_element: int = DEFAULT_BYTES_PER_ELEMENT) -> TrafficReport:
    """Per-buffer traffic of one block. ``include_down=False`` gives stage 1 only."""
    variant = VariantTag(variant)
    b, d, f = shape.batch, shape.d_model, shape.d_ff
    bf = b * f
    t: dict[str, list[int]] = {}
    if variant is VariantTag.FUSED:
        if tile is None:
            raise ValueError("predict_traffic needs a TileConfig for the fused variant")
        reuse = predicted_reuse_counts(shape, tile)
        _add(t, X, reads=reuse.x_reads)
        _add(t, W_GATE, reads=reuse.weight_reads // 2)
        _add(t, W_UP, reads=reuse.weight_reads // 2)
        _add(t, A_2, writes=reuse.a2_writes)
    elif variant is VariantTag.TWO_KERNEL:
        _add(t, X, reads=b * d)
        _add(t, W_GATE, reads=d * f)
        _add(t, W_UP, reads=d * f)
        _add(t, A_GATE_UP, reads=2 * bf, writes=2 * bf)
        _add(t, A_2, writes=bf)
    else:
        _add(t, X, reads=2 * b * d)
        _add(t, W_GATE, reads=d * f)
        _add(t, W_UP, reads=d * f)
        _add(t, A_GATE, reads=bf, writes=bf)
        _add(t, A_1, reads=bf, writes=bf)
        _add(t, A_SILU, reads=bf, writes=bf)
        _add(t, A_2, writes=bf)
    if include_down:
        _add(t, A_2, reads=bf)
        _add(t, W_DOWN, reads=f * d)
        _add(t, Y, writes=b * d)
    return TrafficReport({k: (v[0], v[1]) for k, v in t.items()}, bytes_per_element, variant.value)


def stage1_flops(shape: MlpShape) -> int:
    """Two GEMMs plus the gating pointwise work. Independent of the layout."""
    b, d, f = shape.batch, shape.d_model, shape.d_ff
    return 2 * b * d * f * 2 + SILU_MUL_FLOPS * b * f


def stage2_flops(shape: MlpShape) -> int:
    return 2 * shape.batch * shape.d_ff * shape.d_model


def flops(variant: VariantTag | str, shape: MlpShape, *, include_down: bool = False) -> int:
    VariantTag(variant)
    return stage1_flops(shape) + (stage2_flops(shape) if include_down else 0)


def arithmetic_intensity(variant: VariantTag | str, shape: MlpShape, tile: TileConfig | None = None, *,
                         bytes_per_element: int = DEFAULT_BYTES_PER_ELEMENT) -> float:
    """Stage-1 FLOPs per byte of global traffic."""
    report = predict_traffic(variant, shape, tile, include_down=False, bytes_per_element=bytes_per_element)
    return flops(variant, shape) / report.total_bytes


def roofline_point(variant: VariantTag | str, shape: MlpShape, tile: TileConfig | None = None, *,
                   bytes_per_element: int = DEFAULT_BYTES_PER_ELEMENT) -> tuple[float, int]:
    """(arithmetic intensity, FLOPs) for stage 1."""
    return (arithmetic_intensity(variant, shape, tile, bytes_per_element=bytes_per_element),
            flops(variant, shape))


def measure_traffic(variant: VariantTag | str, shape: MlpShape, tile: TileConfig | None = None, *,
                    seed: int = 0, include_down: bool = True,
                    bytes_per_element: int = DEFAULT_BYTES_PER_ELEMENT) -> TrafficReport:
    """Run the executor with instrumentation on seeded random data."""
    variant = VariantTag(variant)
    rng = np.random.default_rng(seed)
    w = MlpWeights.random(shape, rng)
    x = Matrix.random(shape.batch, shape.d_model, rng)
    config = KernelConfig(variant, tile)
    ledger = AccessLedger()
    a2 = _fused.run_stage1(config, x, w.w_up, w.w_gate, ledger=ledger)
    if include_down:
        down_projection(a2, w.w_down, ledger=ledger)
    return TrafficReport.from_ledger(ledger, bytes_per_element, variant.value)


def verify_against_instrumented(variant: VariantTag | str, shape: MlpShape, tile: TileConfig | None = None,
                                seed: int = 0, *, include_down: bool = True) -> list[TrafficMismatch]:
    """Compare instrumented counts with :func:`predict_traffic`; empty list on agreement."""
    predicted = predict_traffic(variant, shape, tile, include_down=include_down)
    observed = measure_traffic(variant, shape, tile, seed=seed, include_down=include_down)
    diff = []
    for name in sorted(set(predicted.per_buffer) | set(observed.per_buffer)):
        p = predicted.per_buffer.get(name, (0, 0))
        o = observed.per_buffer.get(name, (0, 0))
        if p != o or (name in predicted.per_buffer) != (name in observed.per_buffer):
            diff.append(TrafficMismatch(name, p, o))
    return diff
