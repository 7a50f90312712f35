"""Single-pass tiled stage 1: ``A_2 = (X @ W_up) * silu(X @ W_gate)``.

For every output tile the gate and up partial sums are accumulated side by
side in tile-local scratch over the whole d_model reduction. Only once the
reduction is complete is SiLU applied and the product stored, so A_gate,
A_1 and A_silu never exist as global buffers.

The loop order decides which operand stays resident across output tiles:

* ``ROW_MAJOR`` walks row blocks outermost and keeps the X row panel
  on chip while sweeping column tiles; weights are re-fetched per row block.
* ``COLUMN_MAJOR`` walks column blocks outermost and keeps the gate/up
  weight panels on chip while sweeping row tiles; X is re-fetched per
  column block.
"""

from __future__ import annotations

import contextvars
import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import AccessLedger, Matrix, MlpShape, ShapeError, gemm_accumulate, silu_inplace
from .variants import (
    A_2,
    W_GATE,
    W_UP,
    X,
    MlpWeights,
    VariantTag,
    down_projection,
    four_kernel_stage1,
    two_kernel_stage1,
)


class LoopOrder(str, enum.Enum):
    ROW_MAJOR = "row"
    COLUMN_MAJOR = "col"


@dataclass(frozen=True)
class TileConfig:
    tile_m: int
    tile_n: int
    tile_k: int
    loop_order: LoopOrder = LoopOrder.ROW_MAJOR

    def __post_init__(self) -> None:
        for name in ("tile_m", "tile_n", "tile_k"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        object.__setattr__(self, "loop_order", LoopOrder(self.loop_order))

    @classmethod
    def single(cls, shape: MlpShape, loop_order: LoopOrder = LoopOrder.ROW_MAJOR) -> "TileConfig":
        """One tile covering the whole problem."""
        return cls(shape.batch, shape.d_ff, shape.d_model, loop_order)

    def clamp(self, shape: MlpShape) -> "TileConfig":
        return TileConfig(
            min(self.tile_m, shape.batch),
            min(self.tile_n, shape.d_ff),
            min(self.tile_k, shape.d_model),
            self.loop_order,
        )

    @property
    def label(self) -> str:
        return f"m{self.tile_m}_n{self.tile_n}_k{self.tile_k}_{self.loop_order.value}"


@dataclass(frozen=True)
class KernelConfig:
    variant: VariantTag
    tile: TileConfig | None = None
    label: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "variant", VariantTag(self.variant))
        if self.variant is VariantTag.FUSED and self.tile is None:
            raise ValueError("a fused KernelConfig needs a TileConfig")
        if not self.label:
            label = self.variant.value
            if self.variant is VariantTag.FUSED:
                label = f"fused_{self.tile.label}"
            object.__setattr__(self, "label", label)


def _blocks(extent: int, size: int) -> list[slice]:
    return [slice(s, min(s + size, extent)) for s in range(0, extent, size)]


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def fused_tile(x_panel: np.ndarray, wg_panel: np.ndarray, wu_panel: np.ndarray, tile_k: int) -> np.ndarray:
    """Compute one A_2 tile from on-chip panels. Both accumulators share the k loop."""
    rows, cols = x_panel.shape[0], wg_panel.shape[1]
    acc_gate = np.zeros((rows, cols))
    acc_up = np.zeros((rows, cols))
    for ks in _blocks(x_panel.shape[1], tile_k):
        xk = x_panel[:, ks]
        gemm_accumulate(xk, wg_panel[ks], acc_gate)
        gemm_accumulate(xk, wu_panel[ks], acc_up)
    # SiLU is only legal once the reduction over d_model is complete
    silu_inplace(acc_gate)
    acc_gate *= acc_up
    return acc_gate


# Indirection point for the negative-control mutants in ``deepfusion.mutants``.
TileKernel = Callable[[np.ndarray, np.ndarray, np.ndarray, int], np.ndarray]
_tile_kernel: TileKernel = fused_tile


def run_fused_stage1(x: Matrix, w_up: Matrix, w_gate: Matrix, tile: TileConfig, a2: Matrix, *,
                     ledger: AccessLedger | None = None, workers: int = 1) -> None:
    """Write A_2 into ``a2`` in one tiled pass.

    ``workers > 1`` distributes the outer loop blocks over threads; every
    A_2 tile is still written by exactly one worker.
    """
    b, d = x.shape
    if w_up.rows != d or w_gate.shape != w_up.shape:
        raise ShapeError(
            f"X is {b}x{d}, W_up is {w_up.rows}x{w_up.cols}, W_gate is {w_gate.rows}x{w_gate.cols}"
        )
    f = w_up.cols
    if a2.shape != (b, f):
        raise ShapeError(f"A_2 is {a2.rows}x{a2.cols}, expected {b}x{f}")
    if not isinstance(tile, TileConfig):
        raise TypeError(f"expected TileConfig, got {type(tile).__name__}")
    if workers < 1:
        raise ValueError("workers must be >= 1")

    if ledger is not None:
        x, w_up, w_gate, a2 = x.bind(ledger, X), w_up.bind(ledger, W_UP), w_gate.bind(ledger, W_GATE), a2.bind(ledger, A_2)

    kernel = _tile_kernel
    row_blocks = _blocks(b, tile.tile_m)
    col_blocks = _blocks(f, tile.tile_n)

    if tile.loop_order is LoopOrder.ROW_MAJOR:
        def outer(rs: slice) -> None:
            x_panel = x.read(rs, slice(None))
            for cs in col_blocks:
                wg = w_gate.read(slice(None), cs)
                wu = w_up.read(slice(None), cs)
                a2.write(rs, cs, kernel(x_panel, wg, wu, tile.tile_k))
        outer_blocks = row_blocks
    else:
        def outer(cs: slice) -> None:
            wg = w_gate.read(slice(None), cs)
            wu = w_up.read(slice(None), cs)
            for rs in row_blocks:
                x_panel = x.read(rs, slice(None))
                a2.write(rs, cs, kernel(x_panel, wg, wu, tile.tile_k))
        outer_blocks = col_blocks

    if workers == 1 or len(outer_blocks) == 1:
        for blk in outer_blocks:
            outer(blk)
        return
    ctx = contextvars.copy_context()
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(ctx.copy().run, outer, blk) for blk in outer_blocks]
        for fut in futures:
            fut.result()


def run_fused(x: Matrix, w: MlpWeights, tile: TileConfig, *, ledger: AccessLedger | None = None,
              workers: int = 1) -> Matrix:
    if x.cols != w.shape.d_model:
        raise ShapeError(f"X has {x.cols} columns but the weights expect d_model={w.shape.d_model}")
    a2 = Matrix.zeros(x.rows, w.shape.d_ff, A_2, ledger)
    run_fused_stage1(x, w.w_up, w.w_gate, tile, a2, ledger=ledger, workers=workers)
    return down_projection(a2, w.w_down, ledger=ledger)


@dataclass(frozen=True)
class ReuseCounts:
    x_reads: int
    weight_reads: int
    a2_writes: int


def predicted_reuse_counts(shape: MlpShape, tile: TileConfig) -> ReuseCounts:
    """Global transfers of the fused pass, assuming the non-resident operand
    is never cached across tiles. ``weight_reads`` covers W_up and W_gate
    together (half each)."""
    b, d, f = shape.batch, shape.d_model, shape.d_ff
    if tile.loop_order is LoopOrder.COLUMN_MAJOR:
        x_reads = b * d * _ceil_div(f, tile.tile_n)
        weight_reads = 2 * d * f
    else:
        x_reads = b * d
        weight_reads = 2 * d * f * _ceil_div(b, tile.tile_m)
    return ReuseCounts(x_reads, weight_reads, b * f)


# -- dispatch by KernelConfig -------------------------------------------------

def run_stage1(config: KernelConfig, x: Matrix, w_up: Matrix, w_gate: Matrix, *,
               ledger: AccessLedger | None = None) -> Matrix:
    if config.variant is VariantTag.FOUR_KERNEL:
        return four_kernel_stage1(x, w_up, w_gate, ledger=ledger)
    if config.variant is VariantTag.TWO_KERNEL:
        return two_kernel_stage1(x, w_up, w_gate, ledger=ledger)
    a2 = Matrix.zeros(x.rows, w_up.cols, A_2, ledger)
    run_fused_stage1(x, w_up, w_gate, config.tile, a2, ledger=ledger)
    return a2


def run_mlp(config: KernelConfig, x: Matrix, w: MlpWeights, *, ledger: AccessLedger | None = None) -> Matrix:
    if x.cols != w.shape.d_model:
        raise ShapeError(f"X has {x.cols} columns but the weights expect d_model={w.shape.d_model}")
    a2 = run_stage1(config, x, w.w_up, w.w_gate, ledger=ledger)
    return down_projection(a2, w.w_down, ledger=ledger)
