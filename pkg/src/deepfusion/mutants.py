"""Deliberately broken fused kernels used as negative controls.

``verify`` must fail when either one is active. Select one for a CLI run
with ``DEEPFUSION_MUTANT=<name>``.
"""

from __future__ import annotations

import contextlib
from typing import Iterator

import numpy as np

from . import fused as _fused
from .fused import _blocks
from .tensor import Matrix, gemm_accumulate, silu_inplace
from .variants import A_GATE

ENV_VAR = "DEEPFUSION_MUTANT"


def silu_per_kchunk_tile(x_panel: np.ndarray, wg_panel: np.ndarray, wu_panel: np.ndarray,
                         tile_k: int) -> np.ndarray:
    """Applies SiLU to each partial gate sum instead of the completed one."""
    rows, cols = x_panel.shape[0], wg_panel.shape[1]
    acc_gate = np.zeros((rows, cols))
    acc_up = np.zeros((rows, cols))
    for ks in _blocks(x_panel.shape[1], tile_k):
        part = np.zeros((rows, cols))
        gemm_accumulate(x_panel[:, ks], wg_panel[ks], part)
        acc_gate += silu_inplace(part)
        gemm_accumulate(x_panel[:, ks], wu_panel[ks], acc_up)
    return acc_gate * acc_up


def _spilling_stage1(original):
    def run(x, w_up, w_gate, tile, a2, *, ledger=None, workers=1):
        original(x, w_up, w_gate, tile, a2, ledger=ledger, workers=workers)
        # round-trips the gate pre-activation through a global buffer
        spill = Matrix.zeros(x.rows, w_up.cols, A_GATE, ledger)
        spill.write(slice(None), slice(None), spill.values)
        spill.read()
    return run


MUTANTS = ("silu-per-kchunk", "spill-gate")


@contextlib.contextmanager
def activate(name: str | None) -> Iterator[None]:
    """Swap a mutant into ``deepfusion.fused`` for the duration of the block."""
    if not name:
        yield
        return
    if name == "silu-per-kchunk":
        attr, replacement = "_tile_kernel", silu_per_kchunk_tile
    elif name == "spill-gate":
        attr, replacement = "run_fused_stage1", _spilling_stage1(_fused.run_fused_stage1)
    else:
        raise ValueError(f"unknown mutant {name!r}; expected one of {', '.join(MUTANTS)}")
    saved = getattr(_fused, attr)
    setattr(_fused, attr, replacement)
    try:
        yield
    finally:
        setattr(_fused, attr, saved)
