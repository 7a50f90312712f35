"""Tensor-parallel SwiGLU simulation.

The compound scheme shards W_up and W_gate by columns and W_down by rows
over the same d_ff ranges. Every device then runs stage 1 and its slice of
the down projection without talking to anyone, and one all-reduce of the
B x d_model partial outputs finishes the block. The naive alternative
column-splits each GEMM separately and all-gathers after each one.

Devices are simulated in-process; collectives are recorded, not sent.
"""

from __future__ import annotations

import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import fused as _fused
from .fused import KernelConfig
from .tensor import Matrix, ShapeError, gemm_into, silu_inplace
from .traffic import DEFAULT_BYTES_PER_ELEMENT
from .variants import A_2, W_DOWN, W_GATE, W_UP, Y, MlpWeights, down_projection


class ShardScheme(str, enum.Enum):
    COMPOUND_SINGLE_ALL_REDUCE = "compound"
    NAIVE_PER_GEMM_ALL_GATHER = "naive"


class CollectiveKind(str, enum.Enum):
    ALL_REDUCE = "all_reduce"
    ALL_GATHER = "all_gather"


@dataclass(frozen=True)
class ShardPlan:
    num_devices: int
    ff_ranges: tuple[tuple[int, int], ...]
    scheme: ShardScheme = ShardScheme.COMPOUND_SINGLE_ALL_REDUCE

    def __post_init__(self) -> None:
        if self.num_devices < 1 or len(self.ff_ranges) != self.num_devices:
            raise ValueError(f"plan has {len(self.ff_ranges)} ranges for {self.num_devices} devices")
        pos = 0
        for start, stop in self.ff_ranges:
            if start != pos or stop <= start:
                raise ValueError(f"ranges must be contiguous and non-empty: {self.ff_ranges}")
            pos = stop

    @property
    def extent(self) -> int:
        return self.ff_ranges[-1][1]

    def slices(self) -> list[slice]:
        return [slice(a, b) for a, b in self.ff_ranges]


@dataclass(frozen=True)
class CollectiveEvent:
    kind: CollectiveKind
    payload_elements_per_device: int


@dataclass
class CollectiveLog:
    events: list[CollectiveEvent] = field(default_factory=list)

    def append(self, kind: CollectiveKind, payload: int) -> None:
        self.events.append(CollectiveEvent(CollectiveKind(kind), payload))

    def count(self, kind: CollectiveKind | None = None) -> int:
        return sum(1 for e in self.events if kind is None or e.kind is kind)

    def __len__(self) -> int:
        return len(self.events)

    def to_records(self) -> list[dict]:
        return [{"kind": e.kind.value, "payload_elements_per_device": e.payload_elements_per_device}
                for e in self.events]


def make_plan(extent: int, num_devices: int,
              scheme: ShardScheme = ShardScheme.COMPOUND_SINGLE_ALL_REDUCE) -> ShardPlan:
    """Balanced contiguous split of ``[0, extent)``; the first ``extent % P``
    devices get one extra column."""
    if num_devices < 1:
        raise ValueError("need at least one device")
    if num_devices > extent:
        raise ValueError(f"cannot split {extent} columns over {num_devices} devices without empty shards")
    base, extra = divmod(extent, num_devices)
    ranges, start = [], 0
    for p in range(num_devices):
        stop = start + base + (1 if p < extra else 0)
        ranges.append((start, stop))
        start = stop
    return ShardPlan(num_devices, tuple(ranges), ShardScheme(scheme))


def _all_reduce(partials: Sequence[np.ndarray], log: CollectiveLog) -> np.ndarray:
    log.append(CollectiveKind.ALL_REDUCE, partials[0].size)
    total = partials[0].copy()
    for part in partials[1:]:  # device-index order, deterministic
        total += part
    return total


def _all_gather(slices: Sequence[np.ndarray], log: CollectiveLog) -> np.ndarray:
    # ring-style gather: payload is this device's contribution
    log.append(CollectiveKind.ALL_GATHER, max(s.size for s in slices))
    return np.concatenate(slices, axis=1)


@dataclass
class TpResult:
    output: Matrix
    log: CollectiveLog
    a2_shards: list[Matrix]
    partials: list[Matrix]

    def __iter__(self):
        # unpacks as (output, log)
        return iter((self.output, self.log))


def run_tp_mlp(x: Matrix, w: MlpWeights, plan: ShardPlan, executor: KernelConfig | str,
               candidates: Sequence[KernelConfig] = (), *, parallel: bool = False) -> TpResult:
    """Compound-sharded block. Unpacks as ``(Y, log)``; per-device A_2 shards
    and partial outputs are kept on the result for inspection."""
    if plan.scheme is not ShardScheme.COMPOUND_SINGLE_ALL_REDUCE:
        raise ValueError("run_tp_mlp implements the compound scheme; use run_naive_tp_mlp for the baseline")
    if plan.extent != w.shape.d_ff:
        raise ShapeError(f"plan covers {plan.extent} hidden columns but d_ff={w.shape.d_ff}")
    if x.cols != w.shape.d_model:
        raise ShapeError(f"X has {x.cols} columns but d_model={w.shape.d_model}")
    if isinstance(executor, str):
        by_label = {c.label: c for c in candidates}
        if executor not in by_label:
            raise KeyError(f"unknown executor label {executor!r}")
        executor = by_label[executor]

    up, gate, down = w.w_up.values, w.w_gate.values, w.w_down.values

    def device(cs: slice) -> tuple[Matrix, Matrix]:
        w_up_p = Matrix(np.ascontiguousarray(up[:, cs]), W_UP)
        w_gate_p = Matrix(np.ascontiguousarray(gate[:, cs]), W_GATE)
        w_down_p = Matrix(np.ascontiguousarray(down[cs, :]), W_DOWN)
        a2 = _fused.run_stage1(executor, x, w_up_p, w_gate_p)
        return a2, down_projection(a2, w_down_p)

    if parallel and plan.num_devices > 1:
        with ThreadPoolExecutor(max_workers=plan.num_devices) as pool:
            outs = list(pool.map(device, plan.slices()))
    else:
        outs = [device(cs) for cs in plan.slices()]

    log = CollectiveLog()
    y = _all_reduce([p.values for _, p in outs], log)
    return TpResult(Matrix(y, Y), log, [a for a, _ in outs], [p for _, p in outs])


def run_naive_tp_gemm(x: Matrix, w: Matrix, plan: ShardPlan,
                      log: CollectiveLog | None = None) -> tuple[Matrix, CollectiveLog]:
    """Column-parallel single GEMM followed by an all-gather of the slices."""
    if plan.extent != w.cols:
        raise ShapeError(f"plan covers {plan.extent} columns but W has {w.cols}")
    if x.cols != w.rows:
        raise ShapeError(f"X is {x.rows}x{x.cols}, W is {w.rows}x{w.cols}")
    log = CollectiveLog() if log is None else log
    xv, wv = x.values, w.values
    slices = []
    for cs in plan.slices():
        part = np.empty((x.rows, cs.stop - cs.start))
        gemm_into(xv, np.ascontiguousarray(wv[:, cs]), part)
        slices.append(part)
    return Matrix(_all_gather(slices, log)), log


def run_naive_tp_mlp(x: Matrix, w: MlpWeights, num_devices: int) -> tuple[Matrix, CollectiveLog]:
    """Every GEMM column-split on its own, gathering after each one."""
    ff_plan = make_plan(w.shape.d_ff, num_devices, ShardScheme.NAIVE_PER_GEMM_ALL_GATHER)
    model_plan = make_plan(w.shape.d_model, num_devices, ShardScheme.NAIVE_PER_GEMM_ALL_GATHER)
    log = CollectiveLog()
    a_gate, _ = run_naive_tp_gemm(x, w.w_gate, ff_plan, log)
    a_1, _ = run_naive_tp_gemm(x, w.w_up, ff_plan, log)
    a_2 = Matrix(silu_inplace(a_gate.values.copy()) * a_1.values, A_2)
    y, _ = run_naive_tp_gemm(a_2, w.w_down, model_plan, log)
    return Matrix(y.values, Y), log


def comm_volume(log: CollectiveLog, num_devices: int, model: str = "logical",
                bytes_per_element: int = DEFAULT_BYTES_PER_ELEMENT) -> float:
    """Bytes moved per device.

    ``logical`` charges each event's payload once. ``ring`` uses the ring
    algorithm volumes: 2(P-1)/P of the payload for an all-reduce and
    (P-1)/P for an all-gather.
    """
    if num_devices < 1:
        raise ValueError("need at least one device")
    p = num_devices
    total = 0.0
    for e in log.events:
        payload = e.payload_elements_per_device * bytes_per_element
        if model == "logical":
            total += payload
        elif model == "ring":
            factor = 2 * (p - 1) / p if e.kind is CollectiveKind.ALL_REDUCE else (p - 1) / p
            total += factor * payload
        else:
            raise ValueError(f"unknown volume model {model!r}; expected 'logical' or 'ring'")
    return total
