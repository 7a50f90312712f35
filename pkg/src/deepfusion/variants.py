"""Reference SwiGLU executors: the four-kernel and two-kernel layouts.

Both compute ``Y = ((X @ W_up) * silu(X @ W_gate)) @ W_down``. They differ
only in how stage 1 (everything before the down projection) is split into
kernels, which determines which intermediates round-trip through global
memory. Stage 2 is :func:`down_projection`, shared with the fused path.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .tensor import (
    AccessLedger,
    Matrix,
    MlpShape,
    ShapeError,
    elementwise_mul,
    gemm_into,
    matmul,
    silu_inplace,
)

# Canonical ledger names. Executors bind their inputs to these, so
# instrumented counts never depend on caller-chosen names.
X = "X"
W_UP = "W_up"
W_GATE = "W_gate"
W_DOWN = "W_down"
A_GATE = "A_gate"
A_1 = "A_1"
A_SILU = "A_silu"
A_2 = "A_2"
A_GATE_UP = "A_gate_up"
Y = "Y"

INPUT_BUFFERS = frozenset({X, W_UP, W_GATE, W_DOWN})


class VariantTag(str, enum.Enum):
    FOUR_KERNEL = "four_kernel"
    TWO_KERNEL = "two_kernel"
    FUSED = "fused"

    @property
    def fusion_depth(self) -> int:
        """Higher means fewer stage-1 kernel boundaries."""
        return {"four_kernel": 0, "two_kernel": 1, "fused": 2}[self.value]

    @classmethod
    def parse(cls, text: str) -> "VariantTag":
        norm = text.strip().lower().replace("-", "_")
        aliases = {"four": "four_kernel", "two": "two_kernel", "4": "four_kernel", "2": "two_kernel"}
        norm = aliases.get(norm, norm)
        try:
            return cls(norm)
        except ValueError:
            raise ValueError(
                f"unknown variant {text!r}; expected one of {', '.join(v.value for v in cls)}"
            ) from None


@dataclass(frozen=True, eq=False)
class MlpWeights:
    w_up: Matrix
    w_gate: Matrix
    w_down: Matrix
    shape: MlpShape

    def __post_init__(self) -> None:
        d, f = self.shape.d_model, self.shape.d_ff
        expected = {"w_up": (d, f), "w_gate": (d, f), "w_down": (f, d)}
        for attr, want in expected.items():
            got = getattr(self, attr).shape
            if got != want:
                raise ShapeError(f"{attr} is {got[0]}x{got[1]}, expected {want[0]}x{want[1]}")

    @classmethod
    def from_arrays(cls, w_up, w_gate, w_down, batch: int = 1) -> "MlpWeights":
        up, gate, down = Matrix(w_up, W_UP), Matrix(w_gate, W_GATE), Matrix(w_down, W_DOWN)
        return cls(up, gate, down, MlpShape(batch, up.rows, up.cols))

    @classmethod
    def random(cls, shape: MlpShape, rng: np.random.Generator, scale: float = 1.0) -> "MlpWeights":
        """Entries uniform in [-scale, scale]."""
        d, f = shape.d_model, shape.d_ff
        return cls(
            Matrix(rng.uniform(-scale, scale, (d, f)), W_UP),
            Matrix(rng.uniform(-scale, scale, (d, f)), W_GATE),
            Matrix(rng.uniform(-scale, scale, (f, d)), W_DOWN),
            shape,
        )

    def with_batch(self, batch: int) -> "MlpWeights":
        return MlpWeights(self.w_up, self.w_gate, self.w_down,
                          MlpShape(batch, self.shape.d_model, self.shape.d_ff))


def _check_input(x: Matrix, d_model: int) -> None:
    if x.cols != d_model:
        raise ShapeError(f"X has {x.cols} columns but the weights expect d_model={d_model}")


def _bind(m: Matrix, ledger: AccessLedger | None, name: str) -> Matrix:
    return m.bind(ledger, name) if ledger is not None else m


def four_kernel_stage1(x: Matrix, w_up: Matrix, w_gate: Matrix, *,
                       ledger: AccessLedger | None = None, accounting: str = "ideal") -> Matrix:
    """GEMM, GEMM, SiLU, multiply: four launches, four materialized buffers."""
    _check_input(x, w_up.rows)
    if w_gate.shape != w_up.shape:
        raise ShapeError(f"W_gate {w_gate.shape} and W_up {w_up.shape} differ")
    x = _bind(x, ledger, X)
    w_up = _bind(w_up, ledger, W_UP)
    w_gate = _bind(w_gate, ledger, W_GATE)
    b, f = x.rows, w_up.cols

    a_gate = Matrix.zeros(b, f, A_GATE, ledger)
    matmul(x, w_gate, a_gate, accounting=accounting)
    a_1 = Matrix.zeros(b, f, A_1, ledger)
    matmul(x, w_up, a_1, accounting=accounting)

    a_silu = Matrix.zeros(b, f, A_SILU, ledger)
    a_silu.write(slice(None), slice(None), silu_inplace(a_gate.read().copy()))

    a_2 = Matrix.zeros(b, f, A_2, ledger)
    elementwise_mul(a_1, a_silu, a_2)
    return a_2


def two_kernel_stage1(x: Matrix, w_up: Matrix, w_gate: Matrix, *,
                      ledger: AccessLedger | None = None, accounting: str = "ideal") -> Matrix:
    """Grouped gate/up GEMM into one [A_gate | A_1] buffer, then silu-and-mul."""
    _check_input(x, w_up.rows)
    if w_gate.shape != w_up.shape:
        raise ShapeError(f"W_gate {w_gate.shape} and W_up {w_up.shape} differ")
    x = _bind(x, ledger, X)
    w_up = _bind(w_up, ledger, W_UP)
    w_gate = _bind(w_gate, ledger, W_GATE)
    b, f = x.rows, w_up.cols

    # kernel 1: each X load serves both the gate and up columns
    xv = x.read()
    wg, wu = w_gate.read(), w_up.read()
    if accounting == "raw":
        x.charge(reads=b * x.cols * (f - 1))
        w_gate.charge(reads=w_gate.rows * f * (b - 1))
        w_up.charge(reads=w_up.rows * f * (b - 1))
    elif accounting != "ideal":
        raise ValueError(f"unknown accounting mode {accounting!r}")
    gate_up = np.empty((b, 2 * f))
    gemm_into(xv, wg, gate_up[:, :f])
    gemm_into(xv, wu, gate_up[:, f:])
    a_gate_up = Matrix.zeros(b, 2 * f, A_GATE_UP, ledger)
    a_gate_up.write(slice(None), slice(None), gate_up)

    # kernel 2: fused silu-and-mul
    g = a_gate_up.read(slice(None), slice(0, f)).copy()
    u = a_gate_up.read(slice(None), slice(f, 2 * f))
    a_2 = Matrix.zeros(b, f, A_2, ledger)
    a_2.write(slice(None), slice(None), silu_inplace(g) * u)
    return a_2


def down_projection(a2: Matrix, w_down: Matrix, *, ledger: AccessLedger | None = None,
                    accounting: str = "ideal") -> Matrix:
    """Stage 2: Y = A_2 @ W_down. Identical for every variant."""
    if a2.cols != w_down.rows:
        raise ShapeError(f"A_2 has {a2.cols} columns but W_down has {w_down.rows} rows")
    a2 = _bind(a2, ledger, A_2)
    w_down = _bind(w_down, ledger, W_DOWN)
    y = Matrix.zeros(a2.rows, w_down.cols, Y, ledger)
    matmul(a2, w_down, y, accounting=accounting)
    return y


def run_four_kernel(x: Matrix, w: MlpWeights, *, ledger: AccessLedger | None = None,
                    accounting: str = "ideal") -> Matrix:
    _check_input(x, w.shape.d_model)
    a2 = four_kernel_stage1(x, w.w_up, w.w_gate, ledger=ledger, accounting=accounting)
    return down_projection(a2, w.w_down, ledger=ledger, accounting=accounting)


def run_two_kernel(x: Matrix, w: MlpWeights, *, ledger: AccessLedger | None = None,
                   accounting: str = "ideal") -> Matrix:
    _check_input(x, w.shape.d_model)
    a2 = two_kernel_stage1(x, w.w_up, w.w_gate, ledger=ledger, accounting=accounting)
    return down_projection(a2, w.w_down, ledger=ledger, accounting=accounting)
