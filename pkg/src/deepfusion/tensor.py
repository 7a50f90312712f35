"""Dense float64 matrices with optional global-access instrumentation.

A :class:`Matrix` models one global (off-chip) buffer. Kernels pull tiles
out of it with :meth:`Matrix.read` and push results back with
:meth:`Matrix.write`; when a :class:`AccessLedger` is attached, every
logical element transfer is counted against the buffer's name. Arrays
returned by ``read`` are tile-local scratch and are never counted again.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
import threading
from dataclasses import dataclass
from typing import Iterator

import numpy as np

Index = slice | int


class ShapeError(ValueError):
    """Raised when operand dimensions are inconsistent."""


_ORDERED = contextvars.ContextVar("deepfusion_ordered_reduction", default=False)


@contextlib.contextmanager
def ordered_reduction() -> Iterator[None]:
    """Force every GEMM inside the block to reduce over k strictly in index order.

    BLAS picks its summation order from the operand shapes, so the same
    output element can differ in the last bit between a full GEMM and a
    column slice of it. Inside this context each output element is a
    left-to-right sum, which makes results independent of tiling and
    sharding at the cost of speed.
    """
    token = _ORDERED.set(True)
    try:
        yield
    finally:
        _ORDERED.reset(token)


def reduction_is_ordered() -> bool:
    return _ORDERED.get()


def gemm_accumulate(a: np.ndarray, b: np.ndarray, acc: np.ndarray) -> None:
    """acc += a @ b on raw arrays (tile-local, never instrumented)."""
    if _ORDERED.get():
        for p in range(a.shape[1]):
            acc += np.multiply.outer(a[:, p], b[p])
    else:
        acc += a @ b


def gemm_into(a: np.ndarray, b: np.ndarray, out: np.ndarray) -> None:
    """out = a @ b on raw arrays."""
    if _ORDERED.get():
        out[...] = 0.0
        gemm_accumulate(a, b, out)
    else:
        np.matmul(a, b, out=out)


class AccessLedger:
    """Per-buffer read/write counters, safe to bump from several threads."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._entries: dict[str, list[int]] = {}

    def record(self, name: str, reads: int = 0, writes: int = 0) -> None:
        if reads < 0 or writes < 0:
            raise ValueError("access counts cannot decrease")
        with self._lock:
            entry = self._entries.setdefault(name, [0, 0])
            entry[0] += reads
            entry[1] += writes

    def reads(self, name: str) -> int:
        with self._lock:
            return self._entries.get(name, (0, 0))[0]

    def writes(self, name: str) -> int:
        with self._lock:
            return self._entries.get(name, (0, 0))[1]

    def names(self) -> set[str]:
        with self._lock:
            return set(self._entries)

    def snapshot(self) -> dict[str, tuple[int, int]]:
        with self._lock:
            return {k: (v[0], v[1]) for k, v in self._entries.items()}

    def merge(self, other: "AccessLedger") -> None:
        for name, (r, w) in other.snapshot().items():
            self.record(name, r, w)

    def reset(self) -> None:
        with self._lock:
            for entry in self._entries.values():
                entry[0] = entry[1] = 0

    @property
    def total(self) -> int:
        with self._lock:
            return sum(r + w for r, w in self._entries.values())

    def __repr__(self) -> str:
        return f"AccessLedger({self.snapshot()!r})"


def _span(index: Index, length: int) -> int:
    if isinstance(index, int):
        if not -length <= index < length:
            raise IndexError(index)
        return 1
    return len(range(*index.indices(length)))


class Matrix:
    """Row-major 2-D float64 buffer.

    ``name`` identifies the buffer in a ledger. Two Matrix objects may share
    storage (see :meth:`bind`) while reporting to different ledgers.
    """

    __slots__ = ("_data", "name", "ledger")

    def __init__(self, data, name: str = "", ledger: AccessLedger | None = None):
        arr = np.asarray(data, dtype=np.float64, order="C")
        if arr.ndim != 2:
            raise ShapeError(f"matrix data must be 2-D, got {arr.ndim}-D")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeError(f"matrix dims must be >= 1, got {arr.shape}")
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self._data = arr
        self.name = name
        self.ledger = ledger

    @classmethod
    def zeros(cls, rows: int, cols: int, name: str = "", ledger: AccessLedger | None = None) -> "Matrix":
        if rows < 1 or cols < 1:
            raise ShapeError(f"matrix dims must be >= 1, got ({rows}, {cols})")
        return cls(np.zeros((rows, cols)), name, ledger)

    @classmethod
    def identity(cls, n: int, name: str = "") -> "Matrix":
        return cls(np.eye(n), name)

    @classmethod
    def random(cls, rows: int, cols: int, rng: np.random.Generator, low: float = -1.0,
               high: float = 1.0, name: str = "") -> "Matrix":
        return cls(rng.uniform(low, high, size=(rows, cols)), name)

    @property
    def rows(self) -> int:
        return self._data.shape[0]

    @property
    def cols(self) -> int:
        return self._data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self._data.shape

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the storage (uninstrumented)."""
        return self._data.reshape(-1)

    @property
    def values(self) -> np.ndarray:
        """2-D view of the storage for oracles and assertions (uninstrumented)."""
        return self._data

    def bind(self, ledger: AccessLedger | None, name: str | None = None) -> "Matrix":
        """Same storage, reporting to ``ledger`` under ``name``."""
        view = Matrix.__new__(Matrix)
        view._data = self._data
        view.name = self.name if name is None else name
        view.ledger = ledger
        return view

    # -- instrumented access -------------------------------------------------

    def read(self, rows: Index = slice(None), cols: Index = slice(None)) -> np.ndarray:
        """Load a rectangular tile; charges one read per element."""
        if self.ledger is not None:
            n = _span(rows, self.rows) * _span(cols, self.cols)
            self.ledger.record(self.name, reads=n)
        return self._data[rows, cols]

    def write(self, rows: Index, cols: Index, values) -> None:
        """Store a rectangular tile; charges one write per element."""
        if self.ledger is not None:
            n = _span(rows, self.rows) * _span(cols, self.cols)
            self.ledger.record(self.name, writes=n)
        self._data[rows, cols] = values

    def charge(self, reads: int = 0, writes: int = 0) -> None:
        """Record transfers that a kernel performs without new data movement here
        (re-reads an uncached kernel would issue)."""
        if self.ledger is not None:
            self.ledger.record(self.name, reads, writes)

    def get(self, i: int, j: int) -> float:
        return float(self.read(i, j))

    def set(self, i: int, j: int, value: float) -> None:
        self.write(i, j, value)

    def tolist(self) -> list[list[float]]:
        return self._data.tolist()

    def copy(self, name: str | None = None) -> "Matrix":
        return Matrix(self._data.copy(), self.name if name is None else name)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Matrix):
            return NotImplemented
        return np.array_equal(self._data, other._data)

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"<Matrix{label} {self.rows}x{self.cols}>"


@dataclass(frozen=True)
class MlpShape:
    """Problem size of one SwiGLU block: ``batch`` rows of width ``d_model``
    expanded to ``d_ff`` hidden units."""

    batch: int
    d_model: int
    d_ff: int

    def __post_init__(self) -> None:
        for field_name in ("batch", "d_model", "d_ff"):
            value = getattr(self, field_name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ShapeError(f"{field_name} must be a positive integer, got {value!r}")

    @property
    def ff_ratio(self) -> float:
        return self.d_ff / self.d_model

    def ratio_warnings(self) -> list[str]:
        """Advisory check that d_ff sits at 3.5x to 4x d_model, the usual
        range for gated MLPs. Never raises."""
        if 3.5 <= self.ff_ratio <= 4.0:
            return []
        return [f"d_ff/d_model = {self.ff_ratio:.3g} is outside the typical [3.5, 4.0] range"]

    def key(self) -> str:
        return f"B{self.batch}_d{self.d_model}_f{self.d_ff}"


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


def matmul(a: Matrix, b: Matrix, out: Matrix, *, accounting: str = "ideal") -> None:
    """out = a @ b as one GEMM kernel.

    ``accounting="ideal"`` charges each input element once (perfect reuse
    within the kernel). ``"raw"`` charges what an uncached triple loop
    issues: every element of ``a`` is read ``n`` times and every element
    of ``b`` ``m`` times. ``out`` is written once per element either way.
    """
    _require(
        a.cols == b.rows,
        f"matmul inner dimensions differ: {a.name or 'A'} is {a.rows}x{a.cols}, "
        f"{b.name or 'B'} is {b.rows}x{b.cols}",
    )
    _require(
        out.shape == (a.rows, b.cols),
        f"matmul output {out.name or 'out'} is {out.rows}x{out.cols}, expected {a.rows}x{b.cols}",
    )
    if accounting not in ("ideal", "raw"):
        raise ValueError(f"unknown accounting mode {accounting!r}")
    av = a.read()
    bv = b.read()
    if accounting == "raw":
        a.charge(reads=a.rows * a.cols * (b.cols - 1))
        b.charge(reads=b.rows * b.cols * (a.rows - 1))
    result = np.empty(out.shape)
    gemm_into(av, bv, result)
    out.write(slice(None), slice(None), result)


def sigmoid(x):
    """Logistic function, evaluated without overflow for large ``|x|``."""
    if np.ndim(x) == 0:
        x = float(x)
        if x >= 0:
            return 1.0 / (1.0 + math.exp(-x))
        z = math.exp(x)
        return z / (1.0 + z)
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    z = np.exp(x[~pos])
    out[~pos] = z / (1.0 + z)
    return out


def silu(x):
    """x * sigmoid(x), a.k.a. swish."""
    if np.ndim(x) == 0:
        return float(x) * sigmoid(x)
    return silu_inplace(np.array(x, dtype=np.float64))


def silu_inplace(x: np.ndarray) -> np.ndarray:
    """Overwrite ``x`` with silu(x); avoids temporaries on hot paths."""
    s = np.negative(x)
    np.clip(s, None, 709.0, out=s)
    np.exp(s, out=s)
    s += 1.0
    np.divide(x, s, out=x)
    return x


def elementwise_mul(a: Matrix, b: Matrix, out: Matrix) -> None:
    """out = a * b, one pass: each input element read once, each output written once."""
    _require(
        a.shape == b.shape == out.shape,
        f"elementwise_mul shapes differ: {a.shape}, {b.shape}, out {out.shape}",
    )
    out.write(slice(None), slice(None), a.read() * b.read())
