"""The invariant suite behind ``deepfusion verify``.

Each check returns a :class:`CheckResult`. Hard checks decide the exit
code; soft checks (host-dependent timing) only warn.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import fused as _fused
from .fused import KernelConfig, LoopOrder, TileConfig
from .scheduler import default_candidates, profile, select
from .tensor import AccessLedger, Matrix, MlpShape
from .tp import CollectiveKind, make_plan, run_naive_tp_mlp, run_tp_mlp
from .traffic import flops, predict_traffic, verify_against_instrumented
from .variants import A_2, W_DOWN, W_GATE, W_UP, X, Y, MlpWeights, VariantTag, run_four_kernel

EQUIV_TOL = 1e-10
TILING_TOL = 1e-12


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str = ""
    soft: bool = False
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.ok else ("WARN" if self.soft else "FAIL")
        return f"[{status}] {self.name}: {self.detail} ({self.seconds:.2f}s)"


@dataclass
class VerifyReport:
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.ok or c.soft for c in self.checks)

    @property
    def warnings(self) -> list[CheckResult]:
        return [c for c in self.checks if c.soft and not c.ok]


def oracle_mlp(x: np.ndarray, w_up: np.ndarray, w_gate: np.ndarray, w_down: np.ndarray) -> np.ndarray:
    """Scalar loops with correctly rounded dot products."""
    b, d = x.shape
    f = w_up.shape[1]
    xs, up, gate, down = x.tolist(), w_up.T.tolist(), w_gate.T.tolist(), w_down.T.tolist()
    a2 = []
    for i in range(b):
        row = []
        for j in range(f):
            g = math.fsum(p * q for p, q in zip(xs[i], gate[j]))
            u = math.fsum(p * q for p, q in zip(xs[i], up[j]))
            row.append(u * g / (1.0 + math.exp(-g)) if g > -700 else 0.0)
        a2.append(row)
    return np.array([[math.fsum(p * q for p, q in zip(a2[i], down[c])) for c in range(d)] for i in range(b)])


def random_instance(rng: np.random.Generator, max_b: int = 8, max_d: int = 32,
                    max_f: int = 64) -> tuple[Matrix, MlpWeights]:
    shape = MlpShape(int(rng.integers(1, max_b + 1)), int(rng.integers(2, max_d + 1)),
                     int(rng.integers(2, max_f + 1)))
    w = MlpWeights.random(shape, rng)
    return Matrix.random(shape.batch, shape.d_model, rng), w


def check_variant_equivalence(instances: int = 200, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst, worst_label = 0.0, ""
    for _ in range(instances):
        x, w = random_instance(rng)
        ref = oracle_mlp(x.values, w.w_up.values, w.w_gate.values, w.w_down.values)
        for cfg in default_candidates(w.shape):
            err = float(np.max(np.abs(_fused.run_mlp(cfg, x, w).values - ref)))
            if err > worst:
                worst, worst_label = err, cfg.label
    return CheckResult("variant equivalence", worst <= EQUIV_TOL,
                       f"{instances} instances, max |dev| = {worst:.2e} ({worst_label or '-'}) <= {EQUIV_TOL:g}")


def tiling_configs(shape: MlpShape) -> list[TileConfig]:
    out = []
    for order in LoopOrder:
        for tm, tn, tk in [(1, 1, 1), (1, 2, 3), (2, 3, 5), (3, 7, 4), (shape.batch, shape.d_ff, shape.d_model),
                           (2, 8, 7), (5, 16, 2), (4, 5, 11)]:
            out.append(TileConfig(tm, tn, tk, order))
    return out


def check_tiling_invariance(seed: int = 1) -> CheckResult:
    rng = np.random.default_rng(seed)
    shape = MlpShape(5, 23, 29)
    w = MlpWeights.random(shape, rng)
    x = Matrix.random(shape.batch, shape.d_model, rng)
    outs = []
    for tile in tiling_configs(shape):
        a2 = Matrix.zeros(shape.batch, shape.d_ff)
        _fused.run_fused_stage1(x, w.w_up, w.w_gate, tile, a2)
        outs.append(a2.values.copy())
    worst = max(float(np.max(np.abs(a - b))) for a, b in itertools.combinations(outs, 2))
    return CheckResult("tiling invariance", worst <= TILING_TOL,
                       f"{len(outs)} tile configs, max pairwise |dev| = {worst:.2e} <= {TILING_TOL:g}")


def traffic_grid() -> list[tuple[VariantTag, MlpShape, TileConfig | None]]:
    shapes = [MlpShape(2, 4, 8), MlpShape(3, 5, 7), MlpShape(1, 6, 13), MlpShape(4, 8, 32), MlpShape(7, 3, 11)]
    tiles = [(1, 3, 2), (2, 2, 4), (3, 5, 3), (64, 64, 64), (2, 4, 1)]
    grid: list[tuple[VariantTag, MlpShape, TileConfig | None]] = []
    for shape in shapes:
        grid.append((VariantTag.FOUR_KERNEL, shape, None))
        grid.append((VariantTag.TWO_KERNEL, shape, None))
        for (tm, tn, tk), order in itertools.product(tiles, LoopOrder):
            grid.append((VariantTag.FUSED, shape, TileConfig(tm, tn, tk, order)))
    return grid


def check_traffic_exactness() -> CheckResult:
    grid = traffic_grid()
    failures = []
    for variant, shape, tile in grid:
        for include_down in (False, True):
            diff = verify_against_instrumented(variant, shape, tile, seed=3, include_down=include_down)
            if diff:
                failures.append(f"{variant.value} {shape.key()} {tile.label if tile else ''}: {diff[0]}")
    detail = f"{len(grid)} (variant, shape, tile) combos x 2 scopes"
    if failures:
        detail += f"; {len(failures)} mismatches, first: {failures[0]}"
    return CheckResult("traffic model exactness", not failures, detail)


def check_no_intermediates() -> CheckResult:
    shape = MlpShape(3, 7, 10)
    rng = np.random.default_rng(5)
    w = MlpWeights.random(shape, rng)
    x = Matrix.random(shape.batch, shape.d_model, rng)
    ledger = AccessLedger()
    _fused.run_fused(x, w, TileConfig(2, 3, 4), ledger=ledger)
    expected = {X, W_UP, W_GATE, A_2, W_DOWN, Y}
    names = ledger.names()
    return CheckResult("fused pass touches no intermediates", names == expected,
                       f"ledger buffers {sorted(names)}")


def check_saving_identity(shapes: int = 50, seed: int = 2) -> CheckResult:
    rng = np.random.default_rng(seed)
    bad = []
    for _ in range(shapes):
        shape = MlpShape(int(rng.integers(1, 65)), int(rng.integers(4, 65)), int(rng.integers(8, 257)))
        two = predict_traffic(VariantTag.TWO_KERNEL, shape, include_down=False).total_elements
        fus = predict_traffic(VariantTag.FUSED, shape, TileConfig.single(shape), include_down=False).total_elements
        if two - fus != 4 * shape.batch * shape.d_ff:
            bad.append(shape)
    order_bad = []
    for b, d, f in itertools.product([1, 2, 7, 16, 64], [4, 9, 32, 64], [8, 30, 128, 256]):
        shape = MlpShape(b, d, f)
        tot = [predict_traffic(v, shape, TileConfig.single(shape)).total_elements for v in VariantTag]
        if not tot[2] < tot[1] < tot[0]:
            order_bad.append(shape)
    ok = not bad and not order_bad
    return CheckResult("fused saving = 4*B*d_ff, strict ordering", ok,
                       f"{shapes} random shapes, {len(bad)} identity failures, {len(order_bad)} ordering failures")


def check_flop_invariance() -> CheckResult:
    bad = 0
    for b, d, f in itertools.product([1, 3, 64], [4, 17, 64], [8, 100, 256]):
        shape = MlpShape(b, d, f)
        if len({flops(v, shape) for v in VariantTag}) != 1:
            bad += 1
    return CheckResult("FLOP invariance", bad == 0, f"{bad} shapes with variant-dependent FLOPs")


def check_tp(seed: int = 4) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst, problems = 0.0, []
    for trial in range(4):
        shape = MlpShape(int(rng.integers(1, 6)), int(rng.integers(4, 17)), int(rng.integers(8, 41)))
        w = MlpWeights.random(shape, rng)
        x = Matrix.random(shape.batch, shape.d_model, rng)
        single = run_four_kernel(x, w).values
        configs = [KernelConfig(VariantTag.FOUR_KERNEL), KernelConfig(VariantTag.TWO_KERNEL),
                   KernelConfig(VariantTag.FUSED, TileConfig(2, 3, 5, LoopOrder.COLUMN_MAJOR))]
        for p, cfg in itertools.product([1, 2, 3, 4, 8], configs):
            y, log = run_tp_mlp(x, w, make_plan(shape.d_ff, p), cfg)
            worst = max(worst, float(np.max(np.abs(y.values - single))))
            if len(log) != 1 or log.events[0].kind is not CollectiveKind.ALL_REDUCE \
                    or log.events[0].payload_elements_per_device != shape.batch * shape.d_model:
                problems.append(f"P={p} {cfg.label}: {log.to_records()}")
        _, naive_log = run_naive_tp_mlp(x, w, 2)
        if len(naive_log) < 2:
            problems.append(f"naive scheme logged {len(naive_log)} collectives")
    ok = worst <= EQUIV_TOL and not problems
    detail = f"P in {{1,2,3,4,8}}, max |dev| = {worst:.2e}, single all-reduce per block"
    if problems:
        detail += f"; {problems[0]}"
    return CheckResult("tensor-parallel equivalence", ok, detail)


def check_scheduler_gate() -> CheckResult:
    shape = MlpShape(2, 8, 16)
    cands = default_candidates(shape)[:3]
    bad = cands[-1]

    def corrupted(x, w):
        y = _fused.run_mlp(bad, x, w)
        return Matrix(y.values + 1e-6)

    results = profile(cands, shape, warmup=1, runs=3, runners={bad.label: corrupted})
    entry = select(results, shape)
    flagged = [r.config_label for r in results if not r.qualified]
    ok = flagged == [bad.label] and entry.chosen != bad.label
    return CheckResult("scheduler correctness gate", ok, f"disqualified {flagged}, chose {entry.chosen}")


def check_timing(runs: int = 20, d_model: int = 1024, d_ff: int = 4096, batch: int = 1) -> CheckResult:
    """Soft: fused stage 1 should not be slower than the unfused layouts on this host."""
    shape = MlpShape(batch, d_model, d_ff)
    rng = np.random.default_rng(0)
    w = MlpWeights.random(shape, rng, scale=d_model ** -0.5)
    x = Matrix.random(batch, d_model, rng)
    configs = {
        VariantTag.FOUR_KERNEL: KernelConfig(VariantTag.FOUR_KERNEL),
        VariantTag.TWO_KERNEL: KernelConfig(VariantTag.TWO_KERNEL),
        VariantTag.FUSED: KernelConfig(VariantTag.FUSED, TileConfig.single(shape)),
    }
    samples: dict[VariantTag, list[int]] = {v: [] for v in configs}
    for v, cfg in configs.items():  # warm-up
        _fused.run_stage1(cfg, x, w.w_up, w.w_gate)
    for _ in range(runs):
        for v, cfg in configs.items():
            t0 = time.perf_counter_ns()
            _fused.run_stage1(cfg, x, w.w_up, w.w_gate)
            samples[v].append(time.perf_counter_ns() - t0)
    med = {v: float(np.median(s)) for v, s in samples.items()}
    r_two = med[VariantTag.FUSED] / med[VariantTag.TWO_KERNEL]
    r_four = med[VariantTag.FUSED] / med[VariantTag.FOUR_KERNEL]
    ok = r_two <= 1.05 and r_four <= 1.0
    return CheckResult("CPU stage-1 timing sanity", ok,
                       f"fused/two = {r_two:.3f} (<= 1.05), fused/four = {r_four:.3f} (<= 1.00), "
                       f"medians us: four {med[VariantTag.FOUR_KERNEL] / 1e3:.0f}, "
                       f"two {med[VariantTag.TWO_KERNEL] / 1e3:.0f}, fused {med[VariantTag.FUSED] / 1e3:.0f}",
                       soft=True)


HARD_CHECKS: list[Callable[[], CheckResult]] = [
    check_variant_equivalence,
    check_tiling_invariance,
    check_traffic_exactness,
    check_no_intermediates,
    check_saving_identity,
    check_flop_invariance,
    check_tp,
    check_scheduler_gate,
]


def run_verify(*, timing: bool = True, echo: Callable[[str], None] | None = None) -> VerifyReport:
    report = VerifyReport()
    checks = list(HARD_CHECKS) + ([check_timing] if timing else [])
    for check in checks:
        t0 = time.perf_counter()
        try:
            res = check()
        except Exception as exc:  # noqa: BLE001 - a crashing check is a failed check
            res = CheckResult(check.__name__.removeprefix("check_"), False, f"raised {type(exc).__name__}: {exc}")
        res.seconds = time.perf_counter() - t0
        report.checks.append(res)
        if echo is not None:
            echo(res.line())
    return report
