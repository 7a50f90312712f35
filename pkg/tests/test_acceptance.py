"""Acceptance criteria 1-9, each at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines as they
happen; they are also collected into a summary section at the end.
"""

import itertools
import json
import time
import warnings

import numpy as np
import pytest

from deepfusion import cli, mutants
from deepfusion import fused as _fused
from deepfusion.bench import ThroughputRow, emit_report, parse_csv
from deepfusion.fused import KernelConfig, LoopOrder, TileConfig
from deepfusion.scheduler import (
    CacheFormatError,
    CacheVersionError,
    Scheduler,
    cache_lookup,
    default_candidates,
    profile,
    select,
)
from deepfusion.tensor import Matrix, MlpShape
from deepfusion.tp import CollectiveKind, make_plan, run_naive_tp_mlp, run_tp_mlp
from deepfusion.traffic import flops, predict_traffic, verify_against_instrumented
from deepfusion.variants import MlpWeights, VariantTag, run_four_kernel
from deepfusion.verify import check_timing, oracle_mlp


@pytest.mark.criterion(1)
def test_variant_equivalence(criterion):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst, configs_run = 0.0, 0
    for _ in range(200):
        shape = MlpShape(*(int(v) for v in rng.integers(1, 65, size=3)))
        w = MlpWeights.random(shape, rng)
        x = Matrix.random(shape.batch, shape.d_model, rng)
        ref = oracle_mlp(x.values, w.w_up.values, w.w_gate.values, w.w_down.values)
        for cfg in default_candidates(shape):
            worst = max(worst, float(np.max(np.abs(_fused.run_mlp(cfg, x, w).values - ref))))
            configs_run += 1
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-10 and elapsed < 10.0
    assert criterion(ok, f"200 instances, {configs_run} executor runs, max |dev| {worst:.2e} <= 1e-10, "
                         f"{elapsed:.2f}s < 10s")


def _fused_outputs(tiles, shape, x, w):
    outs = []
    for tile in tiles:
        a2 = Matrix.zeros(shape.batch, shape.d_ff)
        _fused.run_fused_stage1(x, w.w_up, w.w_gate, tile, a2)
        outs.append(a2.values.copy())
    return max(float(np.max(np.abs(a - b))) for a, b in itertools.combinations(outs, 2))


@pytest.mark.criterion(2)
def test_tiling_invariance_with_negative_control(criterion):
    rng = np.random.default_rng(7)
    shape = MlpShape(6, 37, 41)
    w = MlpWeights.random(shape, rng)
    x = Matrix.random(shape.batch, shape.d_model, rng)
    tiles = [TileConfig(tm, tn, tk, order) for (tm, tn, tk), order in itertools.product(
        [(1, 1, 1), (2, 5, 3), (4, 16, 10), (6, 41, 37), (3, 7, 36), (5, 40, 2)], LoopOrder)]
    good = _fused_outputs(tiles, shape, x, w)
    with mutants.activate("silu-per-kchunk"):
        bad = _fused_outputs(tiles, shape, x, w)
    ok = len(tiles) >= 8 and good <= 1e-12 and bad > 1e-12
    assert criterion(ok, f"{len(tiles)} tile configs, max pairwise |dev| {good:.2e} <= 1e-12; "
                         f"per-k-chunk SiLU mutant deviates {bad:.2e} (must fail)")


@pytest.mark.criterion(3)
def test_traffic_exactness(criterion):
    shapes = [MlpShape(2, 4, 8), MlpShape(3, 5, 7), MlpShape(1, 9, 13), MlpShape(5, 8, 32), MlpShape(7, 3, 11)]
    tiles = [(1, 3, 2), (2, 2, 4), (3, 5, 3), (4, 6, 5), (64, 64, 64)]
    grid = []
    for shape in shapes:
        grid += [(VariantTag.FOUR_KERNEL, shape, None), (VariantTag.TWO_KERNEL, shape, None)]
        grid += [(VariantTag.FUSED, shape, TileConfig(*t, order)) for t, order in itertools.product(tiles, LoopOrder)]
    edge = sum(1 for v, s, t in grid if t and (s.batch % t.tile_m or s.d_ff % t.tile_n or s.d_model % t.tile_k))
    mismatches = [(v, s, t, d) for v, s, t in grid for inc in (False, True)
                  if (d := verify_against_instrumented(v, s, t, seed=11, include_down=inc))]
    ok = len(grid) >= 60 and edge > 0 and not mismatches
    assert criterion(ok, f"{len(grid)} combos ({edge} with non-divisible edge tiles), "
                         f"{len(mismatches)} per-buffer mismatches")


@pytest.mark.criterion(4)
def test_fused_saving_and_ordering(criterion):
    rng = np.random.default_rng(99)
    identity_bad = 0
    for _ in range(50):
        shape = MlpShape(int(rng.integers(1, 129)), int(rng.integers(1, 257)), int(rng.integers(1, 1025)))
        two = predict_traffic(VariantTag.TWO_KERNEL, shape, include_down=False).total_elements
        fus = predict_traffic(VariantTag.FUSED, shape, TileConfig.single(shape), include_down=False).total_elements
        identity_bad += two - fus != 4 * shape.batch * shape.d_ff
    order_bad, grid = 0, list(itertools.product([1, 2, 5, 16, 64], [1, 4, 9, 64], [1, 8, 30, 256]))
    for b, d, f in grid:
        shape = MlpShape(b, d, f)
        for include_down in (False, True):
            four, two, fus = (predict_traffic(v, shape, TileConfig.single(shape), include_down=include_down)
                              .total_elements for v in VariantTag)
            order_bad += not fus < two < four
    ok = identity_bad == 0 and order_bad == 0
    assert criterion(ok, f"50 random shapes, {identity_bad} violations of two - fused == 4*B*d_ff; "
                         f"{len(grid)} grid shapes x 2 scopes, {order_bad} ordering violations")


@pytest.mark.criterion(5)
def test_flop_invariance(criterion):
    bad = 0
    shapes = list(itertools.product([1, 3, 8, 64], [1, 7, 64, 1024], [1, 10, 256, 4096]))
    for b, d, f in shapes:
        shape = MlpShape(b, d, f)
        for include_down in (False, True):
            counts = {flops(v, shape, include_down=include_down) for v in VariantTag}
            bad += len(counts) != 1 or not isinstance(next(iter(counts)), int)
    assert criterion(bad == 0, f"{len(shapes)} shapes x 2 scopes, {bad} with variant-dependent FLOP counts")


@pytest.mark.criterion(6)
def test_tensor_parallel(criterion):
    rng = np.random.default_rng(31)
    worst, problems, naive_min = 0.0, [], None
    for b, d, f in [(1, 8, 8), (3, 16, 24), (4, 12, 37)]:
        shape = MlpShape(b, d, f)
        w = MlpWeights.random(shape, rng)
        x = Matrix.random(b, d, rng)
        single = run_four_kernel(x, w).values
        executors = [KernelConfig(VariantTag.FOUR_KERNEL), KernelConfig(VariantTag.TWO_KERNEL),
                     KernelConfig(VariantTag.FUSED, TileConfig(2, 3, 5)),
                     KernelConfig(VariantTag.FUSED, TileConfig(1, 4, 8, LoopOrder.COLUMN_MAJOR))]
        for p, cfg in itertools.product([1, 2, 3, 4, 8], executors):
            y, log = run_tp_mlp(x, w, make_plan(f, p), cfg)
            worst = max(worst, float(np.max(np.abs(y.values - single))))
            ev = log.events
            if len(ev) != 1 or ev[0].kind is not CollectiveKind.ALL_REDUCE or ev[0].payload_elements_per_device != b * d:
                problems.append((p, cfg.label))
        _, naive = run_naive_tp_mlp(x, w, 2)
        naive_min = len(naive) if naive_min is None else min(naive_min, len(naive))
    ok = worst <= 1e-10 and not problems and naive_min >= 2
    assert criterion(ok, f"P in 1,2,3,4,8: max |dev| {worst:.2e} <= 1e-10, {len(problems)} blocks without exactly "
                         f"one B*d_model all-reduce; naive scheme logs >= {naive_min} collectives")


@pytest.mark.criterion(7)
def test_scheduler_soundness(criterion, tmp_path):
    shape = MlpShape(2, 16, 32)
    honest = KernelConfig(VariantTag.FUSED, TileConfig.single(shape))
    sleepy = KernelConfig(VariantTag.FUSED, TileConfig(1, 8, 16), label="fused_sleepy")
    broken = KernelConfig(VariantTag.TWO_KERNEL, label="two_kernel_broken")

    def slow(x, w):
        time.sleep(0.01)
        return _fused.run_mlp(sleepy, x, w)

    def corrupt(x, w):
        return Matrix(_fused.run_mlp(broken, x, w).values + 1e-9)

    runners = {sleepy.label: slow, broken.label: corrupt}
    sleepy_chosen = broken_kept = 0
    for trial in range(20):
        results = profile([sleepy, broken, honest], shape, runs=3, seed=trial, runners=runners)
        sleepy_chosen += select(results, shape).chosen == sleepy.label
        broken_kept += any(r.qualified for r in results if r.config_label == broken.label)

    sched = Scheduler(tmp_path / "cache.json", "acceptance", runs=3)
    cands = default_candidates(shape)[:4]
    entry = sched.tune(shape, cands)
    sched.tune(shape, cands)
    warm_skip = sched.profile_calls == 1 and sched.last_was_cache_hit
    round_trip = cache_lookup(shape, "acceptance", sched.cache_path) == entry

    path = sched.cache_path
    text = path.read_text()
    path.write_text(text[: len(text) - 7])
    try:
        cache_lookup(shape, "acceptance", path)
        rejects_corrupt = False
    except CacheFormatError:
        rejects_corrupt = True
    doc = json.loads(text)
    doc["format_version"] += 1
    path.write_text(json.dumps(doc))
    try:
        cache_lookup(shape, "acceptance", path)
        rejects_newer = False
    except CacheVersionError:
        rejects_newer = True

    ok = sleepy_chosen == 0 and broken_kept == 0 and warm_skip and round_trip and rejects_corrupt and rejects_newer
    assert criterion(ok, f"sleep candidate chosen {sleepy_chosen}/20, corrupted kept {broken_kept}/20, "
                         f"warm cache skips profiling={warm_skip}, round-trip={round_trip}, "
                         f"rejects truncated={rejects_corrupt}, rejects newer version={rejects_newer}")


@pytest.mark.criterion(8)
def test_cpu_speedup_sanity(criterion):
    res = check_timing(runs=20, d_model=1024, d_ff=4096, batch=1)
    criterion(res.ok, f"(soft) {res.detail}", soft=True)
    if not res.ok:
        warnings.warn(f"host-dependent timing target missed: {res.detail}")


@pytest.mark.criterion(9)
def test_cli_contract(criterion, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(cli.CACHE_ENV, str(tmp_path / "cache.json"))
    monkeypatch.delenv(mutants.ENV_VAR, raising=False)
    clean = cli.main(["verify", "--no-timing"])
    codes = {}
    for name in mutants.MUTANTS:
        monkeypatch.setenv(mutants.ENV_VAR, name)
        codes[name] = cli.main(["verify", "--no-timing"])
    monkeypatch.delenv(mutants.ENV_VAR)
    capsys.readouterr()

    assert cli.main(["bench", "--d-model", "32", "--d-ff", "128", "--layers", "2", "--batch", "1,2",
                     "--steps", "2", "--reps", "2", "--format", "csv"]) == 0
    csv_text = capsys.readouterr().out
    rows = parse_csv(csv_text)
    csv_ok = len(rows) == 6 and parse_csv(emit_report(rows, "csv")) == rows

    sample = [ThroughputRow(1, 8, "four_kernel", 10.0, 1.0, 1.0, 5.0), ThroughputRow(1, 8, "fused", 12.5, 0.5, 1.25, 3.0),
              ThroughputRow(4, 8, "four_kernel", 40.0, 1.0, 1.0, 5.0), ThroughputRow(4, 8, "fused", 39.0, 0.5, 0.975, 3.0)]
    md = emit_report(sample, "markdown").splitlines()
    b1 = next(l for l in md if l.startswith("| 1 |"))
    b4 = next(l for l in md if l.startswith("| 4 |"))
    bold_ok = "**12.50 ± 0.50**" in b1 and "**10.00" not in b1 and "**40.00 ± 1.00**" in b4 and "**39.00" not in b4

    ok = clean == 0 and all(c == 1 for c in codes.values()) and csv_ok and bold_ok
    assert criterion(ok, f"verify exit {clean} clean, mutants {codes}; bench CSV round-trip={csv_ok}; "
                         f"markdown bolding={bold_ok}")
