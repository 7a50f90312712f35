import itertools

import numpy as np
import pytest

from deepfusion import (
    AccessLedger,
    LoopOrder,
    Matrix,
    MlpShape,
    ShapeError,
    TileConfig,
    predicted_reuse_counts,
    run_four_kernel,
    run_fused,
    run_fused_stage1,
)
from deepfusion import mutants
from deepfusion.tensor import ordered_reduction
from deepfusion.variants import MlpWeights, two_kernel_stage1

from conftest import make_instance, oracle_mlp, oracle_stage1

ROW, COL = LoopOrder.ROW_MAJOR, LoopOrder.COLUMN_MAJOR


def stage1(x, w, tile, **kw):
    a2 = Matrix.zeros(x.rows, w.shape.d_ff)
    run_fused_stage1(x, w.w_up, w.w_gate, tile, a2, **kw)
    return a2.values


def tile_grid(shape):
    dims = itertools.product([1, 2, 3, shape.batch + 4], [1, 3, 5, shape.d_ff], [1, 4, 7, shape.d_model])
    return [TileConfig(m, n, k, o) for (m, n, k), o in itertools.product(dims, LoopOrder)]


@pytest.mark.parametrize("order", list(LoopOrder))
def test_single_tile_equals_two_kernel_stage1(rng, order):
    x, w = make_instance(rng, 3, 6, 10)
    ref = two_kernel_stage1(x, w.w_up, w.w_gate).values
    got = stage1(x, w, TileConfig(64, 64, 64, order))
    assert np.max(np.abs(got - ref)) <= 1e-14


def test_zero_input_zero_output_for_all_tiles(rng):
    _, w = make_instance(rng, 2, 5, 9)
    for tile in tile_grid(MlpShape(2, 5, 9)):
        assert not stage1(Matrix.zeros(2, 5), w, tile).any()


def test_tile_split_matches_oracle(rng):
    x, w = make_instance(rng, 2, 4, 8)
    a = stage1(x, w, TileConfig(1, 2, 2))
    b = stage1(x, w, TileConfig(2, 8, 4))
    ref = oracle_stage1(x.values, w.w_up.values, w.w_gate.values)
    assert np.max(np.abs(a - b)) <= 1e-12
    assert np.max(np.abs(a - ref)) <= 1e-12


def test_scalar_case_matches_four_kernel():
    w = MlpWeights.from_arrays([[3.0]], [[1.0]], [[1.0]])
    x = Matrix([[2.0]])
    y = run_fused(x, w, TileConfig(1, 1, 1))
    assert y.values[0, 0] == pytest.approx(10.56956493573459, abs=1e-14)
    assert y.values[0, 0] == pytest.approx(run_four_kernel(x, w).values[0, 0], abs=1e-15)


def test_zero_gate_case():
    w = MlpWeights.from_arrays([[1, 1], [1, 1]], [[0, 0], [0, 0]], np.eye(2))
    assert run_fused(Matrix([[1.0, 0.0]]), w, TileConfig(1, 1, 1, COL)).tolist() == [[0.0, 0.0]]


def test_random_instances_match_four_kernel():
    rng = np.random.default_rng(99)
    for _ in range(200):
        b, d, f = int(rng.integers(1, 9)), int(rng.integers(2, 33)), int(rng.integers(2, 65))
        x, w = make_instance(rng, b, d, f)
        tile = TileConfig(int(rng.integers(1, 10)), int(rng.integers(1, 70)), int(rng.integers(1, 40)),
                          ROW if rng.random() < 0.5 else COL)
        assert np.max(np.abs(run_fused(x, w, tile).values - run_four_kernel(x, w).values)) <= 1e-10


def test_tiling_invariance_and_mutant_control():
    rng = np.random.default_rng(3)
    x, w = make_instance(rng, 6, 29, 31)
    tiles = tile_grid(MlpShape(6, 29, 31))

    def spread():
        outs = [stage1(x, w, t) for t in tiles]
        return max(float(np.max(np.abs(a - outs[0]))) for a in outs)

    assert spread() <= 1e-12
    with mutants.activate("silu-per-kchunk"):
        assert spread() > 1e-3


def test_edge_tiles_non_divisible(rng):
    x, w = make_instance(rng, 5, 11, 7)
    ref = oracle_mlp(x.values, w.w_up.values, w.w_gate.values, w.w_down.values)
    for tile in [TileConfig(2, 3, 4, ROW), TileConfig(3, 3, 5, COL), TileConfig(4, 6, 10, COL)]:
        assert np.max(np.abs(run_fused(x, w, tile).values - ref)) <= 1e-10


@pytest.mark.parametrize("workers", [2, 3, 8])
@pytest.mark.parametrize("order", list(LoopOrder))
def test_worker_count_does_not_change_results_or_counts(rng, workers, order):
    x, w = make_instance(rng, 7, 13, 23)
    tile = TileConfig(2, 5, 4, order)
    l1, l2 = AccessLedger(), AccessLedger()
    serial = stage1(x, w, tile, ledger=l1)
    parallel = stage1(x, w, tile, ledger=l2, workers=workers)
    assert np.max(np.abs(serial - parallel)) <= 1e-12
    assert l1.snapshot() == l2.snapshot()


def test_no_intermediate_buffers_in_ledger(rng):
    x, w = make_instance(rng, 3, 5, 9)
    ledger = AccessLedger()
    run_fused(x, w, TileConfig(2, 4, 2, COL), ledger=ledger)
    assert ledger.names() == {"X", "W_up", "W_gate", "A_2", "W_down", "Y"}
    assert ledger.writes("A_2") == 3 * 9


@pytest.mark.parametrize(
    "shape, tile",
    [
        (MlpShape(b, d, f), TileConfig(m, n, k, o))
        for (b, d, f), (m, n, k), o in itertools.product(
            [(2, 4, 8), (3, 5, 7), (1, 9, 13), (6, 2, 3)], [(1, 3, 2), (2, 2, 5), (4, 8, 1), (9, 20, 9)], LoopOrder
        )
    ],
)
def test_instrumented_counts_equal_reuse_prediction(shape, tile):
    rng = np.random.default_rng(0)
    x, w = make_instance(rng, shape.batch, shape.d_model, shape.d_ff)
    ledger = AccessLedger()
    stage1(x, w, tile, ledger=ledger)
    pred = predicted_reuse_counts(shape, tile)
    assert ledger.reads("X") == pred.x_reads
    assert ledger.reads("W_up") + ledger.reads("W_gate") == pred.weight_reads
    assert ledger.writes("A_2") == pred.a2_writes


def brute_force_reuse(shape, tile):
    """Replay the tile loop nest and count panel loads."""
    rows = range(0, shape.batch, tile.tile_m)
    cols = range(0, shape.d_ff, tile.tile_n)
    x_reads = w_reads = 0
    outer, inner = (rows, cols) if tile.loop_order is ROW else (cols, rows)
    for o in outer:
        if tile.loop_order is ROW:
            x_reads += min(tile.tile_m, shape.batch - o) * shape.d_model
        else:
            w_reads += 2 * shape.d_model * min(tile.tile_n, shape.d_ff - o)
        for i in inner:
            if tile.loop_order is ROW:
                w_reads += 2 * shape.d_model * min(tile.tile_n, shape.d_ff - i)
            else:
                x_reads += min(tile.tile_m, shape.batch - i) * shape.d_model
    return x_reads, w_reads


@pytest.mark.parametrize(
    "shape, tile, expected",
    [
        (MlpShape(2, 4, 8), TileConfig(2, 8, 4, ROW), (8, 64)),
        (MlpShape(2, 4, 8), TileConfig(2, 8, 4, COL), (8, 64)),
        (MlpShape(2, 4, 8), TileConfig(1, 2, 4, COL), (32, 64)),
        (MlpShape(4, 4, 8), TileConfig(1, 8, 4, ROW), (16, 2 * 4 * 8 * 4)),
    ],
)
def test_predicted_reuse_examples(shape, tile, expected):
    pred = predicted_reuse_counts(shape, tile)
    assert (pred.x_reads, pred.weight_reads) == expected == brute_force_reuse(shape, tile)
    assert pred.a2_writes == shape.batch * shape.d_ff


def test_predicted_reuse_matches_loop_replay():
    for b, d, f, m, n in itertools.product([1, 3, 8], [2, 5], [7, 16], [1, 3, 10], [2, 3, 16]):
        for order in LoopOrder:
            shape, tile = MlpShape(b, d, f), TileConfig(m, n, 1, order)
            p = predicted_reuse_counts(shape, tile)
            assert (p.x_reads, p.weight_reads) == brute_force_reuse(shape, tile)


def test_invalid_tiles_and_shapes(rng):
    with pytest.raises(ValueError):
        TileConfig(0, 1, 1)
    x, w = make_instance(rng, 2, 4, 8)
    with pytest.raises(ShapeError):
        run_fused_stage1(x, w.w_up, w.w_gate, TileConfig(1, 1, 1), Matrix.zeros(2, 7))
    with pytest.raises(ShapeError):
        run_fused(Matrix.zeros(2, 5), w, TileConfig(1, 1, 1))


def test_ordered_mode_makes_all_tilings_bitwise_equal(rng):
    x, w = make_instance(rng, 4, 17, 19)
    with ordered_reduction():
        outs = [stage1(x, w, t) for t in [TileConfig(1, 1, 1), TileConfig(4, 19, 17), TileConfig(3, 5, 6, COL)]]
    assert all(np.array_equal(outs[0], o) for o in outs[1:])
