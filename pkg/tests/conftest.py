import math

import numpy as np
import pytest

from deepfusion import Matrix, MlpShape, MlpWeights


def triple_loop_matmul(a, b):
    """Scalar i/j/p loop over nested lists."""
    a, b = np.asarray(a).tolist(), np.asarray(b).tolist()
    m, k, n = len(a), len(b), len(b[0])
    assert len(a[0]) == k
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i][p] * b[p][j]
            out[i][j] = s
    return np.array(out)


def scalar_silu(v):
    return v / (1.0 + math.exp(-v))


def oracle_stage1(x, w_up, w_gate):
    gate = triple_loop_matmul(x, w_gate)
    up = triple_loop_matmul(x, w_up)
    return np.array([[u * scalar_silu(g) for u, g in zip(ur, gr)] for ur, gr in zip(up.tolist(), gate.tolist())])


def oracle_mlp(x, w_up, w_gate, w_down):
    return triple_loop_matmul(oracle_stage1(x, w_up, w_gate), w_down)


def make_instance(rng, b, d, f):
    shape = MlpShape(b, d, f)
    w = MlpWeights.random(shape, rng)
    x = Matrix.random(b, d, rng)
    return x, w


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_instance(rng):
    return make_instance(rng, 2, 4, 8)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion(request):
    """Call with (ok, detail) to record and print the criterion's PASS/FAIL line."""
    number = request.node.get_closest_marker("criterion").args[0]

    def report(ok, detail, soft=False):
        status = "PASS" if ok else ("WARN" if soft else "FAIL")
        line = f"[{status}] criterion {number}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return report


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
