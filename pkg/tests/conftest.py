from __future__ import annotations

import numpy as np
import pytest

from tedprune.model import ModelSpec

ZOO = {
    "linear": ModelSpec.linear(3, 1),
    "linear-multi": ModelSpec.linear(3, 2, l2=0.1),
    "logistic": ModelSpec.logistic(3, 2),
    "logistic-3class-l2": ModelSpec.logistic(3, 3, l2=0.05),
    "mlp-tanh": ModelSpec.mlp([3, 5, 2]),
    "mlp-deep": ModelSpec.mlp([3, 4, 4, 3]),
    "mlp-nobias": ModelSpec.mlp([3, 4, 2], bias=False),
    "mlp-regression": ModelSpec("mlp", (3, 4, 1), loss="squared-error"),
}


def make_batch(spec: ModelSpec, n: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, spec.input_dim))
    if spec.loss == "cross-entropy":
        y = rng.integers(0, spec.output_dim, size=n)
    elif spec.output_dim == 1:
        y = rng.standard_normal(n)
    else:
        y = rng.standard_normal((n, spec.output_dim))
    return X, y


@pytest.fixture(params=sorted(ZOO))
def zoo_spec(request):
    return ZOO[request.param]


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
