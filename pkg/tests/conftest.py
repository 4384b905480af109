import sys
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import _report  # noqa: E402
from usamkit.backend import SyntheticWorld  # noqa: E402
from usamkit.pipeline import generate_sets  # noqa: E402
from usamkit.usam import USAM, build_training_set  # noqa: E402

# Shared by the unit tests that need trained heads; kept small enough to
# train in about a minute. Learnability bounds use the benchmark-scale
# fixtures further down.
UNIT_TRAIN = 1500
UNIT_TEST = 500
UNIT_EPOCHS = 12


@pytest.fixture(scope="session")
def trained():
    world = SyntheticWorld()
    train_sets = generate_sets(world, UNIT_TRAIN, first=0, grid="usam")
    test_sets = generate_sets(world, UNIT_TEST, first=100_000, grid="usam")
    train = build_training_set(train_sets)
    test = build_training_set(test_sets)
    heads = USAM(epochs=UNIT_EPOCHS, random_state=0).fit(train)
    return SimpleNamespace(world=world, train=train, test=test, test_sets=test_sets, heads=heads)


@pytest.fixture(scope="session")
def test_tokens_T(trained):
    ex = [e for e in trained.test if e.source.value == "T"]
    return ex, np.stack([e.tokens for e in ex])


# Desk-scale benchmark: the default world with 5000 training and 1000
# held-out samples. Generation time is kept so the end-to-end check can
# charge it to its runtime budget.
BENCH_TRAIN = 5000
BENCH_TEST = 1000
BENCH_EPOCHS = 16


def _examples(world, n, first, chunk=500):
    # raw sample sets are large; keep only the token/target examples
    out = []
    for start in range(first, first + n, chunk):
        out.extend(build_training_set(generate_sets(world, min(chunk, first + n - start),
                                                    first=start, grid="usam")))
    return out


@pytest.fixture(scope="session")
def bench_data():
    world = SyntheticWorld()
    t0 = time.perf_counter()
    train = _examples(world, BENCH_TRAIN, 0)
    test = _examples(world, BENCH_TEST, 100_000)
    gen_seconds = time.perf_counter() - t0
    return SimpleNamespace(world=world, train=train, test=test, gen_seconds=gen_seconds)


@pytest.fixture(scope="session")
def bench_heads(bench_data):
    """All nine heads trained at benchmark scale."""
    return USAM(epochs=BENCH_EPOCHS, random_state=0).fit(bench_data.train)


@pytest.fixture(scope="session")
def bench_tokens_T(bench_data):
    ex = [e for e in bench_data.test if e.source.value == "T"]
    return ex, np.stack([e.tokens for e in ex])


def pytest_terminal_summary(terminalreporter):
    if _report.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_report.LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
