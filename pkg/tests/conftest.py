import numpy as np
import pytest

from hkt.blocks import BlockNet
from hkt.config import ExperimentConfig
from hkt.data import gen_spiral, split_dataset


@pytest.fixture
def spiral_split():
    return split_dataset(gen_spiral(40, 3, 0.25, seed=0, turns=1.5), 0.25, seed=1)


@pytest.fixture
def small_cfg():
    def make(**kw):
        base = dict(mode="train-hkt", epochs=2, parent_epochs=2, batch_size=16, lr=0.05, parent_lr=0.05)
        base.update(kw)
        return ExperimentConfig(**base)
    return make


@pytest.fixture
def toy_pair():
    parent = BlockNet.build("parent", "mlp:12,10|mlp:8|head:3", (2,), seed=0)
    child = BlockNet.build("child", "mlp:4,3|mlp:2|head:3", (2,), seed=1)
    return parent, child


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_VERDICTS = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion and assert it."""
    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        _VERDICTS.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
