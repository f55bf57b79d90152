import warnings

import numpy as np
import pytest

from bam.align import train_baseline
from bam.synth import SynthSpec, SynthWorld, synth_corpus


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def world():
    return SynthWorld(SynthSpec(seed=7, context_depth=1))


@pytest.fixture(scope="session")
def train_set(world):
    return synth_corpus(world, 150, "train")


@pytest.fixture(scope="session")
def baseline(world, train_set):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return train_baseline(train_set.utterances, world.lexicon, 3)


_ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: criterion(number, title, passed, detail)."""

    def record(number: int, title: str, passed: bool, detail: str = "") -> bool:
        _ACCEPTANCE[number] = (title, bool(passed), detail)
        print(f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {title}: {detail}")
