from pathlib import Path

import pytest

from moerlab import kernels
from moerlab.numerics import Rng

DATA = Path(__file__).parent / "data"


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def corpus_path():
    return DATA / "corpus.txt"


@pytest.fixture
def corpus_text(corpus_path):
    return corpus_path.read_text(encoding="utf-8")


@pytest.fixture(params=kernels.available_backends())
def each_backend(request):
    with kernels.using(request.param):
        yield request.param


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import VERDICTS
    except ImportError:
        return
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
