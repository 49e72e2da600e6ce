import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_instance(rng, I=None, J=None, S=None, D=None):
    """Random grid, palette, prior and responsibilities of small size."""
    from pimaps import IndexPrior, Palette, Responsibilities, SignalGrid

    I = I or int(rng.integers(1, 9))
    J = J or int(rng.integers(1, 9))
    S = S or int(rng.integers(1, 5))
    D = D or int(rng.integers(1, 4))
    grid = SignalGrid(rng.normal(size=(I, J, D)))
    palette = Palette(rng.normal(size=(S, D)), rng.uniform(0.2, 2.0, size=(S, D)))
    prior = IndexPrior(rng.dirichlet(np.ones(S), size=(I, J)))
    q = Responsibilities(rng.dirichlet(np.ones(S), size=(I, J)))
    return grid, palette, prior, q


ACCEPTANCE = {}


def record(criterion, passed, detail):
    """Store one acceptance outcome for the end-of-run summary."""
    ACCEPTANCE[criterion] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
