import os
from pathlib import Path

import numpy as np
import pytest

from spam.poly_core import RankSpec, init_params

ROOT = Path(__file__).resolve().parents[1]
RECIPES = ROOT / "recipes"
DATA_DIR = Path(os.environ.get("SPAM_DATA_DIR", ROOT / "data"))

# criterion id -> (passed, detail); filled by the acceptance tests
ACCEPTANCE = {}


def record_acceptance(cid: int, name: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[cid] = (name, bool(passed), detail)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def order2_params():
    params = init_params(4, 1, RankSpec.from_ranks([3]), seed=5, singular_scale=1.0)
    params.bias[:] = 0.3
    params.order1[...] = np.array([[0.5, -1.0, 0.25, 2.0]])
    return params


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE):
        name, passed, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {cid:>2}. {name}: {detail}")
