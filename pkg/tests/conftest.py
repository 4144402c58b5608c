import numpy as np
import pytest

from nqr import synthfarm as sf
from nqr.prepare import prepare_farm

SMALL = sf.FarmConfig(n_seed_rafts=3, n_grow_robots=3, rafts_per_robot=4, n_grow_rafts=9,
                      grid_h=4, grid_w=6, rng_seed=7)


@pytest.fixture(scope="session")
def small_farm():
    return sf.gen_farm(SMALL)


@pytest.fixture(scope="session")
def small_prepared(small_farm):
    return prepare_farm(small_farm)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance lines are collected here and printed at the end of the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
