import os

import pytest

from pei_psm import he
from pei_psm.encoding import PBHParams, cwc_params_for

# acceptance outcomes, printed once at the end of the run
ACCEPTANCE: dict = {}

TOY_T = 17


def record(n: int, ok: bool, detail: str):
    ACCEPTANCE[n] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        tr.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def toy_params():
    """N=8 ring with t=17 (17 = 1 mod 16); no security claim."""
    return he.HEParams(8, TOY_T, (30, 30, 30), security_level=0, profile="toy")


@pytest.fixture(scope="session")
def toy_keys(toy_params):
    return he.keygen(toy_params)


@pytest.fixture(scope="session")
def toy_pbh():
    # lam = lam_bar + log2 N = 2 + 3
    return PBHParams(8, bytes(range(16)), lam=5)


@pytest.fixture(scope="session")
def toy_cwc():
    return cwc_params_for(2, 2, TOY_T)


@pytest.fixture(scope="session")
def params4096():
    return he.gen_params("default_safe", 4096)


@pytest.fixture(scope="session")
def keys4096(params4096):
    return he.keygen(params4096)


@pytest.fixture(scope="session")
def params8192():
    return he.gen_params("default_safe", 8192)


@pytest.fixture(scope="session")
def keys8192(params8192):
    return he.keygen(params8192)


@pytest.fixture(scope="session")
def pbh8192():
    return PBHParams(8192, os.urandom(16))
