import numpy as np
import pytest
from hypothesis import settings

from siamese_af.numerics import default_dtype

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def f64():
    with default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report one line each in the terminal summary
_CRITERIA: dict[str, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def criterion():
    def record(cid: str, ok: bool, detail: str) -> None:
        _CRITERIA[cid] = (bool(ok), detail)
        print(f"{cid} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, f"{cid}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in range(1, 10):
        cid = f"C{k}"
        if cid not in _CRITERIA:
            terminalreporter.write_line(f"{cid} NOT RECORDED: test errored before reaching its verdict or was deselected")
            continue
        ok, detail = _CRITERIA[cid]
        terminalreporter.write_line(f"{cid} {'PASS' if ok else 'FAIL'}: {detail}")
