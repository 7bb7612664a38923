import contextlib
import time

import numpy as np
import pytest

from ctreport import tensor as T

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def f64():
    with T.default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class CriterionRecorder:
    """Collects one status line per acceptance criterion for the terminal summary."""

    @contextlib.contextmanager
    def __call__(self, number: int, title: str):
        info = {"detail": ""}
        start = time.perf_counter()
        try:
            yield info
        except BaseException as exc:
            _ACCEPTANCE[number] = (f"[{number:>2}] FAIL  {title}: {info['detail']} "
                                   f"({type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''})")
            raise
        else:
            elapsed = time.perf_counter() - start
            _ACCEPTANCE[number] = f"[{number:>2}] PASS  {title}: {info['detail']} ({elapsed:.1f}s)"
        finally:
            print(_ACCEPTANCE.get(number, ""))


@pytest.fixture
def criterion():
    return CriterionRecorder()


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
