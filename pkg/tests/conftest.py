import contextlib

import pytest

# criterion number -> (passed, title, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


@contextlib.contextmanager
def criterion(n: int, title: str):
    """Record PASS/FAIL for one acceptance criterion; failures still propagate to pytest."""
    detail: dict = {}
    try:
        yield detail
    except BaseException as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        ACCEPTANCE[n] = (False, title, "; ".join([_fmt(detail), msg]).strip("; "))
        raise
    ACCEPTANCE[n] = (True, title, _fmt(detail))


def _fmt(detail: dict) -> str:
    return ", ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in detail.items())


@pytest.fixture
def acceptance():
    return criterion


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 11):
        if n not in ACCEPTANCE:
            terminalreporter.write_line(f"SKIP criterion {n:2d}: not run")
            continue
        ok, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n:2d}: {title} [{detail}]")
