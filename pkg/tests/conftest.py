import time
from contextlib import contextmanager

ACCEPTANCE = {}


@contextmanager
def criterion(number, title):
    """Record PASS/FAIL and wall time for an acceptance criterion, re-raising failures."""
    t0 = time.perf_counter()
    try:
        yield
    except BaseException as exc:
        ACCEPTANCE[number] = (title, False, time.perf_counter() - t0, f"{type(exc).__name__}: {exc}".splitlines()[0])
        raise
    ACCEPTANCE[number] = (title, True, time.perf_counter() - t0, "")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, ok, secs, why = ACCEPTANCE[number]
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {title}  ({secs:.1f}s)"
        terminalreporter.write_line(line + (f"  [{why}]" if why else ""))
