import contextlib

# acceptance criteria report here; the lines are printed after the run
CRITERIA: dict[int, str] = {}


class _Outcome:
    def __init__(self):
        self.detail = ""


@contextlib.contextmanager
def criterion(number: int, title: str):
    """Record PASS/FAIL for an acceptance criterion around the checking block."""
    outcome = _Outcome()
    try:
        yield outcome
    except BaseException as exc:
        if type(exc).__name__ == "Skipped":
            CRITERIA[number] = f"SKIP criterion {number}: {title} ({exc})"
        else:
            detail = outcome.detail or f"{type(exc).__name__}: {exc}".splitlines()[0]
            CRITERIA[number] = f"FAIL criterion {number}: {title} [{detail}]"
        raise
    CRITERIA[number] = f"PASS criterion {number}: {title}" + (f" [{outcome.detail}]" if outcome.detail else "")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[number])
