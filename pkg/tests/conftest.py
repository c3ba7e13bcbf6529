import pytest

_ACCEPTANCE = []


@pytest.fixture
def criterion(request):
    """Record a PASS/FAIL line for an acceptance criterion.

    Usage: ``with criterion(3, "DSP properties") as notes: ...``; anything
    appended to ``notes`` is shown after the verdict.
    """
    class _Recorder:
        def __call__(self, number, title):
            self.number, self.title, self.notes = number, title, []
            return self

        def __enter__(self):
            return self.notes

        def __exit__(self, exc_type, exc, tb):
            verdict = "PASS" if exc_type is None else "FAIL"
            detail = "; ".join(self.notes)
            if exc_type is not None:
                detail = (detail + "; " if detail else "") + f"{exc_type.__name__}: {exc}"
            line = f"criterion {self.number} [{self.title}]: {verdict}" + (f" ({detail})" if detail else "")
            _ACCEPTANCE.append((self.number, line))
            print(line)
            return False

    return _Recorder()


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE, key=lambda x: x[0]):
            terminalreporter.write_line(line)
