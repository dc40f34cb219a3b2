import pytest

_ACCEPTANCE: dict = {}


class AcceptanceLog:
    """Collects one outcome line per acceptance criterion for the run summary."""

    def record(self, key: str, passed, detail: str) -> None:
        status = {True: "PASS", False: "FAIL", None: "SKIP"}[passed]
        _ACCEPTANCE[key] = f"[{status}] {key}: {detail}"


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceLog()


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[key])
