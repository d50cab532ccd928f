"""Collects one PASS/FAIL line per acceptance criterion and prints them at the end of the run."""
import pytest

_PARTS = {}


class AcceptanceReport:
    def record(self, key: str, passed: bool, detail: str) -> bool:
        """Note one check of criterion ``key``; a criterion passes only if all its checks do."""
        _PARTS.setdefault(key, []).append((bool(passed), detail))
        print(f"{key} {'PASS' if passed else 'FAIL'} {detail}")
        return passed


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceReport()


def pytest_terminal_summary(terminalreporter):
    if not _PARTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_PARTS):
        parts = _PARTS[key]
        flag = "PASS" if all(ok for ok, _ in parts) else "FAIL"
        terminalreporter.write_line(f"{key} {flag} " + "; ".join(d for _, d in parts))
