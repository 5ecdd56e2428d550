import pytest

# criterion id -> list of (ok, detail); filled by the acceptance suite
ACCEPTANCE: dict = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE.setdefault(criterion, []).append((bool(ok), detail))


@pytest.fixture
def accept():
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for c in sorted(ACCEPTANCE):
        rows = ACCEPTANCE[c]
        verdict = "PASS" if all(ok for ok, _ in rows) else "FAIL"
        tr.write_line(f"criterion {c}: {verdict}")
        for ok, detail in rows:
            tr.write_line(f"    [{'ok' if ok else '--'}] {detail}")
