"""Collects one PASS/FAIL line per acceptance criterion and prints them after the run."""

CRITERIA: dict = {}


def record(criterion: int, label: str, passed: bool, detail: str) -> None:
    CRITERIA.setdefault(criterion, []).append((label, bool(passed), detail))
    print(f"{'PASS' if passed else 'FAIL'} criterion {criterion} [{label}]: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(CRITERIA):
        parts = CRITERIA[crit]
        ok = all(p for _, p, _ in parts)
        detail = "; ".join(f"{label} {'ok' if p else 'FAILED'} ({d})" for label, p, d in parts)
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {crit}: {detail}")
