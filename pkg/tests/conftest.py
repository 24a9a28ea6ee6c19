"""Collects acceptance verdicts and prints them once at the end of the run."""

VERDICTS: dict[str, str] = {}


def record(criterion: str, passed: bool | None, detail: str) -> bool | None:
    """``passed=None`` marks a criterion that is reported but not checkable here."""
    status = "N/A" if passed is None else ("PASS" if passed else "FAIL")
    line = f"{criterion} {status}  {detail}"
    VERDICTS[criterion] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(VERDICTS, key=lambda k: int(k[1:])):
        terminalreporter.write_line(VERDICTS[key])
