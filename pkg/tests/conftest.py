import sys


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdicts at the end of the run."""
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])
