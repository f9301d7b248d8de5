import sys


def pytest_terminal_summary(terminalreporter):
    # one line per acceptance criterion, shown even when output capture is on
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "_LINES", None)
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
