import _criteria


def pytest_terminal_summary(terminalreporter):
    lines = _criteria.summary_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
