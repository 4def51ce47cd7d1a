def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance PASS/FAIL lines even when output capture is on."""
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
