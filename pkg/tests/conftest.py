def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance lines, which are otherwise captured for passing tests."""
    lines = []
    for key in ("passed", "failed", "skipped", "xfailed"):
        for rep in terminalreporter.stats.get(key, []):
            for _, text in getattr(rep, "sections", []):
                lines += [l for l in text.splitlines() if l.startswith("ACCEPTANCE ")]
    if lines:
        terminalreporter.section("acceptance")
        for line in lines:
            terminalreporter.write_line(line)
