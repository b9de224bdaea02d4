def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per acceptance criterion at the end of the run."""
    rows = {}
    for status, outcome in (("passed", "PASS"), ("failed", "FAIL"),
                            ("error", "FAIL")):
        for rep in terminalreporter.stats.get(status, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::" in nodeid:
                rows[nodeid.split("::")[-1]] = outcome
    if rows:
        terminalreporter.section("acceptance criteria")
        for name in sorted(rows, key=_criterion_order):
            terminalreporter.write_line(f"{rows[name]}  {name}")


def _criterion_order(name: str):
    import re

    m = re.search(r"criterion_(\d+)", name)
    return int(m.group(1)) if m else 99
