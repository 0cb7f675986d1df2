import sys


def pytest_terminal_summary(terminalreporter):
    """Replay acceptance verdict lines after capture is torn down.

    Default fd-level capture swallows prints from the acceptance tests,
    so they stash their pass/fail lines in VERDICT_LINES and this hook
    writes them where the user can see them.
    """
    mod = sys.modules.get("test_acceptance") or sys.modules.get(
        "tests.test_acceptance"
    )
    lines = getattr(mod, "VERDICT_LINES", None) if mod is not None else None
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
