import sys
from pathlib import Path

# make the oracle helpers importable from every test module
sys.path.insert(0, str(Path(__file__).parent))

import criteria  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if criteria.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in criteria.RESULTS:
            terminalreporter.write_line(line)
