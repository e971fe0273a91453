import sys
from pathlib import Path

import torch

sys.path.insert(0, str(Path(__file__).parent))

import acceptance_log  # noqa: E402

torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.LINES:
            terminalreporter.write_line(line)
