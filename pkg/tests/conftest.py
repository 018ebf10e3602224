import sys
from pathlib import Path

import torch

torch.set_num_threads(1)
sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    from gate import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
