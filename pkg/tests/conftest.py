import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)


@pytest.fixture
def tiny_data_config():
    from ilnet.synthdata import DataConfig

    return DataConfig(n_scenes=40, n_eval=10, labeled_fraction=0.25, seed=3)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """Records one result line per acceptance criterion for the session summary."""
    def record(number, line):
        _ACCEPTANCE[number] = line
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number])
