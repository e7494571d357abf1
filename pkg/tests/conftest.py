import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from cfrg.config import desk_config  # noqa: E402
from cfrg.dataset import scan_layout  # noqa: E402
from cfrg.toydata import make_mini_dataset  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"
ACCEPTANCE_LINES: list[str] = []

torch.set_num_threads(max(1, torch.get_num_threads()))


@pytest.fixture(scope="session")
def mini_root(tmp_path_factory):
    return make_mini_dataset(tmp_path_factory.mktemp("mini"))


@pytest.fixture(scope="session")
def mini_index(mini_root):
    return scan_layout(mini_root, "plate")


@pytest.fixture
def desk_cfg(mini_root):
    return desk_config(**{"train.data_root": str(mini_root)})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
