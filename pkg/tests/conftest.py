import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from rga import data as data_mod  # noqa: E402


@pytest.fixture
def synthetic_dataset(tmp_path):
    """Tiny drive-layout dataset: 2 train pairs + 1 test pair at 64x64."""
    root = tmp_path / "dataset"
    data_mod.make_synthetic_dataset(root, n_train=2, n_test=1, size=64, seed=0)
    return root
