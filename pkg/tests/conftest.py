import os
import sys
from pathlib import Path

import pytest
import torch
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(int(os.environ.get("RECOVERFLOW_THREADS", "1")))

settings.register_profile("default", deadline=None, max_examples=25, derandomize=True)
settings.load_profile("default")

ROOT = Path(__file__).resolve().parents[1]
MATRIX_DIR = Path(os.environ.get("RECOVERFLOW_MATRIX", ROOT / "runs" / "matrix"))


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(0)
