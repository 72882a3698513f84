import os
import sys
import tempfile
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))
# keep the suite's on-disk caches out of the user's home directory
os.environ.setdefault("ATTRPROMPT_CACHE_DIR", tempfile.mkdtemp(prefix="attrprompt-test-cache-"))

from attrprompt.backbone import SyntheticBackbone  # noqa: E402
from attrprompt.data import overfit_rig, synthetic_splits  # noqa: E402


@pytest.fixture(scope="session")
def backbone():
    return SyntheticBackbone(seed=0)


@pytest.fixture(scope="session")
def rig(backbone):
    return overfit_rig(backbone)


@pytest.fixture(scope="session")
def splits(backbone):
    return synthetic_splits(backbone)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
