import sys
from pathlib import Path

# Add the project root to the Python path
sys.path.insert(0, str(Path(__file__).parent.parent.absolute()))

import pytest

from core.model import family_a, family_b


@pytest.fixture
def model_a():
    return family_a((8, 8), (8, 8))


@pytest.fixture
def model_b():
    return family_b(0.3, (12, 12), (8, 8))


@pytest.fixture
def scenario_dir():
    return Path(__file__).parent.parent / "scenarios"
