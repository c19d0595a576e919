import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tinyscene import tiny_decoder as _tiny_decoder  # noqa: E402


@pytest.fixture(scope="session")
def decoder():
    from facedapt.facemodel import synth_identity

    return synth_identity()


@pytest.fixture(scope="session")
def tiny_decoder():
    return _tiny_decoder()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
