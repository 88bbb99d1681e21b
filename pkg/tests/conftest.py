import warnings
from pathlib import Path

import pytest

from defectspin.spin_model import SecularValidityWarning

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "tests" / "fixtures"
CONFIGS = ROOT / "configs"


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def configs_dir():
    return CONFIGS


@pytest.fixture(autouse=True)
def _quiet_secular_warning():
    # Zero-field and low-field helpers legitimately trip this warning.
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SecularValidityWarning)
        yield
