import os

import numpy as np
import pytest
from hypothesis import settings

from phasecode import diffcore as dc
from phasecode.optics import OpticsConfig

settings.register_profile("phasecode", max_examples=25, deadline=None)
settings.load_profile("phasecode")


@pytest.fixture(autouse=True)
def _f64_default():
    prev = dc.get_default_dtype()
    dc.set_default_dtype(np.float64)
    yield
    dc.set_default_dtype(prev)


@pytest.fixture(autouse=True, scope="session")
def _isolated_cache(tmp_path_factory):
    # unit tests never touch the user's cache; the acceptance suite sets its own
    if "PHASECODE_CACHE" not in os.environ:
        os.environ["PHASECODE_CACHE"] = str(tmp_path_factory.mktemp("cache"))
    yield


@pytest.fixture(scope="session")
def small_optics():
    """Cheap optics for tests that exercise plumbing rather than the default design."""
    return OpticsConfig(psf_size=15, pupil_samples=64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
