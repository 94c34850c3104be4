import os
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")
GOLDEN = os.path.join(os.path.dirname(__file__), "golden")


@pytest.fixture(scope="session")
def toy():
    from taskvec.backend.toy import toy_backend

    return toy_backend()


@pytest.fixture(scope="session")
def oracle(toy):
    from toy_oracle import ToyOracle

    return ToyOracle(toy)


@pytest.fixture(scope="session")
def tiny_hf():
    from tiny_hf import build_tiny_hf

    return build_tiny_hf()
