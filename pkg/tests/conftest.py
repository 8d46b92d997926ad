import os
import sys

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")
torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_corpus():
    """Eight (16, 32, 32) phantoms with ground-truth transforms."""
    from spade.corpus import CorpusSpec, generate_corpus
    from spade.volumes import PhantomSpec

    spec = CorpusSpec(phantom=PhantomSpec(seed=3, size=(16, 32, 32), num_blobs=8), count=8, seed=1,
                      max_translation=2.0)
    return generate_corpus(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = []


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
