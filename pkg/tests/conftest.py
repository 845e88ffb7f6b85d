import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))  # oracles module

from concept_distill.backend.toy import ToyBackend, pretrain_toy_backend
from concept_distill.toydata import render_scene

# short pretrain for statistical unit checks; the acceptance run uses the full preset
UNIT_PRETRAIN_STEPS = 1000


def cache_dir(tmp_path_factory, name):
    """Persistent folder when CONCEPT_DISTILL_TEST_CACHE is set, else a session temp dir."""
    base = os.environ.get("CONCEPT_DISTILL_TEST_CACHE")
    if base:
        path = os.path.join(base, name)
        os.makedirs(path, exist_ok=True)
        return path
    return str(tmp_path_factory.mktemp(name))


@pytest.fixture(scope="session")
def toy_backend():
    """Randomly initialised toy backend (structure checks only)."""
    backend = ToyBackend(image_size=32, seed=0)
    backend.trained = True  # random weights are enough for shape and algebra checks
    return backend


@pytest.fixture(scope="session")
def trained_backend_path(tmp_path_factory):
    path = os.path.join(cache_dir(tmp_path_factory, "unit_backend"), f"toy_{UNIT_PRETRAIN_STEPS}.bin")
    if not os.path.exists(path):
        pretrain_toy_backend(steps=UNIT_PRETRAIN_STEPS, seed=0).save(path)
    return path


@pytest.fixture(scope="session")
def trained_backend(trained_backend_path):
    return ToyBackend.load(trained_backend_path)


@pytest.fixture(scope="session")
def toy_scenes():
    rng = np.random.default_rng(123)
    return [render_scene("blob", rng, 32) for _ in range(24)]


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one PASS/FAIL line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
