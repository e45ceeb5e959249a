"""
Shared pytest configuration for the ecgforge test suite.

Puts ``production/`` on the import path and provides the fixtures shared by the
unit, validation and integration suites.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

PROJECT_ROOT = Path(__file__).parent.parent.parent.parent
PRODUCTION_DIR = Path(__file__).parent.parent / "production"

sys.path.insert(0, str(PRODUCTION_DIR))

FD_STEP = 1e-5
FIXTURES_DIR = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def project_root():
    """Provide the project root directory."""
    return PROJECT_ROOT


@pytest.fixture(scope="session")
def production_dir():
    """Provide the production directory."""
    return PRODUCTION_DIR


def central_difference(fn, array: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Numerical gradient of the scalar ``fn()`` w.r.t. ``array`` (perturbed in place)."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = fn()
        flat[i] = original - h
        minus = fn()
        flat[i] = original
        out[i] = (plus - minus) / (2.0 * h)
    return grad


@pytest.fixture(scope="session")
def ptb_fixture_root():
    """A one-record database in PTB layout: twelve leads in .dat, vx/vy/vz in .xyz."""
    return FIXTURES_DIR / "ptb"


@pytest.fixture
def finite_difference():
    """Central finite differences with h=1e-5."""
    return central_difference


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_synth_config():
    from synth_ecg import SynthConfig

    return SynthConfig(num_patients=4, sampling_rate=500.0, duration=6.0, seed=7)


@pytest.fixture(scope="session")
def small_synth_records(small_synth_config):
    """(record, entry) pairs: 4 healthy then 4 MI patients, all 15 leads."""
    from synth_ecg import generate

    return generate(small_synth_config)


@pytest.fixture
def synth_data_root(tmp_path, small_synth_records):
    """A WFDB data root laid out as ``<root>/<patient>/<record>.{hea,dat}``."""
    from synth_ecg import export_dataset

    root = tmp_path / "data"
    export_dataset(small_synth_records, root)
    return root


def pytest_collection_modifyitems(config, items):
    """Tests under ``unit/`` carry the ``unit`` marker."""
    for item in items:
        if "unit" in Path(str(item.fspath)).parts:
            item.add_marker(pytest.mark.unit)
