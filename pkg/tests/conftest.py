"""Shared fixtures for the lords test suite."""

import numpy as np
import pytest

from lords.core.formats import write_tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def state_dir(tmp_path, monkeypatch):
    """Isolated state directory; also exported so nothing lands in the cwd"""
    path = tmp_path / "state"
    monkeypatch.setenv("LORDS_STATE_DIR", str(path))
    return path


@pytest.fixture
def gaussian_file(tmp_path):
    """Factory writing a seeded Gaussian matrix to an .lrt file"""
    def make(rows=32, cols=64, seed=0, name="w.lrt"):
        w = np.random.default_rng(seed).standard_normal((rows, cols)).astype(np.float32).astype(np.float64)
        path = tmp_path / name
        write_tensor(w, path)
        return path, w
    return make
