import numpy as np
import pytest

from offnet.dataset import scan_dataset
from offnet.geometry import Calibration
from offnet.synthetic import make_synthetic_dataset


def pinhole(f=100.0, cx=640.0, cy=360.0, rotation=None, translation=(0.0, 0.0, 0.0)) -> Calibration:
    p2 = np.array([[f, 0.0, cx, 0.0], [0.0, f, cy, 0.0], [0.0, 0.0, 1.0, 0.0]])
    r = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
    return Calibration(p2, np.hstack([r, np.asarray(translation, dtype=np.float64)[:, None]]))


@pytest.fixture
def calib():
    return pinhole()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """2 training, 1 validation, 2 testing frames at 64x64."""
    root = tmp_path_factory.mktemp("ds")
    make_synthetic_dataset(root, {"training": 2, "validation": 1, "testing": 2})
    return root


@pytest.fixture(scope="session")
def small_manifest(small_dataset):
    return scan_dataset(small_dataset)
