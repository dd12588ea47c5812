import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from registration.models.cloud import PointCloud, RigidTransform
from registration.services.synth import blade_model


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    return Rotation.random(random_state=int(rng.integers(0, 2 ** 31))).as_matrix()


def random_transform(rng: np.random.Generator, trans_scale: float = 5.0) -> RigidTransform:
    return RigidTransform(random_rotation(rng), rng.uniform(-trans_scale, trans_scale, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_blade() -> PointCloud:
    """A few hundred blade surface points; large enough for kNN graphs, small enough for dense N x M work."""
    return blade_model(300, seed=7)


@pytest.fixture
def model_file(tmp_path, small_blade):
    from registration.utils.io import write_xyz
    path = tmp_path / "model.xyz"
    write_xyz(small_blade, path)
    return path
