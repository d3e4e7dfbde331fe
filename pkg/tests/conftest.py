import numpy as np
import pytest

from pneutilt.calibration import build_ffmodel
from pneutilt.plant import PlantParams, generate_point_cloud


@pytest.fixture(scope="session")
def plant_params():
    return PlantParams()


@pytest.fixture(scope="session")
def cloud(plant_params):
    return generate_point_cloud(plant_params, noise_deg=0.05, seed=0)


@pytest.fixture(scope="session")
def clean_cloud(plant_params):
    return generate_point_cloud(plant_params, noise_deg=0.0)


@pytest.fixture(scope="session")
def ff_fit(cloud):
    return build_ffmodel(cloud, step=0.25)


@pytest.fixture(scope="session")
def ffmodel(ff_fit):
    return ff_fit[0]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
