import numpy as np
import pytest

from app.schemas import Coupling, ExperimentConfig, LatticeModel, ProtocolConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def single_model():
    return LatticeModel(num_modes=1, omega=[0.7], xi=[0.3])


@pytest.fixture
def pair_model():
    return LatticeModel(
        num_modes=2,
        omega=[0.3, 0.5],
        xi=[0.2, 0.4],
        couplings=[Coupling(i=0, j=1, re=0.2, im=0.1)],
    )


@pytest.fixture
def fast_protocol():
    """Coarse epsilon and the CLT shot model keep end-to-end runs to seconds."""
    return ProtocolConfig(epsilon=0.05, shot_sampling="clt")


@pytest.fixture
def single_config():
    return ExperimentConfig.model_validate(
        {
            "model": {"kind": "explicit", "num_modes": 1, "omega": [0.7], "xi": [0.3]},
            "protocol": {"epsilon": 0.1, "shot_sampling": "clt"},
            "campaign": {"trials": 2, "seed": 3},
        }
    )
