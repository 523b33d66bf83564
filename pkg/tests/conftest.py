import pytest

from fusionfraud import data
from fusionfraud.model import ModelDims


@pytest.fixture(scope="session")
def tiny_dims():
    """Down-scaled architecture used wherever full width is irrelevant."""
    return ModelDims(feature_dim=96, embed_hidden=16, video_out=8, audio_out=4,
                     head_hidden=16, dropout_p=0.2)


@pytest.fixture(scope="session")
def small_dataset():
    """60-record synthetic set, enough for split/format tests."""
    return data.generate_synthetic(data.SynthConfig(n_total=60, n_fraud=25, seed=9))


@pytest.fixture(scope="session")
def default_dataset():
    """The full default 820-record dataset (shared; treated as read-only)."""
    return data.generate_synthetic(data.SynthConfig(seed=1))
