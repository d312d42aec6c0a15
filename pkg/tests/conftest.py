import numpy as np
import pytest

from inpaintvad.model import ModelHyper, init_params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_hyper():
    return ModelHyper(height=6, width=5, channels=1, hidden=3, context_length=2, n_bins=4,
                      meta_hidden=4, decoder_layers=2, precision="float64")


@pytest.fixture
def tiny_params(tiny_hyper):
    params = init_params(tiny_hyper, 7)
    # non-zero head and biases so every path carries gradient
    r = np.random.default_rng(3)
    for name, t in params:
        if name.startswith("head") or name.endswith("bias"):
            t.data = r.normal(0, 0.3, t.shape)
    return params
