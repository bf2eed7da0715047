import warnings

import numpy as np
import pytest

from fqbert.model import ModelConfig
from fqbert.store import build_quant_model, calibrate
from fqbert.synth import synthetic_tokens, synthetic_weights


def make_toy(seed=0, **kw):
    """Synthetic float weights, calibrated specs and the quantized model."""
    mc = ModelConfig.toy(**kw)
    fw = synthetic_weights(mc, seed)
    specs = calibrate(fw, synthetic_tokens(mc, 4, seed + 1))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        qm = build_quant_model(fw, specs)
    return fw, specs, qm


@pytest.fixture(scope="session")
def toy():
    return make_toy()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
