import json
from pathlib import Path

import numpy as np
import pytest

from mvscale.core import AssumptionParams, Ensemble, ModelSpec
from mvscale.models import linear_benchmark_model, zero_model

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture
def rng():
    return np.random.default_rng(20240531)


@pytest.fixture
def linear_model():
    return linear_benchmark_model(a=1.0, c=1.0, k=1.0, s=1.0)


@pytest.fixture
def zero():
    return zero_model(1, 1)


@pytest.fixture
def make_model():
    """Scalar model from plain callables; the laws are ignored unless the callables use them."""

    def build(b=None, sigma=None, f=None, g=None, *, sigma_depends_on_y=True, assumptions=None, name="custom"):
        b = b or (lambda x, mu, y, nu: np.zeros_like(x))
        sigma = sigma or (lambda x, mu, y, nu: np.zeros((1, 1)))
        f = f or (lambda mu, y, nu: np.zeros_like(y))
        g = g or (lambda mu, y, nu: np.zeros((1, 1)))
        return ModelSpec(
            name=name,
            n=1,
            m=1,
            d1=1,
            d2=1,
            b=b,
            sigma=sigma,
            f=f,
            g=g,
            assumptions=assumptions or AssumptionParams(),
            sigma_depends_on_y=sigma_depends_on_y,
        )

    return build


@pytest.fixture
def dirac():
    def build(value, count=1):
        return Ensemble.dirac(value, count)

    return build


@pytest.fixture
def write_config(tmp_path):
    """Write a config dict as JSON and return its path."""

    def write(payload, name="config.json"):
        path = tmp_path / name
        path.write_text(json.dumps(payload))
        return path

    return write


@pytest.fixture
def load_example():
    def load(name):
        return json.loads((CONFIG_DIR / name).read_text())

    return load
