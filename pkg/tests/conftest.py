import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from dgc.networks import FL, ModelSpec, NetworkSpec

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def tiny_spec(*, d_in=3, latent=2, k=2, response="gaussian", size=1, hidden=5,
              reconstruction="gaussian") -> ModelSpec:
    """A few-parameter model used across the unit tests."""
    from dgc.responses import params_per_component
    return ModelSpec(
        name="tiny",
        input_shape=(d_in,),
        encoder=NetworkSpec((FL(d_in, hidden, "sigmoid"), FL(hidden, latent))),
        decoder=NetworkSpec((FL(latent, hidden, "sigmoid"), FL(hidden, d_in))),
        task=NetworkSpec((FL(latent, hidden, "sigmoid"),
                          FL(hidden, params_per_component(response, size)))),
        reconstruction=reconstruction,
        response_kind=response,
        response_size=size,
        n_clusters=k,
        prior_init_scale=1.0,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


ACCEPTANCE_RESULTS = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    """Remember one acceptance outcome; printed in the terminal summary."""
    ACCEPTANCE_RESULTS[number] = (passed, detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        passed, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
