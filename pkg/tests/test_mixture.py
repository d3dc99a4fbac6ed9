import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats
from scipy.special import softmax

from dgc.mixture import (
    DiagonalGaussian,
    DimensionError,
    MixturePrior,
    categorical_entropy,
    convex_oracle,
    gaussian_entropy,
    h_max,
    kl_categorical,
    kl_diag_gaussians,
    log_component_density,
    log_marginal,
    optimal_q,
    optimal_q_regularized,
    responsibilities,
    simplex_objective,
    test_q as label_free_q,
)
from dgc.responses import CategoricalResponse, GaussianResponse

finite = st.floats(-30, 30, allow_nan=False)


def two_component_prior():
    return MixturePrior.from_params(np.array([0.3, 0.7]), np.array([[0.0, 0.0], [2.0, 1.0]]),
                                    np.array([[1.0, 1.0], [0.5, 2.0]]))


def test_component_density_matches_scipy():
    prior = two_component_prior()
    z = torch.tensor([[0.5, -1.0], [2.0, 2.0]], dtype=torch.float64)
    got = log_component_density(z, prior).detach().numpy()
    for k in range(2):
        mvn = stats.multivariate_normal(prior.means[k].detach().numpy().astype(np.float64),
                                        np.diag(prior.variances[k].detach().numpy().astype(np.float64)))
        np.testing.assert_allclose(got[:, k], mvn.logpdf(z.numpy()), rtol=1e-12)


def test_marginal_and_responsibilities_agree_with_bayes_rule():
    prior = two_component_prior()
    z = torch.tensor([[0.3, 0.2]], dtype=torch.float64)
    dens = log_component_density(z, prior).exp()[0]
    joint = prior.weights.detach() * dens.detach()
    np.testing.assert_allclose(log_marginal(z, prior).exp().item(), joint.sum().item(), rtol=1e-12)
    np.testing.assert_allclose(responsibilities(z, prior)[0].detach().numpy(), (joint / joint.sum()).detach().numpy(), rtol=1e-12)


def test_dimension_mismatch_raises():
    with pytest.raises(DimensionError):
        log_component_density(torch.zeros(4, 3), two_component_prior())


def test_from_params_validates():
    with pytest.raises(ValueError):
        MixturePrior.from_params([0.5, 0.5], [[0.0], [1.0]], [[1.0], [-1.0]])
    with pytest.raises(ValueError):
        MixturePrior.from_params([0.5, 0.6], [[0.0], [1.0]], [[1.0], [1.0]])


def test_single_component_responsibility_is_one():
    prior = MixturePrior(1, 3)
    np.testing.assert_array_equal(responsibilities(torch.randn(5, 3), prior).detach().numpy(), 1.0)


def test_kl_diag_gaussians_closed_form():
    q = DiagonalGaussian(torch.tensor([0.3, -1.0]), torch.tensor([0.2, -0.5]))
    p = DiagonalGaussian(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 0.4]))
    want = 0.0
    for i in range(2):
        vq, vp = math.exp(q.log_var[i]), math.exp(p.log_var[i])
        want += 0.5 * (math.log(vp / vq) + (vq + (q.mean[i] - p.mean[i]) ** 2) / vp - 1)
    assert kl_diag_gaussians(q, p).item() == pytest.approx(want, rel=1e-6)
    assert kl_diag_gaussians(q, q).item() == 0.0


def test_kl_categorical_handles_zeros():
    assert kl_categorical(torch.tensor([1.0, 0.0]), torch.tensor([0.5, 0.5])).item() == pytest.approx(math.log(2))
    assert math.isinf(kl_categorical(torch.tensor([0.5, 0.5]), torch.tensor([1.0, 0.0])).item())


def test_entropies():
    lv = torch.tensor([0.3, -2.0])
    want = sum(stats.norm(scale=math.exp(0.5 * v)).entropy() for v in lv.tolist())
    assert gaussian_entropy(lv).item() == pytest.approx(want, rel=1e-6)
    assert categorical_entropy(torch.tensor([1.0, 0.0])).item() == 0.0
    narrow = GaussianResponse(torch.zeros(3, 1), torch.full((3, 1), -10.0))
    assert torch.all(h_max(narrow) == 0)
    wide = CategoricalResponse(torch.zeros(2, 4))
    np.testing.assert_allclose(h_max(wide), math.log(4), rtol=1e-6)


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 6)), elements=finite),
       arrays(np.float64, 6, elements=st.floats(0.01, 1.0)))
def test_posteriors_are_distributions(loglik, weights):
    k = loglik.shape[1]
    resp = torch.tensor(np.broadcast_to(weights[:k] / weights[:k].sum(), loglik.shape).copy())
    ent = torch.tensor(np.abs(loglik) % 3)
    for q in (optimal_q(torch.tensor(loglik), resp), optimal_q_regularized(torch.tensor(loglik), ent, resp),
              label_free_q(ent, resp)):
        assert torch.all(q >= 0)
        np.testing.assert_allclose(q.sum(-1).numpy(), 1.0, rtol=1e-12)


@given(arrays(np.float64, 5, elements=finite), st.floats(-50, 50))
def test_optimal_q_is_shift_invariant(loglik, shift):
    resp = torch.full((5,), 0.2, dtype=torch.float64)
    a = optimal_q(torch.tensor(loglik), resp)
    b = optimal_q(torch.tensor(loglik + shift), resp)
    np.testing.assert_allclose(a.numpy(), b.numpy(), atol=1e-12)


def test_zero_entropy_regularized_equals_plain():
    loglik = torch.randn(7, 3, dtype=torch.float64)
    resp = torch.softmax(torch.randn(7, 3, dtype=torch.float64), -1)
    np.testing.assert_allclose(optimal_q_regularized(loglik, torch.zeros(7, 3), resp),
                               optimal_q(loglik, resp), atol=0)


def test_equal_loglik_returns_responsibilities():
    resp = torch.tensor([0.1, 0.6, 0.3], dtype=torch.float64)
    np.testing.assert_allclose(optimal_q(torch.full((3,), -2.0), resp).numpy(), resp.numpy(), rtol=1e-12)
    np.testing.assert_allclose(label_free_q(torch.zeros(3), resp).numpy(), resp.numpy(), rtol=1e-12)


@pytest.mark.parametrize("call", [
    lambda: optimal_q(torch.zeros(2), torch.zeros(2)),
    lambda: optimal_q(torch.tensor([0.0, math.inf]), torch.tensor([0.5, 0.5])),
    lambda: optimal_q_regularized(torch.zeros(2), torch.tensor([0.1, -0.1]), torch.tensor([0.5, 0.5])),
    lambda: label_free_q(torch.tensor([-1.0, 0.0]), torch.tensor([0.5, 0.5])),
])
def test_posterior_errors(call):
    with pytest.raises(ValueError):
        call()


def test_oracle_matches_softmax_and_is_optimal(rng):
    lp = np.log(softmax(rng.normal(size=(50, 4)), -1))
    lin = rng.normal(scale=3, size=(50, 4))
    t = convex_oracle(lp, lin)
    np.testing.assert_allclose(t, softmax(lp + lin, -1), atol=1e-8)
    # any other simplex point scores worse
    other = softmax(rng.normal(size=(50, 4)), -1)
    assert np.all(simplex_objective(t, lp, lin) <= simplex_objective(other, lp, lin) + 1e-12)


def test_oracle_single_component():
    np.testing.assert_array_equal(convex_oracle(np.zeros((3, 1)), np.ones((3, 1))), np.ones((3, 1)))
