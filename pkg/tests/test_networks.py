import math

import numpy as np
import pytest
import torch
from scipy import stats

from dgc.networks import (
    FL,
    PRESETS,
    Conv,
    DGCModel,
    ModelSpec,
    NetworkSpec,
    ShapeError,
    TaskHeadBank,
    get_preset,
)
from dgc.responses import (
    CategoricalResponse,
    GaussianResponse,
    params_per_component,
    response_from_output,
)

from conftest import tiny_spec


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_build_and_run(name):
    spec = get_preset(name, 3)
    model = DGCModel(spec)
    x = torch.rand(2, *spec.input_shape)
    q = model.encode(x)
    assert q.mean.shape == (2, spec.latent_dim)
    assert model.decode(q.mean).shape == x.shape
    assert model.task(q.mean).shape[-2] == 3


def test_unknown_preset():
    with pytest.raises(KeyError, match="unknown model preset"):
        get_preset("resnet")


def test_layer_chain_mismatch_is_rejected():
    with pytest.raises(ShapeError):
        NetworkSpec((FL(3, 4), FL(5, 2))).validate()


def test_model_spec_shape_checks():
    spec = tiny_spec()
    with pytest.raises(ShapeError):
        ModelSpec(**{**spec.to_dict(), "n_clusters": 0})
    with pytest.raises(ShapeError):
        ModelSpec(**{**spec.to_dict(), "reconstruction": "poisson"})
    with pytest.raises(ShapeError):
        ModelSpec(**{**spec.to_dict(), "reconstruction_scale": 0.0})
    with pytest.raises(ShapeError, match="task head"):
        ModelSpec(**{**spec.to_dict(), "response_size": 3})


def test_spec_round_trips_through_dict():
    spec = get_preset("mnist-mlp")
    assert ModelSpec.from_dict(spec.to_dict()) == spec


def test_wrong_input_shape():
    model = DGCModel(tiny_spec())
    with pytest.raises(ShapeError):
        model.encode(torch.zeros(2, 4))
    with pytest.raises(ShapeError):
        model.decode(torch.zeros(2, 3))


def test_conv_heads_not_allowed_for_tasks():
    with pytest.raises(ShapeError):
        TaskHeadBank(NetworkSpec((Conv(1, 2, 3),)), 2)


def test_task_heads_are_independent():
    bank = TaskHeadBank(NetworkSpec((FL(2, 4, "relu"), FL(4, 3))), 3)
    z = torch.randn(5, 2)
    out = bank(z)
    for k in range(3):
        h = torch.relu(z @ bank.weights[0][k] + bank.biases[0][k])
        torch.testing.assert_close(out[:, k], h @ bank.weights[1][k] + bank.biases[1][k])


def test_shared_trunk_splits_only_last_layer():
    bank = TaskHeadBank(NetworkSpec((FL(2, 4, "sigmoid"), FL(4, 1))), 3, shared_trunk=True)
    assert bank.weights[0].shape[0] == 1 and bank.weights[1].shape[0] == 3
    assert bank(torch.randn(6, 2)).shape == (6, 3, 1)


def test_gaussian_reconstruction_density():
    spec = ModelSpec(**{**tiny_spec().to_dict(), "reconstruction_scale": 0.3})
    model = DGCModel(spec)
    x, mu = torch.randn(4, 3), torch.randn(4, 3)
    want = stats.norm(mu.numpy(), 0.3).logpdf(x.numpy()).sum(-1)
    np.testing.assert_allclose(model.reconstruction_log_prob(x, mu).numpy(), want, rtol=1e-5)


def test_bernoulli_reconstruction_density():
    model = DGCModel(get_preset("mnist-mlp", 2))
    x = (torch.rand(2, 784) > 0.5).float()
    logits = torch.randn(2, 784)
    p = torch.sigmoid(logits)
    want = (x * p.log() + (1 - x) * (1 - p).log()).sum(-1)
    torch.testing.assert_close(model.reconstruction_log_prob(x, logits), want, rtol=1e-4, atol=1e-3)


def test_generate_shapes_and_reproducibility():
    model = DGCModel(tiny_spec(k=3))
    a = model.generate(50, torch.Generator().manual_seed(3), sample_x=True)
    b = model.generate(50, torch.Generator().manual_seed(3), sample_x=True)
    for key in a:
        torch.testing.assert_close(a[key], b[key], rtol=0, atol=0)
    assert a["x"].shape == (50, 3) and a["y"].shape == (50, 1)
    assert set(a["c"].tolist()) <= {0, 1, 2}
    with pytest.raises(ValueError):
        model.generate(0)


def test_prior_init_scale_controls_mean_spread():
    near = DGCModel(ModelSpec(**{**tiny_spec().to_dict(), "prior_init_scale": 0.0}))
    assert torch.all(near.prior.means == 0)


def test_params_per_component():
    assert params_per_component("categorical", 2) == 1
    assert params_per_component("categorical", 5) == 5
    assert params_per_component("gaussian", 3) == 6
    with pytest.raises(ValueError):
        params_per_component("categorical", 1)
    with pytest.raises(ValueError):
        params_per_component("poisson", 1)


def test_binary_response_uses_one_logit():
    r = response_from_output(torch.tensor([[[2.0]]]), "categorical", 2)
    np.testing.assert_allclose(r.probs[0, 0].numpy(), [1 / (1 + math.e ** 2), 1 / (1 + math.e ** -2)], rtol=1e-6)


def test_response_log_probs():
    logits = torch.randn(4, 2, 3)
    y = torch.tensor([0, 2, 1, 1])
    got = CategoricalResponse(logits).log_prob(y)
    want = torch.log_softmax(logits, -1)[torch.arange(4), :, y]
    torch.testing.assert_close(got, want)
    loc, lv = torch.randn(4, 2, 1), torch.randn(4, 2, 1)
    yv = torch.randn(4)
    got = GaussianResponse(loc, lv).log_prob(yv)
    want = stats.norm(loc[..., 0].numpy(), np.exp(0.5 * lv[..., 0].numpy())).logpdf(yv.numpy()[:, None])
    np.testing.assert_allclose(got.numpy(), want, rtol=1e-5)


def test_response_select_and_sample():
    r = GaussianResponse(torch.arange(6.0).reshape(3, 2, 1), torch.full((3, 2, 1), -40.0))
    sel = r.select(torch.tensor([1, 0, 1]))
    assert sel.loc.flatten().tolist() == [1.0, 2.0, 5.0]
    torch.testing.assert_close(sel.sample(torch.Generator().manual_seed(0)), sel.loc, atol=1e-4, rtol=0)
    cat = CategoricalResponse(torch.tensor([[[50.0, 0.0], [0.0, 50.0]]]))
    assert cat.select(torch.tensor([1])).sample().item() == 1
