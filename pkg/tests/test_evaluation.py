import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dgc.datasets import TaskData
from dgc.evaluation import (
    ConfusionMatrix,
    assign_clusters,
    cluster_accuracy,
    cluster_mapping,
    cluster_posterior,
    confusion,
    contingency,
    evaluate,
    predict_responses,
    read_report,
    write_report,
)
from dgc.mixture import MixturePrior
from dgc.networks import DGCModel

from conftest import tiny_spec


def brute_force_accuracy(pred, truth):
    k = max(pred.max(), truth.max()) + 1
    return max(np.mean(np.array(perm)[pred] == truth) for perm in itertools.permutations(range(k)))


labels = st.integers(1, 12).flatmap(
    lambda n: st.tuples(arrays(np.int64, n, elements=st.integers(0, 3)),
                        arrays(np.int64, n, elements=st.integers(0, 3))))


@given(labels)
def test_accuracy_matches_brute_force(pair):
    pred, truth = pair
    assert cluster_accuracy(pred, truth) == pytest.approx(brute_force_accuracy(pred, truth), abs=1e-12)


@given(labels)
def test_accuracy_is_permutation_invariant(pair):
    pred, truth = pair
    perm = np.array([2, 0, 3, 1])
    assert cluster_accuracy(perm[pred], truth) == pytest.approx(cluster_accuracy(pred, truth))


@given(labels)
def test_many_to_one_dominates(pair):
    pred, truth = pair
    assert cluster_accuracy(pred, truth, many_to_one=True) >= cluster_accuracy(pred, truth) - 1e-12


def test_accuracy_examples():
    assert cluster_accuracy([1, 1, 0, 0], [0, 0, 1, 1]) == 1.0
    assert cluster_accuracy([0, 0, 0, 0], [0, 0, 1, 1]) == 0.5
    # four clusters onto two labels: one-to-one can only credit two of them
    assert cluster_accuracy([0, 1, 2, 3], [0, 0, 1, 1]) == 0.5
    assert cluster_accuracy([0, 1, 2, 3], [0, 0, 1, 1], many_to_one=True) == 1.0
    with pytest.raises(ValueError):
        cluster_accuracy([], [])
    with pytest.raises(ValueError):
        cluster_accuracy([0, 1], [0])


def test_contingency_and_mapping():
    grid = contingency([0, 0, 1, 2], [1, 1, 0, 0], n_true=3)
    assert grid.tolist() == [[0, 2, 0], [1, 0, 0], [1, 0, 0]]
    mapping = cluster_mapping([0, 0, 1, 2], [1, 1, 0, 0])
    assert mapping[0] == 1 and len(mapping) == 2


def test_confusion_relabels_rows():
    cm = confusion([1, 1, 0, 0, 2], [0, 0, 1, 1, 1], ["a", "b"])
    assert cm.row_labels == ["a", "b", "c2"]
    assert cm.counts.tolist() == [[2, 0], [0, 2], [0, 1]]
    assert ConfusionMatrix.from_dict(cm.to_dict()).counts.tolist() == cm.counts.tolist()
    empty = confusion([0, 0], [0, 0], ["a", "b"])
    assert empty.row_labels == ["a", "b"] and empty.counts.shape == (2, 2)


def fixed_model():
    """Two clusters with opposite Gaussian response heads y = +-z."""
    torch.manual_seed(0)
    model = DGCModel(tiny_spec(d_in=2, latent=2, k=2)).double()
    with torch.no_grad():
        model.prior.means.zero_()
    return model


def test_posterior_modes_are_distributions():
    model = fixed_model()
    x = np.random.default_rng(0).normal(size=(10, 2))
    y = np.random.default_rng(1).normal(size=10)
    for mode in ("labeled", "unlabeled", "prior"):
        post = cluster_posterior(model, x, y if mode == "labeled" else None, mode=mode)
        assert post.shape == (10, 2)
        np.testing.assert_allclose(post.sum(-1), 1.0)
    with pytest.raises(ValueError):
        cluster_posterior(model, x, mode="labeled")
    with pytest.raises(ValueError):
        cluster_posterior(model, x, mode="oracle")
    assert np.array_equal(assign_clusters(model, x, y), cluster_posterior(model, x, y, mode="labeled").argmax(-1))


def test_identical_components_give_uniform_posterior():
    model = fixed_model()
    with torch.no_grad():
        for w, b in zip(model.task.weights, model.task.biases):
            w.copy_(w[:1].expand_as(w))
            b.copy_(b[:1].expand_as(b))
    x = np.random.default_rng(0).normal(size=(5, 2))
    np.testing.assert_allclose(cluster_posterior(model, x, np.zeros(5), mode="labeled"), 0.5)
    assert assign_clusters(model, x, np.zeros(5)).tolist() == [0] * 5  # ties go to the lowest index


def test_evaluate_report_round_trip(tmp_path):
    model = fixed_model()
    rng = np.random.default_rng(0)
    data = TaskData(rng.normal(size=(12, 2)), rng.normal(size=12), rng.integers(0, 2, 12), ("a", "b"))
    for hide in (False, True):
        report = evaluate(model, data, hide_labels=hide)
        assert report["mode"] == ("unlabeled" if hide else "labeled")
        assert 0.5 <= report["cluster_accuracy"] <= 1
        assert report["response_mse"] >= 0
    write_report(report, tmp_path / "r.json")
    assert read_report(tmp_path / "r.json") == report


def test_predictions_are_posterior_weighted():
    model = fixed_model()
    x = np.random.default_rng(0).normal(size=(4, 2))
    pred = predict_responses(model, x)
    z = model.encode(torch.as_tensor(x)).mean
    resp = model.task_forward(z)
    lo, hi = resp.mean()[..., 0].min(-1).values, resp.mean()[..., 0].max(-1).values
    assert np.all(pred[:, 0] >= lo.detach().numpy() - 1e-12) and np.all(pred[:, 0] <= hi.detach().numpy() + 1e-12)


def test_categorical_report_has_classification_accuracy():
    torch.manual_seed(0)
    model = DGCModel(tiny_spec(response="categorical", size=2)).double()
    rng = np.random.default_rng(0)
    data = TaskData(rng.normal(size=(9, 3)), rng.integers(0, 2, 9), rng.integers(0, 2, 9))
    report = evaluate(model, data)
    assert 0 <= report["classification_accuracy"] <= 1
    assert "response_mse" not in report
