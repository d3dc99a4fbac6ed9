"""Cluster assignment, clustering/classification accuracy and confusion matrices."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from scipy.special import entr

from .mixture import h_max, log_responsibilities, optimal_q, test_q
from .networks import DGCModel

MODES = ("labeled", "unlabeled", "prior")


def _as_tensor(x, model: DGCModel) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    return torch.as_tensor(np.asarray(x), dtype=dtype)


@torch.no_grad()
def cluster_posterior(model: DGCModel, x, y=None, *, mode: str = "unlabeled",
                      batch_size: int = 4096) -> np.ndarray:
    """Posterior over clusters at the encoder mean.

    ``labeled`` uses the responses (closed-form q(c|x)), ``unlabeled`` the
    entropy-weighted label-free posterior, ``prior`` plain p(c|z).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if mode == "labeled" and y is None:
        raise ValueError("labeled assignment needs responses y")
    was_training = model.training
    model.eval()
    out = []
    try:
        for start in range(0, len(x), batch_size):
            xb = _as_tensor(x[start:start + batch_size], model)
            z = model.encode(xb).mean
            log_resp = log_responsibilities(z, model.prior)
            if mode == "prior":
                post = log_resp.exp()
            elif mode == "unlabeled":
                post = test_q(h_max(model.task_forward(z)), log_resp=log_resp)
            else:
                yb = torch.as_tensor(np.asarray(y[start:start + batch_size]))
                if yb.is_floating_point():
                    yb = yb.to(z.dtype)
                post = optimal_q(model.task_forward(z).log_prob(yb), log_resp=log_resp)
            out.append(post.numpy())
    finally:
        model.train(was_training)
    k = model.n_clusters
    return np.concatenate(out) if out else np.empty((0, k))


def assign_clusters(model: DGCModel, x, y=None, *, mode: Optional[str] = None) -> np.ndarray:
    """Argmax cluster per input (lowest index wins ties).

    Without an explicit ``mode``: labeled when y is given, else unlabeled.
    """
    mode = mode or ("labeled" if y is not None else "unlabeled")
    return np.argmax(cluster_posterior(model, x, y, mode=mode), axis=-1)


def contingency(pred, truth, n_pred: Optional[int] = None, n_true: Optional[int] = None) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ValueError("pred and truth must have equal length")
    n_pred = max(n_pred or 0, int(pred.max(initial=-1)) + 1)
    n_true = max(n_true or 0, int(truth.max(initial=-1)) + 1)
    grid = np.zeros((n_pred, n_true), dtype=np.int64)
    np.add.at(grid, (pred, truth), 1)
    return grid


def cluster_mapping(pred, truth, *, many_to_one: bool = False) -> dict:
    """Predicted cluster -> true label map maximising agreement.

    One-to-one uses an optimal assignment on the contingency table;
    many-to-one sends every predicted cluster to its majority label.
    """
    grid = contingency(pred, truth)
    if many_to_one:
        return {p: int(np.argmax(grid[p])) for p in range(grid.shape[0]) if grid[p].sum()}
    rows, cols = linear_sum_assignment(-grid)
    return {int(r): int(c) for r, c in zip(rows, cols)}


def cluster_accuracy(pred, truth, *, many_to_one: bool = False) -> float:
    """Fraction of samples correct under the best label matching."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if len(pred) == 0:
        raise ValueError("cluster_accuracy of an empty assignment")
    if pred.shape != truth.shape:
        raise ValueError("pred and truth must have equal length")
    grid = contingency(pred, truth)
    mapping = cluster_mapping(pred, truth, many_to_one=many_to_one)
    return sum(int(grid[p, t]) for p, t in mapping.items()) / len(pred)


@dataclass
class ConfusionMatrix:
    """Rows are predicted clusters (after relabelling), columns true clusters."""

    counts: np.ndarray
    row_labels: list
    col_labels: list

    def to_dict(self) -> dict:
        return {"rows": list(self.row_labels), "cols": list(self.col_labels),
                "counts": self.counts.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ConfusionMatrix":
        return cls(np.asarray(d["counts"], dtype=np.int64), list(d["rows"]), list(d["cols"]))


def confusion(pred, truth, label_names: Optional[Sequence[str]] = None) -> ConfusionMatrix:
    """Confusion matrix with predicted clusters relabelled by optimal matching.

    Matched predicted clusters take the row of their true label; unmatched
    ones are appended below, labelled ``c<index>``.
    """
    grid = contingency(pred, truth)
    n_pred, n_true = grid.shape
    names = list(label_names) if label_names is not None else [str(i) for i in range(n_true)]
    if len(names) < n_true:
        raise ValueError("fewer label names than true labels")
    n_true = len(names)
    grid = contingency(pred, truth, n_true=n_true)
    mapping = cluster_mapping(pred, truth)
    inverse = {t: p for p, t in mapping.items()}
    order, rows = [], []
    for t in range(n_true):
        if t in inverse:
            order.append(inverse[t])
            rows.append(names[t])
    for p in range(n_pred):
        if p not in mapping:
            order.append(p)
            rows.append(f"c{p}")
    counts = grid[order] if order else np.zeros((0, n_true), dtype=np.int64)
    # true labels nobody was matched to get an empty row so the grid stays square-ish
    missing = [t for t in range(n_true) if t not in inverse]
    if missing and len(order) < n_true:
        counts = np.vstack([counts, np.zeros((len(missing), n_true), dtype=np.int64)])
        rows += [names[t] for t in missing]
    return ConfusionMatrix(counts, rows, names)


@torch.no_grad()
def predict_responses(model: DGCModel, x, *, batch_size: int = 4096) -> np.ndarray:
    """Posterior-weighted ensemble prediction sum_k q_test(k|x) p(y|z,k).

    Categorical: class probabilities [N, C]. Gaussian: predictive means [N, D].
    """
    was_training = model.training
    model.eval()
    out = []
    try:
        for start in range(0, len(x), batch_size):
            z = model.encode(_as_tensor(x[start:start + batch_size], model)).mean
            response = model.task_forward(z)
            w = test_q(h_max(response), log_resp=log_responsibilities(z, model.prior))
            out.append((w.unsqueeze(-1) * response.mean()).sum(-2).numpy())
    finally:
        model.train(was_training)
    return np.concatenate(out)


def classification_accuracy(model: DGCModel, x, y_true) -> float:
    if model.spec.response_kind != "categorical":
        raise ValueError("classification accuracy needs a categorical response")
    pred = np.argmax(predict_responses(model, x), axis=-1)
    return float(np.mean(pred == np.asarray(y_true)))


def mean_posterior_entropy(post: np.ndarray) -> float:
    return float(np.mean(entr(post).sum(axis=-1)))


def evaluate(model: DGCModel, data, *, hide_labels: bool = False,
             assignment: Optional[str] = None) -> dict:
    """Metrics for one dataset split as a flat report plus a confusion grid."""
    mode = assignment or ("unlabeled" if hide_labels else "labeled")
    post = cluster_posterior(model, data.x, None if mode != "labeled" else data.y, mode=mode)
    pred = np.argmax(post, axis=-1)
    report = {"mode": mode, "n_samples": int(len(data)), "n_clusters": model.n_clusters,
              "mean_posterior_entropy": mean_posterior_entropy(post),
              "clusters_used": int(len(np.unique(pred)))}
    if data.cluster is not None:
        report["cluster_accuracy"] = cluster_accuracy(pred, data.cluster)
        report["cluster_accuracy_many_to_one"] = cluster_accuracy(pred, data.cluster, many_to_one=True)
        names = list(data.cluster_names) or None
        report["confusion"] = confusion(pred, data.cluster, names).to_dict()
    if model.spec.response_kind == "categorical":
        report["classification_accuracy"] = classification_accuracy(model, data.x, data.y)
    else:
        mse = np.mean((predict_responses(model, data.x).reshape(len(data), -1)
                       - np.asarray(data.y).reshape(len(data), -1)) ** 2)
        report["response_mse"] = float(mse)
    return report


def write_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def read_report(path) -> dict:
    return json.loads(Path(path).read_text())
