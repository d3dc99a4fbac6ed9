"""Closed-form probabilistic math for a Gaussian-mixture latent prior.

Everything here is a pure function of its inputs and works on batched torch
tensors: the component axis is always the last one for posteriors and the
latent axis is always the last one for codes. All densities stay in log
space; posteriors are normalised with log-sum-exp.
"""

from __future__ import annotations

import math
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

LOG_2PI = math.log(2.0 * math.pi)
LOG_VAR_MIN, LOG_VAR_MAX = -20.0, 20.0


class DimensionError(ValueError):
    """Latent dimension of an input does not match the prior."""

    def __init__(self, expected: int, actual: int, what: str = "z"):
        super().__init__(f"{what} has dimension {actual}, expected {expected}")
        self.expected = expected
        self.actual = actual


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, grad_norm: float):
        super().__init__(f"{message} (final projected-gradient norm {grad_norm:.3e})")
        self.grad_norm = grad_norm


class DiagonalGaussian(NamedTuple):
    """Mean and log-variance of an axis-aligned Gaussian (batched)."""

    mean: torch.Tensor
    log_var: torch.Tensor

    @property
    def variance(self) -> torch.Tensor:
        return self.log_var.exp()


class MixturePrior(nn.Module):
    """p(z) = sum_k pi_k N(z; mu_k, diag(sigma_k^2)).

    Weights are a softmax over free logits and variances are stored as
    log-variances, so every parameter setting is valid.
    """

    def __init__(self, n_components: int, dim: int, *, init_scale: float = 1.0,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        if n_components < 1 or dim < 1:
            raise ValueError("need at least one component and one latent dimension")
        self.logits = nn.Parameter(torch.zeros(n_components))
        means = torch.randn(n_components, dim, generator=generator) * init_scale
        self.means = nn.Parameter(means)
        self.log_vars = nn.Parameter(torch.zeros(n_components, dim))

    @classmethod
    def from_params(cls, weights, means, variances) -> "MixturePrior":
        weights = torch.as_tensor(weights)
        means = torch.as_tensor(means)
        variances = torch.as_tensor(variances)
        dtype = means.dtype if means.is_floating_point() else torch.get_default_dtype()
        weights, means, variances = (t.to(dtype) for t in (weights, means, variances))
        if means.ndim != 2 or variances.shape != means.shape or weights.shape != means.shape[:1]:
            raise ValueError(
                f"inconsistent shapes: weights {tuple(weights.shape)}, "
                f"means {tuple(means.shape)}, variances {tuple(variances.shape)}"
            )
        if not torch.all(variances > 0):
            raise ValueError("variances must be strictly positive")
        if torch.any(weights <= 0) or abs(float(weights.sum()) - 1.0) > 1e-6:
            raise ValueError("weights must be positive and sum to one")
        prior = cls(means.shape[0], means.shape[1])
        with torch.no_grad():
            prior.logits.data = weights.log()
            prior.means.data = means.clone()
            prior.log_vars.data = variances.log()
        return prior

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def log_weights(self) -> torch.Tensor:
        return F.log_softmax(self.logits, dim=-1)

    @property
    def weights(self) -> torch.Tensor:
        return self.log_weights.exp()

    @property
    def variances(self) -> torch.Tensor:
        return self.log_vars.exp()

    def component(self, k: int) -> DiagonalGaussian:
        return DiagonalGaussian(self.means[k], self.log_vars[k])

    def extra_repr(self) -> str:
        return f"n_components={self.n_components}, dim={self.dim}"


def log_normal(z: torch.Tensor, mean: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    """log N(z; mean, diag(exp(log_var))), summed over the last axis."""
    return -0.5 * (LOG_2PI + log_var + (z - mean) ** 2 * torch.exp(-log_var)).sum(-1)


def _check_dim(z: torch.Tensor, prior: MixturePrior) -> None:
    if z.shape[-1] != prior.dim:
        raise DimensionError(prior.dim, z.shape[-1])


def log_component_density(z: torch.Tensor, prior: MixturePrior,
                          k: Optional[int] = None) -> torch.Tensor:
    """log N(z; mu_k, sigma_k^2) for one component, or all of them along a new last axis."""
    _check_dim(z, prior)
    if k is not None:
        if not 0 <= k < prior.n_components:
            raise IndexError(f"component {k} out of range for K={prior.n_components}")
        return log_normal(z, prior.means[k], prior.log_vars[k])
    return log_normal(z.unsqueeze(-2), prior.means, prior.log_vars)


def log_joint(z: torch.Tensor, prior: MixturePrior) -> torch.Tensor:
    """log pi_k + log p(z|c=k), shape [..., K]."""
    return prior.log_weights + log_component_density(z, prior)


def log_marginal(z: torch.Tensor, prior: MixturePrior) -> torch.Tensor:
    """log p(z) under the mixture."""
    return torch.logsumexp(log_joint(z, prior), dim=-1)


def log_responsibilities(z: torch.Tensor, prior: MixturePrior) -> torch.Tensor:
    return F.log_softmax(log_joint(z, prior), dim=-1)


def responsibilities(z: torch.Tensor, prior: MixturePrior) -> torch.Tensor:
    """Exact component posterior p(c|z)."""
    return log_responsibilities(z, prior).exp()


def kl_diag_gaussians(q: DiagonalGaussian, p: DiagonalGaussian) -> torch.Tensor:
    """KL(q || p) for diagonal Gaussians, summed over the last axis (broadcasts)."""
    if q.mean.shape[-1] != p.mean.shape[-1]:
        raise DimensionError(p.mean.shape[-1], q.mean.shape[-1], what="q")
    ratio = torch.exp(q.log_var - p.log_var)
    sq = (q.mean - p.mean) ** 2 * torch.exp(-p.log_var)
    return 0.5 * (ratio + sq - 1.0 - (q.log_var - p.log_var)).sum(-1).clamp_min(0.0)


def kl_categorical(q: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    """KL(q || p) over the last axis with 0 log 0 = 0.

    Returns +inf (never NaN) where p has a zero that q does not.
    """
    q = torch.as_tensor(q)
    p = torch.as_tensor(p, dtype=q.dtype)
    pos = q > 0
    ratio = torch.where(pos, q, torch.ones_like(q)) / p
    terms = torch.where(pos, q * torch.log(ratio), torch.zeros_like(q))
    return terms.sum(-1)


def _log_prior_weights(resp, log_resp) -> torch.Tensor:
    if log_resp is None:
        if resp is None:
            raise TypeError("pass resp or log_resp")
        resp = torch.as_tensor(resp)
        if torch.any(resp < 0):
            raise ValueError("responsibilities must be nonnegative")
        if torch.any(resp.sum(-1) <= 0):
            raise ValueError("responsibilities are all zero")
        log_resp = torch.log(resp)
    elif torch.any(torch.isneginf(log_resp).all(-1)):
        raise ValueError("responsibilities are all zero")
    return log_resp


def optimal_q(loglik: torch.Tensor, resp=None, *, log_resp=None) -> torch.Tensor:
    """q(c=k|x) proportional to p(y|z,c=k) p(c=k|z)."""
    log_resp = _log_prior_weights(resp, log_resp)
    loglik = torch.as_tensor(loglik, dtype=log_resp.dtype)
    if not torch.all(torch.isfinite(loglik)):
        raise ValueError("response log-likelihoods must be finite")
    return torch.softmax(loglik + log_resp, dim=-1)


def optimal_q_regularized(loglik: torch.Tensor, entropies: torch.Tensor, resp=None, *,
                          log_resp=None) -> torch.Tensor:
    """Optimal q(c|x) when the clamped response entropies are penalised."""
    log_resp = _log_prior_weights(resp, log_resp)
    loglik = torch.as_tensor(loglik, dtype=log_resp.dtype)
    entropies = torch.as_tensor(entropies, dtype=log_resp.dtype)
    if torch.any(entropies < 0):
        raise ValueError("clamped entropies must be nonnegative")
    if not torch.all(torch.isfinite(loglik)):
        raise ValueError("response log-likelihoods must be finite")
    return torch.softmax(loglik - entropies + log_resp, dim=-1)


def test_q(entropies: torch.Tensor, resp=None, *, log_resp=None) -> torch.Tensor:
    """Label-free cluster weights: exp(-H_max_k) p(c=k|z), normalised."""
    log_resp = _log_prior_weights(resp, log_resp)
    entropies = torch.as_tensor(entropies, dtype=log_resp.dtype)
    if torch.any(entropies < 0):
        raise ValueError("clamped entropies must be nonnegative")
    return torch.softmax(log_resp - entropies, dim=-1)


test_q.__test__ = False  # not a pytest test despite the name


def gaussian_entropy(log_var: torch.Tensor) -> torch.Tensor:
    """Differential entropy of a diagonal Gaussian (may be negative)."""
    return 0.5 * (math.log(2.0 * math.pi * math.e) + log_var).sum(-1)


def categorical_entropy(probs: torch.Tensor) -> torch.Tensor:
    probs = torch.as_tensor(probs)
    logp = torch.where(probs > 0, torch.log(probs.clamp_min(1e-300)), torch.zeros_like(probs))
    return -(probs * logp).sum(-1)


def h_max(dist) -> torch.Tensor:
    """max(H(dist), 0) for a response distribution (see ``dgc.responses``)."""
    return dist.entropy().clamp_min(0.0)


# ---------------------------------------------------------------------------
# numerical oracle for the simplex program
# ---------------------------------------------------------------------------

def _project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row of v onto the probability simplex."""
    n = v.shape[-1]
    u = -np.sort(-v, axis=-1)
    css = np.cumsum(u, axis=-1) - 1.0
    idx = np.arange(1, n + 1)
    cond = u - css / idx > 0
    rho = n - 1 - np.argmax(cond[..., ::-1], axis=-1)
    theta = np.take_along_axis(css, rho[..., None], axis=-1) / (rho[..., None] + 1.0)
    return np.maximum(v - theta, 0.0)


def simplex_objective(t: np.ndarray, log_prior: np.ndarray, linear: np.ndarray) -> np.ndarray:
    """f(t) = KL(t || exp(log_prior)) - <t, linear>, row-wise."""
    safe = np.where(t > 0, t, 1.0)
    return np.sum(np.where(t > 0, t * (np.log(safe) - log_prior), 0.0) - t * linear, axis=-1)


def convex_oracle(log_prior, linear, *, tol: float = 1e-10, max_iter: int = 500) -> np.ndarray:
    """Minimise KL(t || r) - <t, linear> over the simplex numerically.

    ``log_prior`` holds log r (the responsibilities) and ``linear`` the
    per-component reward (log-likelihoods, minus entropies where relevant).
    Rows are solved independently by gradient steps taken in the metric of
    the diagonal Hessian diag(1/t), projected onto the plane sum(t) = 1,
    with a fraction-to-boundary rule and Armijo backtracking. Stops when the
    Euclidean projected-gradient residual ||P(t - grad) - t||_inf < tol on
    every row. This is a test oracle: it never evaluates the closed form.
    """
    log_prior = np.atleast_2d(np.asarray(log_prior, dtype=np.float64))
    linear = np.broadcast_to(np.asarray(linear, dtype=np.float64), log_prior.shape)
    if not (np.all(np.isfinite(log_prior)) and np.all(np.isfinite(linear))):
        raise ValueError("objective parameters must be finite")
    n_rows, k = log_prior.shape
    if k == 1:
        return np.ones((n_rows, 1))

    t = np.full((n_rows, k), 1.0 / k)
    res = np.full(n_rows, np.inf)
    for _ in range(max_iter):
        g = np.log(t) + 1.0 - log_prior - linear
        res = np.abs(_project_simplex(t - g) - t).max(-1)
        if np.all(res < tol):
            return t
        gamma = np.sum(t * g, -1, keepdims=True)
        d = -t * (g - gamma)
        # largest step keeping every coordinate positive, then back off
        with np.errstate(divide="ignore", invalid="ignore"):
            limit = np.where(d < 0, -t / d, np.inf).min(-1)
        alpha = np.minimum(1.0, 0.99 * limit)
        f0 = simplex_objective(t, log_prior, linear)
        slope = np.sum(g * d, -1)
        for _ in range(60):
            cand = t + alpha[:, None] * d
            ok = simplex_objective(cand, log_prior, linear) <= f0 + 1e-4 * alpha * slope + 1e-15
            if ok.all():
                break
            alpha = np.where(ok, alpha, 0.5 * alpha)
        t = np.maximum(t + alpha[:, None] * d, 1e-300)
        t /= t.sum(-1, keepdims=True)
    raise ConvergenceError("simplex program did not reach stationarity", float(res.max()))
