"""Evidence lower bounds: the goal-oriented bound, its entropy-regularised
variant, the unsupervised mixture-VAE bound and the decoder-free ablation."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

import torch

from .mixture import (
    DiagonalGaussian,
    h_max,
    kl_diag_gaussians,
    log_component_density,
    log_marginal,
    log_normal,
    log_responsibilities,
    optimal_q,
    optimal_q_regularized,
)
from .networks import DGCModel, reparameterize

TINY = 1e-30


class NumericFailure(FloatingPointError):
    def __init__(self, term: str):
        super().__init__(f"non-finite value in loss term {term!r}")
        self.term = term


@dataclass
class LossBreakdown:
    """Batch means of the bound's terms. ``total`` is the bound itself;
    minimise ``loss`` = -total."""

    ensemble: torch.Tensor
    reconstruction: torch.Tensor
    kl_categorical: torch.Tensor
    kl_gaussian: torch.Tensor
    entropy_reg: torch.Tensor
    total: torch.Tensor
    lam: torch.Tensor  # [B, K] cluster posterior used for the batch

    @property
    def loss(self) -> torch.Tensor:
        return -self.total

    @property
    def elbo(self) -> torch.Tensor:
        """The bound without the entropy penalty."""
        return self.total + self.entropy_reg

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name).item() for f in fields(self) if f.name != "lam"}


def _draw_noise(q: DiagonalGaussian, n_samples: int, noise, generator) -> torch.Tensor:
    shape = (q.mean.shape[0], n_samples, q.mean.shape[-1])
    if noise is None:
        return torch.randn(shape, generator=generator, dtype=q.mean.dtype)
    noise = torch.as_tensor(noise, dtype=q.mean.dtype)
    if noise.ndim == 2:
        noise = noise.unsqueeze(1)
    if noise.shape != shape:
        raise ValueError(f"noise has shape {tuple(noise.shape)}, expected {shape}")
    return noise


def _check(name: str, value: torch.Tensor) -> torch.Tensor:
    if not torch.all(torch.isfinite(value)):
        raise NumericFailure(name)
    return value


def dgc_loss(model: DGCModel, x: torch.Tensor, y: Optional[torch.Tensor], *,
             n_samples: int = 1, regularize: bool = True, supervised: bool = True,
             use_decoder: bool = True, stop_grad_lambda: bool = False,
             lam: Optional[torch.Tensor] = None, noise: Optional[torch.Tensor] = None,
             generator: Optional[torch.Generator] = None) -> LossBreakdown:
    """Assemble the bound term by term with closed-form KLs.

    Per sample: encode, draw ``n_samples`` reparameterised codes, score the
    task heads, pick lambda = q(c|x) in closed form (averaged over the
    codes), then combine ensemble + reconstruction - KL(lambda || pi) -
    sum_k lambda_k KL(q(z|x) || p(z|c=k)) - entropy penalty.

    ``lam`` overrides the closed-form posterior (shape [B, K]).
    """
    prior = model.prior
    q = model.encode(x)
    eps = _draw_noise(q, n_samples, noise, generator)
    z = reparameterize(DiagonalGaussian(q.mean.unsqueeze(1), q.log_var.unsqueeze(1)), eps)
    log_resp = log_responsibilities(z, prior)  # [B, M, K]
    zero = torch.zeros(x.shape[0], dtype=z.dtype)

    if supervised:
        if y is None:
            raise ValueError("the supervised bound needs responses y")
        response = model.task_forward(z)
        loglik = _check("ensemble", response.log_prob(y.unsqueeze(1)))  # [B, M, K]
        entropies = h_max(response) if regularize else None
    if lam is None:
        if not supervised:
            lam = log_resp.exp().mean(1)
        elif regularize:
            lam = optimal_q_regularized(loglik, entropies, log_resp=log_resp).mean(1)
        else:
            lam = optimal_q(loglik, log_resp=log_resp).mean(1)
    if stop_grad_lambda:
        lam = lam.detach()

    ensemble = (lam * loglik.mean(1)).sum(-1) if supervised else zero
    entropy_reg = (lam * entropies.mean(1)).sum(-1) if (supervised and regularize) else zero
    if use_decoder:
        recon = model.reconstruction_log_prob(x.unsqueeze(1), model.decode(z)).mean(1)
    else:
        recon = zero
    kl_cat = (lam * (torch.log(lam.clamp_min(TINY)) - prior.log_weights)).sum(-1)
    prior_comp = DiagonalGaussian(prior.means, prior.log_vars)
    kl_gauss = (lam * kl_diag_gaussians(
        DiagonalGaussian(q.mean.unsqueeze(1), q.log_var.unsqueeze(1)), prior_comp)).sum(-1)

    terms = {"ensemble": ensemble, "reconstruction": recon, "kl_categorical": kl_cat,
             "kl_gaussian": kl_gauss, "entropy_reg": entropy_reg}
    for name, value in terms.items():
        _check(name, value)
    total = ensemble + recon - kl_cat - kl_gauss - entropy_reg
    return LossBreakdown(**{k: v.mean() for k, v in terms.items()}, total=total.mean(), lam=lam)


def vade_loss(model: DGCModel, x: torch.Tensor, **kwargs) -> LossBreakdown:
    """Unsupervised mixture-VAE bound: lambda = p(c|z), no response terms."""
    kwargs.pop("regularize", None)
    return dgc_loss(model, x, None, supervised=False, regularize=False, **kwargs)


def ablation_loss(model: DGCModel, x: torch.Tensor, y: torch.Tensor, **kwargs) -> LossBreakdown:
    """The supervised bound with the decoder and its reconstruction term removed."""
    return dgc_loss(model, x, y, use_decoder=False, **kwargs)


OBJECTIVES = {"dgc": dgc_loss, "vade": lambda m, x, y, **kw: vade_loss(m, x, **kw),
              "ablation": ablation_loss}


def elbo_forms(model: DGCModel, x: torch.Tensor, y: torch.Tensor, *, lam=None,
               n_samples: int = 1, noise=None, generator=None) -> tuple:
    """Per-sample bound in the KL-split form and in the posterior-gap form.

    Both forms are evaluated on the same latent draws; the Gaussian KL of
    the split form is estimated on those draws so the two agree exactly in
    exact arithmetic. Returns (split_form, gap_form), each of shape [B].
    """
    prior = model.prior
    q = model.encode(x)
    eps = _draw_noise(q, n_samples, noise, generator)
    qm, qv = q.mean.unsqueeze(1), q.log_var.unsqueeze(1)
    z = reparameterize(DiagonalGaussian(qm, qv), eps)
    loglik = model.task_forward(z).log_prob(y.unsqueeze(1))
    log_resp = log_responsibilities(z, prior)
    if lam is None:
        lam = optimal_q(loglik, log_resp=log_resp).mean(1)
    log_lam = torch.log(lam.clamp_min(TINY))
    ensemble = (lam * loglik.mean(1)).sum(-1)
    recon = model.reconstruction_log_prob(x.unsqueeze(1), model.decode(z))  # [B, M]
    log_q = log_normal(z, qm, qv)  # [B, M]

    # split form: E log p(x|z) - KL(lam || pi) - sum_k lam_k E[log q(z) - log p(z|k)]
    kl_cat = (lam * (log_lam - prior.log_weights)).sum(-1)
    gauss_gap = (log_q.unsqueeze(-1) - log_component_density(z, prior)).mean(1)  # [B, K]
    split = ensemble + recon.mean(1) - kl_cat - (lam * gauss_gap).sum(-1)

    # gap form: E log p(x,z)/q(z|x) - E KL(lam || p(c|z))
    joint = (recon + log_marginal(z, prior) - log_q).mean(1)
    kl_post = (lam.unsqueeze(1) * (log_lam.unsqueeze(1) - log_resp)).sum(-1).mean(1)
    gap = ensemble + joint - kl_post
    return split, gap


def elbo_decomposition_check(model: DGCModel, x: torch.Tensor, y: torch.Tensor, **kwargs) -> float:
    """Largest per-sample gap between the two algebraically equal bound forms."""
    with torch.no_grad():
        split, gap = elbo_forms(model, x, y, **kwargs)
    return float((split - gap).abs().max())
