"""Per-component side-information distributions p(y | z, c=k).

Both classes hold parameters with a trailing component axis so one object
describes all K conditionals at once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F

from .mixture import LOG_VAR_MAX, LOG_VAR_MIN, categorical_entropy, gaussian_entropy, log_normal


@dataclass
class CategoricalResponse:
    """Class probabilities per component; ``logits`` has shape [..., K, C]."""

    logits: torch.Tensor
    kind = "categorical"

    @property
    def n_classes(self) -> int:
        return self.logits.shape[-1]

    @property
    def probs(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=-1)

    def log_prob(self, y: torch.Tensor) -> torch.Tensor:
        """log p(y|z,c=k) for integer labels y of shape [...]; returns [..., K]."""
        logp = F.log_softmax(self.logits, dim=-1)
        idx = y.long().reshape(*y.shape, 1, 1).expand(*logp.shape[:-1], 1)
        return logp.gather(-1, idx).squeeze(-1)

    def entropy(self) -> torch.Tensor:
        return categorical_entropy(self.probs)

    def mean(self) -> torch.Tensor:
        return self.probs

    def sample(self, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        flat = self.probs.reshape(-1, self.n_classes)
        draws = torch.multinomial(flat, 1, generator=generator)
        return draws.reshape(self.logits.shape[:-1])

    def select(self, c: torch.Tensor) -> "CategoricalResponse":
        """Parameters of component c[i] for each row i."""
        idx = c.long().reshape(-1, 1, 1).expand(-1, 1, self.n_classes)
        return CategoricalResponse(self.logits.gather(-2, idx).squeeze(-2))


@dataclass
class GaussianResponse:
    """Diagonal Gaussian per component; ``loc``/``log_var`` have shape [..., K, D]."""

    loc: torch.Tensor
    log_var: torch.Tensor
    kind = "gaussian"

    def __post_init__(self):
        self.log_var = self.log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX)

    @property
    def dim(self) -> int:
        return self.loc.shape[-1]

    def log_prob(self, y: torch.Tensor) -> torch.Tensor:
        """log p(y|z,c=k) for y of shape [..., D] (or [...] when D == 1); returns [..., K]."""
        if y.ndim == self.loc.ndim - 2:
            y = y.unsqueeze(-1)
        return log_normal(y.unsqueeze(-2), self.loc, self.log_var)

    def entropy(self) -> torch.Tensor:
        return gaussian_entropy(self.log_var)

    def mean(self) -> torch.Tensor:
        return self.loc

    def sample(self, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        noise = torch.randn(self.loc.shape, generator=generator, dtype=self.loc.dtype)
        return self.loc + torch.exp(0.5 * self.log_var) * noise

    def select(self, c: torch.Tensor) -> "GaussianResponse":
        idx = c.long().reshape(-1, 1, 1).expand(-1, 1, self.dim)
        return GaussianResponse(self.loc.gather(-2, idx).squeeze(-2),
                                self.log_var.gather(-2, idx).squeeze(-2))


def params_per_component(kind: str, size: int) -> int:
    """Width of one component's parameter block in the task-network output.

    Binary categorical responses use a single logit.
    """
    if kind == "categorical":
        if size < 2:
            raise ValueError("a categorical response needs at least two classes")
        return 1 if size == 2 else size
    if kind == "gaussian":
        return 2 * size
    raise ValueError(f"unknown response kind {kind!r}")


def response_from_output(out: torch.Tensor, kind: str, size: int):
    """Turn raw task-network output [..., K, P] into a response distribution."""
    if kind == "categorical":
        if size == 2:
            out = torch.cat([torch.zeros_like(out), out], dim=-1)
        return CategoricalResponse(out)
    if kind == "gaussian":
        mean, log_var = out.split(size, dim=-1)
        return GaussianResponse(mean, log_var)
    raise ValueError(f"unknown response kind {kind!r}")
