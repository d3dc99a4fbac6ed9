"""Encoder, decoder and per-component task heads, plus the generative process."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .mixture import LOG_VAR_MAX, LOG_VAR_MIN, DiagonalGaussian, MixturePrior
from .responses import params_per_component, response_from_output

ACTIVATIONS = {"relu": nn.ReLU, "sigmoid": nn.Sigmoid}
LAYER_KINDS = ("linear", "conv", "deconv")


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    d_in: int
    d_out: int
    activation: Optional[str] = None
    kernel: Optional[int] = None
    stride: int = 1
    padding: int = 0
    batch_norm: bool = False
    pool: Optional[tuple] = None  # (kernel, stride)


def FL(d_in: int, d_out: int, activation: Optional[str] = None) -> LayerSpec:
    return LayerSpec("linear", d_in, d_out, activation)


def Conv(c_in, c_out, kernel, activation=None, batch_norm=False, pool=None, padding=None):
    pad = kernel // 2 if padding is None else padding
    return LayerSpec("conv", c_in, c_out, activation, kernel, 1, pad, batch_norm,
                     tuple(pool) if pool else None)


def Deconv(c_in, c_out, kernel, activation=None, batch_norm=False, stride=2, padding=1):
    return LayerSpec("deconv", c_in, c_out, activation, kernel, stride, padding, batch_norm)


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(
            l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers))
        self.validate()

    def validate(self) -> None:
        if not self.layers:
            raise ShapeError("a network needs at least one layer")
        for i, layer in enumerate(self.layers):
            if layer.kind not in LAYER_KINDS:
                raise ShapeError(f"layer {i}: unknown kind {layer.kind!r}")
            if layer.activation is not None and layer.activation not in ACTIVATIONS:
                raise ShapeError(f"layer {i}: unsupported activation {layer.activation!r}")
            if layer.kind != "linear" and not layer.kernel:
                raise ShapeError(f"layer {i}: {layer.kind} layers need a kernel size")
        for i, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            # linear -> deconv reshapes to (C, 1, 1); conv -> linear flattens
            if a.kind == b.kind or (a.kind, b.kind) in {("conv", "deconv"), ("deconv", "conv")}:
                if a.d_out != b.d_in:
                    raise ShapeError(f"layers {i}->{i + 1}: {a.d_out} outputs feed {b.d_in} inputs")
            elif a.kind == "linear" and b.kind == "deconv" and a.d_out != b.d_in:
                raise ShapeError(f"layers {i}->{i + 1}: {a.d_out} units cannot form {b.d_in} channels")

    @property
    def d_in(self) -> int:
        return self.layers[0].d_in

    @property
    def d_out(self) -> int:
        return self.layers[-1].d_out

    def build(self, *, link_output: bool = False) -> nn.Sequential:
        """Instantiate the layers.

        With ``link_output`` the last layer is left linear (no activation,
        normalisation or pooling) because it emits distribution parameters.
        """
        modules = []
        prev = None
        for i, layer in enumerate(self.layers):
            last = link_output and i == len(self.layers) - 1
            if prev == "conv" and layer.kind == "linear":
                modules.append(nn.Flatten(start_dim=-3))
            elif prev == "linear" and layer.kind == "deconv":
                modules.append(nn.Unflatten(-1, (layer.d_in, 1, 1)))
            if layer.kind == "linear":
                modules.append(nn.Linear(layer.d_in, layer.d_out))
            elif layer.kind == "conv":
                modules.append(nn.Conv2d(layer.d_in, layer.d_out, layer.kernel, layer.stride, layer.padding))
            else:
                modules.append(nn.ConvTranspose2d(layer.d_in, layer.d_out, layer.kernel,
                                                  layer.stride, layer.padding))
            if not last:
                if layer.batch_norm:
                    bn = nn.BatchNorm1d if layer.kind == "linear" else nn.BatchNorm2d
                    modules.append(bn(layer.d_out))
                if layer.activation:
                    modules.append(ACTIVATIONS[layer.activation]())
                if layer.pool:
                    k, s = layer.pool
                    # stride-1 pools keep the spatial size
                    modules.append(nn.MaxPool2d(k, s, padding=0) if s > 1 else
                                   nn.Sequential(nn.ZeroPad2d((0, k - 1, 0, k - 1)), nn.MaxPool2d(k, 1)))
            prev = layer.kind
        return nn.Sequential(*modules)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of one model family.

    ``encoder``'s last layer is the latent head (instantiated twice, for the
    mean and the log-variance). ``task`` describes one component's head; its
    last width is the per-component parameter count, so K heads side by side
    give an output K times that width.
    """

    name: str
    input_shape: tuple
    encoder: NetworkSpec
    decoder: NetworkSpec
    task: NetworkSpec
    reconstruction: str  # "bernoulli" | "gaussian"
    response_kind: str  # "categorical" | "gaussian"
    response_size: int  # classes, or output dimension
    n_clusters: int
    reconstruction_scale: float = 1.0  # std of the Gaussian reconstruction likelihood
    prior_init_scale: float = 0.01  # spread of the initial mixture means

    def __post_init__(self):
        for name in ("encoder", "decoder", "task"):
            value = getattr(self, name)
            if not isinstance(value, NetworkSpec):
                object.__setattr__(self, name, NetworkSpec(tuple(value["layers"])))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        if self.reconstruction not in ("bernoulli", "gaussian"):
            raise ShapeError(f"unknown reconstruction family {self.reconstruction!r}")
        if self.encoder.d_out != self.decoder.d_in:
            raise ShapeError(f"latent size {self.encoder.d_out} != decoder input {self.decoder.d_in}")
        if self.task.d_in != self.latent_dim:
            raise ShapeError(f"task input {self.task.d_in} != latent size {self.latent_dim}")
        p = params_per_component(self.response_kind, self.response_size)
        if self.task.d_out != p:
            raise ShapeError(f"task head emits {self.task.d_out} values, a {self.response_kind} "
                             f"response of size {self.response_size} needs {p}")
        if self.n_clusters < 1:
            raise ShapeError("n_clusters must be positive")
        if not self.reconstruction_scale > 0:
            raise ShapeError("reconstruction_scale must be positive")
        if not self.prior_init_scale >= 0:
            raise ShapeError("prior_init_scale must be nonnegative")

    @property
    def latent_dim(self) -> int:
        return self.encoder.d_out

    def with_clusters(self, k: int) -> "ModelSpec":
        return replace(self, n_clusters=k)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


def mnist_mlp(n_clusters: int = 4) -> ModelSpec:
    return ModelSpec(
        name="mnist-mlp",
        input_shape=(784,),
        encoder=NetworkSpec((FL(784, 500, "relu"), FL(500, 500, "relu"),
                             FL(500, 2000, "relu"), FL(2000, 10, "relu"))),
        decoder=NetworkSpec((FL(10, 2000, "relu"), FL(2000, 500, "relu"),
                             FL(500, 500, "relu"), FL(500, 784, "relu"))),
        task=NetworkSpec((FL(10, 1, "sigmoid"),)),
        reconstruction="bernoulli",
        response_kind="categorical",
        response_size=2,
        n_clusters=n_clusters,
    )


def pacman_mlp(n_clusters: int = 2) -> ModelSpec:
    return ModelSpec(
        name="pacman-mlp",
        input_shape=(2,),
        encoder=NetworkSpec((FL(2, 64, "sigmoid"), FL(64, 128, "sigmoid"),
                             FL(128, 256, "sigmoid"), FL(256, 60, "sigmoid"))),
        decoder=NetworkSpec((FL(60, 256, "sigmoid"), FL(256, 128, "sigmoid"),
                             FL(128, 64, "sigmoid"), FL(64, 2, "sigmoid"))),
        task=NetworkSpec((FL(60, 128, "sigmoid"), FL(128, 2, "sigmoid"))),
        reconstruction="gaussian",
        response_kind="gaussian",
        response_size=1,
        n_clusters=n_clusters,
        reconstruction_scale=0.05,
    )


def svhn_conv(n_clusters: int = 10) -> ModelSpec:
    enc = [Conv(3, 48, 5, "relu", True, (2, 2)), Conv(48, 64, 5, "relu", True, (2, 1)),
           Conv(64, 128, 5, "relu", True, (2, 2)), Conv(128, 160, 5, "relu", True, (2, 1)),
           Conv(160, 192, 5, "relu", True, (2, 2)), Conv(192, 192, 5, "relu", True, (2, 1)),
           Conv(192, 192, 5, "relu", True, (2, 2)), Conv(192, 192, 5, "relu", True, (2, 1))]
    # a 32x32 input leaves 192 x 2 x 2 after four stride-2 pools
    enc += [FL(192 * 2 * 2, 3072, "relu"), FL(3072, 256, "relu")]
    dec = [FL(256, 3072, "relu"),
           Deconv(3072, 256, 4, "relu", True, stride=1, padding=0),
           Deconv(256, 128, 4, "relu", True), Deconv(128, 64, 4, "relu", True),
           Deconv(64, 3, 4, "relu", True)]
    task = [FL(256, 512, "sigmoid"), FL(512, 1024, "sigmoid"), FL(1024, 512, "sigmoid"),
            FL(512, 256, "sigmoid"), FL(256, 10, "sigmoid")]
    return ModelSpec("svhn-conv", (3, 32, 32), NetworkSpec(tuple(enc)), NetworkSpec(tuple(dec)),
                     NetworkSpec(tuple(task)), "bernoulli", "categorical", 10, n_clusters)


PRESETS = {"mnist-mlp": mnist_mlp, "pacman-mlp": pacman_mlp, "svhn-conv": svhn_conv}


def get_preset(name: str, n_clusters: Optional[int] = None) -> ModelSpec:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}") from None
    return factory() if n_clusters is None else factory(n_clusters)


class TaskHeadBank(nn.Module):
    """K task networks evaluated in one batched pass.

    Independent heads keep a [K, d_in, d_out] weight per layer. With
    ``shared_trunk`` every hidden layer is shared and only the last layer
    is split into K parameter blocks.
    """

    def __init__(self, spec: NetworkSpec, n_clusters: int, *, shared_trunk: bool = False):
        super().__init__()
        if any(l.kind != "linear" for l in spec.layers):
            raise ShapeError("task heads must be fully connected")
        self.n_clusters = n_clusters
        self.shared_trunk = shared_trunk
        self.activations = [l.activation for l in spec.layers[:-1]]
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for i, layer in enumerate(spec.layers):
            bound = 1.0 / math.sqrt(layer.d_in)
            last = i == len(spec.layers) - 1
            k = 1 if (shared_trunk and not last) else n_clusters
            self.weights.append(nn.Parameter(torch.empty(k, layer.d_in, layer.d_out).uniform_(-bound, bound)))
            self.biases.append(nn.Parameter(torch.empty(k, layer.d_out).uniform_(-bound, bound)))

    @property
    def d_in(self) -> int:
        return self.weights[0].shape[1]

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.d_in:
            raise ShapeError(f"latent code has {z.shape[-1]} entries, task heads expect {self.d_in}")
        h = z.unsqueeze(-2)  # [..., 1, d]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = torch.einsum("...ki,kio->...ko", h, w) + b
            if i < len(self.activations) and self.activations[i]:
                h = torch.sigmoid(h) if self.activations[i] == "sigmoid" else F.relu(h)
        if h.shape[-2] == 1 and self.n_clusters > 1:
            h = h.expand(*h.shape[:-2], self.n_clusters, h.shape[-1])
        return h


def reparameterize(g: DiagonalGaussian, noise: torch.Tensor) -> torch.Tensor:
    """mean + sqrt(variance) * noise, with the log-variance clamped to [-20, 20]."""
    log_var = g.log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX)
    return g.mean + torch.exp(0.5 * log_var) * noise


class DGCModel(nn.Module):
    """Encoder q(z|x), decoder p(x|z), task heads p(y|z,c) and the mixture prior.

    Prior means start close to the origin (``spec.prior_init_scale``) so
    that p(c|z) is nearly flat at first and the responses get a say in q(c|x).
    """

    def __init__(self, spec: ModelSpec, *, shared_task_trunk: bool = False,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        self.spec = spec
        self.shared_task_trunk = shared_task_trunk
        enc_layers = spec.encoder.layers
        self.encoder_body = (NetworkSpec(enc_layers[:-1]).build() if len(enc_layers) > 1
                             else nn.Identity())
        head = enc_layers[-1]
        self.enc_mean = nn.Linear(head.d_in, head.d_out)
        self.enc_log_var = nn.Linear(head.d_in, head.d_out)
        self.decoder = spec.decoder.build(link_output=True)
        self.task = TaskHeadBank(spec.task, spec.n_clusters, shared_trunk=shared_task_trunk)
        self.prior = MixturePrior(spec.n_clusters, spec.latent_dim, init_scale=spec.prior_init_scale,
                                  generator=generator)

    @property
    def n_clusters(self) -> int:
        return self.spec.n_clusters

    @property
    def latent_dim(self) -> int:
        return self.spec.latent_dim

    def _check_input(self, x: torch.Tensor) -> None:
        shape = self.spec.input_shape
        if tuple(x.shape[-len(shape):]) != shape:
            raise ShapeError(f"input trailing shape {tuple(x.shape[-len(shape):])}, expected {shape}")

    def encode(self, x: torch.Tensor) -> DiagonalGaussian:
        self._check_input(x)
        h = self.encoder_body(x)
        return DiagonalGaussian(self.enc_mean(h),
                                self.enc_log_var(h).clamp(LOG_VAR_MIN, LOG_VAR_MAX))

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """Bernoulli logits or Gaussian means, shaped like the input."""
        if z.shape[-1] != self.latent_dim:
            raise ShapeError(f"latent code has {z.shape[-1]} entries, expected {self.latent_dim}")
        lead = z.shape[:-1]
        out = self.decoder(z.reshape(-1, self.latent_dim))
        return out.reshape(*lead, *self.spec.input_shape)

    def reconstruction_log_prob(self, x: torch.Tensor, params: torch.Tensor) -> torch.Tensor:
        """log p(x|z) summed over input dimensions; x broadcasts against params."""
        n = len(self.spec.input_shape)
        dims = tuple(range(-n, 0))
        if self.spec.reconstruction == "bernoulli":
            x = x.expand_as(params)
            return -F.binary_cross_entropy_with_logits(params, x, reduction="none").sum(dims)
        scale = self.spec.reconstruction_scale
        size = math.prod(self.spec.input_shape)
        return (-0.5 * ((x - params) / scale) ** 2).sum(dims) \
            - size * (math.log(scale) + 0.5 * math.log(2 * math.pi))

    def task_forward(self, z: torch.Tensor):
        out = self.task(z)
        return response_from_output(out, self.spec.response_kind, self.spec.response_size)

    def reconstruction_mean(self, params: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(params) if self.spec.reconstruction == "bernoulli" else params

    @torch.no_grad()
    def generate(self, n: int, generator: Optional[torch.Generator] = None, *,
                 sample_x: bool = False, sample_y: bool = True) -> dict:
        """Ancestral sampling c -> z -> (x, y).

        x defaults to the decoder mean; y is drawn from p(y|z,c) unless
        ``sample_y`` is False, in which case its mean is returned.
        """
        if n <= 0:
            raise ValueError("n must be positive")
        prior = self.prior
        dtype = prior.means.dtype
        c = torch.multinomial(prior.weights, n, replacement=True, generator=generator)
        noise = torch.randn(n, self.latent_dim, generator=generator, dtype=dtype)
        z = prior.means[c] + torch.exp(0.5 * prior.log_vars[c]) * noise
        params = self.decode(z)
        if sample_x:
            if self.spec.reconstruction == "bernoulli":
                x = torch.bernoulli(torch.sigmoid(params), generator=generator)
            else:
                x = params + self.spec.reconstruction_scale * torch.randn(
                    params.shape, generator=generator, dtype=dtype)
        else:
            x = self.reconstruction_mean(params)
        resp = self.task_forward(z).select(c)
        y = resp.sample(generator) if sample_y else resp.mean()
        return {"c": c, "z": z, "x": x, "y": y}
