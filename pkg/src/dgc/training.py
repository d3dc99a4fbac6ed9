"""Optimisation: step-decayed Adam over the chosen bound, autoencoder + EM
initialisation, checkpoints and the per-epoch record log."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .datasets import TaskData
from .evaluation import assign_clusters, cluster_accuracy, cluster_posterior, mean_posterior_entropy
from .losses import OBJECTIVES, NumericFailure
from .networks import DGCModel, ModelSpec

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "dgc-checkpoint/1"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 128
    lr: float = 0.002
    lr_decay: float = 0.9  # multiplicative factor applied every decay_every epochs
    adam_eps: float = 1e-8
    warmup_steps: int = 0  # linear learning-rate ramp over the first optimiser steps
    decay_every: int = 10
    epochs: int = 100
    n_samples: int = 1
    n_clusters: int = 4
    regularizer: bool = True
    pretrain: bool = False
    pretrain_epochs: int = 10
    pretrain_lr: float = 0.001
    objective: str = "dgc"  # dgc | vade | ablation
    stop_grad_lambda: bool = False
    shared_task_trunk: bool = False
    checkpoint_every: int = 10
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        errors = []
        for name in ("batch_size", "epochs", "n_samples", "n_clusters", "decay_every",
                     "checkpoint_every"):
            if getattr(self, name) < 1:
                errors.append(f"{name} must be positive")
        if self.pretrain_epochs < 0 or self.warmup_steps < 0:
            errors.append("pretrain_epochs and warmup_steps must be nonnegative")
        if not self.lr > 0 or not self.pretrain_lr > 0:
            errors.append("learning rates must be positive")
        if not self.adam_eps > 0:
            errors.append("adam_eps must be positive")
        if not 0 < self.lr_decay <= 1:
            errors.append("lr_decay must lie in (0, 1]")
        if self.objective not in OBJECTIVES:
            errors.append(f"objective must be one of {sorted(OBJECTIVES)}")
        if errors:
            raise ValueError("; ".join(errors))


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Step decay at exact epoch boundaries (epochs counted from 0)."""
    return config.lr * config.lr_decay ** (epoch // config.decay_every)


@dataclass
class TrainRecord:
    epoch: int
    lr: float
    loss: float
    ensemble: float
    reconstruction: float
    kl_categorical: float
    kl_gaussian: float
    entropy_reg: float
    posterior_entropy: float
    train_accuracy: Optional[float] = None
    test_accuracy: Optional[float] = None

    def to_dict(self) -> dict:
        return {"type": "epoch", **asdict(self)}


def assignment_mode(objective: str, labeled: bool) -> str:
    if objective == "vade":
        return "prior"
    return "labeled" if labeled else "unlabeled"


def build_model(spec: ModelSpec, config: TrainConfig) -> DGCModel:
    torch.manual_seed(config.seed)
    return DGCModel(spec.with_clusters(config.n_clusters),
                    shared_task_trunk=config.shared_task_trunk)


def _tensors(data: TaskData, dtype) -> tuple:
    x = torch.as_tensor(np.asarray(data.x), dtype=dtype)
    y = torch.as_tensor(np.asarray(data.y))
    if y.is_floating_point():
        y = y.to(dtype)
    return x, y


def pretrain(data: TaskData, model: DGCModel, config: TrainConfig, *, max_em_iter: int = 200) -> DGCModel:
    """Autoencoder warm-up of encoder mean + decoder, then EM for the prior.

    Returns ``model`` unchanged when pretraining is disabled.
    """
    if not config.pretrain:
        return model
    from sklearn.exceptions import ConvergenceWarning
    from sklearn.mixture import GaussianMixture

    dtype = next(model.parameters()).dtype
    x, _ = _tensors(data, dtype)
    g = torch.Generator().manual_seed(config.seed + 1)
    params = (list(model.encoder_body.parameters()) + list(model.enc_mean.parameters())
              + list(model.decoder.parameters()))
    opt = torch.optim.Adam(params, lr=config.pretrain_lr)
    for epoch in range(config.pretrain_epochs):
        perm = torch.randperm(len(x), generator=g)
        for start in range(0, len(x), config.batch_size):
            xb = x[perm[start:start + config.batch_size]]
            z = model.enc_mean(model.encoder_body(xb))
            loss = -model.reconstruction_log_prob(xb, model.decode(z)).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
    with torch.no_grad():
        codes = model.encode(x).mean.double().numpy()
    fit_mixture(model, codes, seed=config.seed, max_iter=max_em_iter)
    return model


def fit_mixture(model: DGCModel, codes: np.ndarray, *, seed: int = 0, max_iter: int = 200):
    """Fit the prior to latent codes by EM (diagonal covariances)."""
    from sklearn.exceptions import ConvergenceWarning
    from sklearn.mixture import GaussianMixture

    gmm = GaussianMixture(model.n_clusters, covariance_type="diag", max_iter=max_iter,
                          reg_covar=1e-8, random_state=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("error", ConvergenceWarning)
        try:
            gmm.fit(codes)
        except ConvergenceWarning:
            warnings.warn("EM did not converge; using the best parameters found", RuntimeWarning)
            warnings.simplefilter("ignore", ConvergenceWarning)
            gmm.fit(codes)
    prior = model.prior
    with torch.no_grad():
        prior.logits.copy_(torch.as_tensor(np.log(gmm.weights_)))
        prior.means.copy_(torch.as_tensor(gmm.means_))
        prior.log_vars.copy_(torch.as_tensor(np.log(gmm.covariances_)))
    return gmm


def save_checkpoint(path, model: DGCModel, config: TrainConfig, epoch: int, optimizer=None,
                    extra: Optional[dict] = None) -> None:
    """Atomic write; ``extra`` is stored verbatim (the CLI keeps its run config there)."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(config),
        "model_spec": model.spec.to_dict(),
        "epoch": epoch,
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "extra": extra or {},
    }
    tmp = Path(str(path) + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path) -> tuple:
    """Returns (model, config, epoch, payload)."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {payload.get('format')!r}")
    config = TrainConfig(**payload["config"])
    spec = ModelSpec.from_dict(payload["model_spec"])
    model = DGCModel(spec, shared_task_trunk=config.shared_task_trunk)
    model.load_state_dict(payload["model"])
    return model, config, payload["epoch"], payload


def _epoch_accuracy(model, data: Optional[TaskData], objective: str, labeled: bool):
    if data is None or data.cluster is None:
        return None
    pred = assign_clusters(model, data.x, data.y if labeled else None,
                           mode=assignment_mode(objective, labeled))
    return cluster_accuracy(pred, data.cluster)


def train(data: TaskData, config: TrainConfig, spec: Optional[ModelSpec] = None, *,
          model: Optional[DGCModel] = None, test_data: Optional[TaskData] = None,
          out_dir=None, resume=None, header: Optional[dict] = None,
          on_epoch: Optional[Callable[[TrainRecord], None]] = None) -> tuple:
    """Run the epoch loop; returns (model, records).

    With ``out_dir`` a line-delimited log (train_log.jsonl) is appended and
    checkpoints are written every ``checkpoint_every`` epochs and at the end
    (plus best.pt by test accuracy when ``test_data`` has clusters).
    ``resume`` is a checkpoint path whose epoch counter is continued.
    """
    if len(data) == 0:
        raise ValueError("training set is empty")
    start_epoch = 0
    opt_state = None
    if resume is not None:
        model, _, last_epoch, payload = load_checkpoint(resume)
        start_epoch = last_epoch + 1
        opt_state = payload.get("optimizer")
    elif model is None:
        if spec is None:
            raise ValueError("pass a model spec or a model")
        model = build_model(spec, config)
        if config.pretrain and config.objective != "ablation":
            pretrain(data, model, config)
    objective = OBJECTIVES[config.objective]
    dtype = next(model.parameters()).dtype
    x, y = _tensors(data, dtype)
    params = [p for p in model.parameters()]
    if config.objective == "vade":
        params = [p for n, p in model.named_parameters() if not n.startswith("task.")]
    elif config.objective == "ablation":
        params = [p for n, p in model.named_parameters() if not n.startswith("decoder.")]
    optimizer = torch.optim.Adam(params, lr=config.lr, eps=config.adam_eps)
    if opt_state is not None:
        optimizer.load_state_dict(opt_state)
    g = torch.Generator().manual_seed(config.seed * 7919 + start_epoch)

    log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.jsonl"
        if resume is None:
            head = {"type": "header", "config": asdict(config), "model": model.spec.name}
            head.update(header or {})
            log_path.write_text(json.dumps(head, sort_keys=True) + "\n")

    steps_per_epoch = -(-len(x) // config.batch_size)
    records = []
    best = -1.0
    labeled = config.objective != "vade"
    last_ckpt = None
    for epoch in range(start_epoch, config.epochs):
        lr = lr_at_epoch(config, epoch)
        model.train()
        perm = torch.randperm(len(x), generator=g)
        sums = dict.fromkeys(("loss", "ensemble", "reconstruction", "kl_categorical",
                              "kl_gaussian", "entropy_reg"), 0.0)
        for batch, start in enumerate(range(0, len(x), config.batch_size)):
            step = epoch * steps_per_epoch + batch
            for group in optimizer.param_groups:
                group["lr"] = lr * min(1.0, (step + 1) / config.warmup_steps) if config.warmup_steps else lr
            idx = perm[start:start + config.batch_size]
            try:
                out = objective(model, x[idx], y[idx], n_samples=config.n_samples,
                                regularize=config.regularizer,
                                stop_grad_lambda=config.stop_grad_lambda, generator=g)
            except NumericFailure as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}; last checkpoint: {last_ckpt}") from exc
            optimizer.zero_grad()
            out.loss.backward()
            optimizer.step()
            w = len(idx)
            sums["loss"] += out.loss.item() * w
            for k, v in out.as_dict().items():
                if k in sums:
                    sums[k] += v * w
        post = cluster_posterior(model, data.x, data.y if labeled else None,
                                 mode=assignment_mode(config.objective, labeled))
        record = TrainRecord(
            epoch=epoch, lr=lr, **{k: v / len(x) for k, v in sums.items()},
            posterior_entropy=mean_posterior_entropy(post),
            train_accuracy=(cluster_accuracy(post.argmax(-1), data.cluster)
                            if data.cluster is not None else None),
            test_accuracy=_epoch_accuracy(model, test_data, config.objective, labeled=False),
        )
        records.append(record)
        log.info("epoch %d loss %.4f train acc %s test acc %s", epoch, record.loss,
                 record.train_accuracy, record.test_accuracy)
        if on_epoch is not None:
            on_epoch(record)
        if out_dir is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
            final = epoch == config.epochs - 1
            if (epoch + 1) % config.checkpoint_every == 0 or final:
                last_ckpt = out_dir / f"checkpoint_{epoch + 1:04d}.pt"
                save_checkpoint(last_ckpt, model, config, epoch, optimizer, header)
                if final:
                    save_checkpoint(out_dir / "final.pt", model, config, epoch, optimizer, header)
            if record.test_accuracy is not None and record.test_accuracy > best:
                best = record.test_accuracy
                save_checkpoint(out_dir / "best.pt", model, config, epoch, optimizer, header)
    return model, records


def read_log(path) -> tuple:
    """Parse a train_log.jsonl into (header, records)."""
    header, records = None, []
    names = {f.name for f in fields(TrainRecord)}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        item = json.loads(line)
        if item.get("type") == "header":
            header = item
        elif item.get("type") == "epoch":
            records.append(TrainRecord(**{k: v for k, v in item.items() if k in names}))
    return header, records
