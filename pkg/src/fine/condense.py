"""Learngene condensation, variable-depth instantiation and baseline initializers.

Two phases:

1. :func:`condense` trains an auxiliary model whose block weights exist only as
   shared-factor materializations, then extracts the shared (U, V) pairs.
2. :func:`instantiate` builds a model of any depth from those factors and
   :func:`sigma_fit` adapts only the grouped singular values on a small slice
   of target data.

:func:`he_random_init`, :func:`share_init` and :func:`svd_transfer_init` are the
comparison baselines.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import factorized as fz
from .data import batch_stream
from .diffusion import DiffusionSchedule, ddpm_loss, ema_update, q_sample
from .dit import DiTConfig, DiTModel, fresh_params
from .errors import ConfigurationError, ContractError, DivergenceError, IncompatibilityError
from .optim import AdamW
from .rng import Rng
from .tensor import Tensor, backward, current_tape, mse, no_grad

log = logging.getLogger(__name__)


@dataclass
class CondenseConfig:
    model: DiTConfig = field(default_factory=lambda: DiTConfig(depth=8, backing="factorized"))
    lr: float = 1e-4
    weight_decay: float = 0.0
    batch_size: int = 16
    steps: int = 2000
    seed: int = 0
    dataset: str = "shapes-A"
    n_samples: int = 2048
    log_every: int = 50


@dataclass
class SigmaFitConfig:
    fit_steps: int = 300
    fit_fraction: float = 0.01
    min_samples: int = 64
    lr: float = 1e-2
    batch_size: int = 16
    seed: int = 0
    freeze_learngene: bool = False


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-4
    weight_decay: float = 0.0
    batch_size: int = 16
    seed: int = 0
    ema_decay: float = 0.9999
    log_every: int = 50


def train(model, data, steps, *, lr=1e-4, batch_size=16, seed=0, sched=None,
          weight_decay=0.0, trainable=None, ema=None, log_every=50, on_step=None):
    """Run ``steps`` AdamW steps of the diffusion loss; returns per-step losses.

    Data order comes from ``(data, batch_size, seed)`` and noise draws from
    ``seed`` alone, so two runs sharing a seed see identical batches and noise
    regardless of the model being trained.
    """
    sched = sched or DiffusionSchedule(model.config.timesteps)
    params = model.parameters()
    names = [n for n, p in params.items() if p.requires_grad] if trainable is None else list(trainable)
    opt = AdamW({n: params[n] for n in names}, lr=lr, weight_decay=weight_decay)
    stream = batch_stream(data, batch_size, seed)
    noise = Rng(seed, ("noise",))
    conditional = model.config.num_classes > 0
    losses = []
    last = None
    for step in range(steps):
        x, y = next(stream)
        loss = ddpm_loss(model, x, y if conditional else None, sched, noise)
        val = loss.item()
        if not math.isfinite(val):
            current_tape().clear()
            raise DivergenceError(step, last)
        opt.zero_grad()
        backward(loss)
        opt.step()
        if ema is not None:
            ema_update(ema, model)
        losses.append(val)
        last = val
        if log_every and step % log_every == 0:
            log.info("step %d loss %.5f", step, val)
        if on_step is not None:
            on_step(step, val, model)
    return losses


def frozen_noise_loss(model, data, sched, seed=0, batch_size=64):
    """Diffusion loss on all of ``data`` with seeded, fixed (t, eps) draws."""
    rng = Rng(seed, ("frozen-noise",))
    conditional = model.config.num_classes > 0
    total, count = 0.0, 0
    with no_grad():
        for lo in range(0, data.n_samples, batch_size):
            x = data.images[lo:lo + batch_size]
            y = data.labels[lo:lo + batch_size] if conditional else None
            t = rng.integers(0, sched.timesteps, size=len(x))
            eps = rng.normal(size=x.shape)
            pred = model(q_sample(x, t, eps, sched), t, y)
            total += mse(pred, Tensor(eps)).item() * len(x)
            count += len(x)
    return total / count


def aux_model(cfg, rng):
    """Freshly initialized factorized auxiliary model."""
    if cfg.backing != "factorized":
        raise ConfigurationError("condensation needs a factorized model config")
    families = fz.init_shared_factors(
        cfg.width, cfg.hidden, cfg.rank, cfg.group_size, cfg.depth, rng.split("factors")
    )
    params = fresh_params(cfg, rng.split("params"), block_weights=False)
    return DiTModel(cfg, params, {f.kind: f for f in families})


def condense(cfg, data, sched=None, on_step=None):
    """Train the auxiliary model on all its parameters; return (learngene, model)."""
    model = aux_model(cfg.model, Rng(cfg.seed, ("condense", "init")))
    sched = sched or DiffusionSchedule(cfg.model.timesteps)
    losses = train(
        model, data, cfg.steps, lr=cfg.lr, batch_size=cfg.batch_size, seed=cfg.seed,
        sched=sched, weight_decay=cfg.weight_decay, log_every=cfg.log_every, on_step=on_step,
    )
    lg = fz.extract_learngene(
        list(model.families.values()),
        {"condensation_steps": cfg.steps, "seed": cfg.seed},
    )
    model.losses = losses
    return lg, model


def instantiate(learngene, depth, dcfg, rng):
    """Factorized model of ``depth`` layers with frozen learngene factors.

    Sigma groups are drawn from N(0, 1/r); biases are zero, norms unit, and
    embeddings / head freshly initialized.
    """
    if (dcfg.width, dcfg.hidden) != (learngene.width, learngene.hidden):
        raise IncompatibilityError(
            f"learngene has width D={learngene.width}, D'={learngene.hidden} but the model "
            f"config has D={dcfg.width}, D'={dcfg.hidden}"
        )
    if depth < 1:
        raise ConfigurationError(f"depth must be >= 1, got {depth}")
    cfg = dcfg.replace(
        backing="factorized", depth=depth, rank=learngene.rank, group_size=learngene.group_size
    )
    g = fz.n_groups(cfg.rank, cfg.group_size)
    srng = rng.split("sigma")
    families = {}
    for kind in fz.FAMILY_KINDS:
        U, V = learngene.factors[kind]
        sig = [
            Tensor(srng.split(kind).split(str(l)).normal(size=g, scale=1.0 / math.sqrt(cfg.rank)),
                   requires_grad=True)
            for l in range(depth)
        ]
        families[kind] = fz.FactorizedFamily(
            kind, Tensor(U.copy()), Tensor(V.copy()), sig, cfg.rank, cfg.group_size
        )
    model = DiTModel(cfg, fresh_params(cfg, rng.split("params"), block_weights=False), families)
    model.transferred = learngene.n_params
    return model


def fit_subset(data, fitcfg):
    if data is None or data.n_samples == 0:
        raise ContractError("sigma_fit needs non-empty target data")
    n = min(data.n_samples, max(fitcfg.min_samples, math.ceil(fitcfg.fit_fraction * data.n_samples)))
    idx = np.sort(Rng(fitcfg.seed, ("fit-subset",)).permutation(data.n_samples)[:n])
    return data.subset(idx)


def sigma_fit(model, fitcfg, target_data, sched=None):
    """Fit only the grouped singular values on a small target slice.

    Every other tensor is frozen during the fit. Afterwards all parameters are
    trainable again (U, V stay frozen if ``fitcfg.freeze_learngene``).
    """
    subset = fit_subset(target_data, fitcfg)
    if model.families is None:
        raise ContractError("sigma_fit needs a factorized model")
    params = model.parameters()
    sigma = set(model.sigma_names())
    for n, p in params.items():
        p.requires_grad = n in sigma
    if fitcfg.fit_steps:
        train(
            model, subset, fitcfg.fit_steps, lr=fitcfg.lr,
            batch_size=min(fitcfg.batch_size, subset.n_samples), seed=fitcfg.seed,
            sched=sched, trainable=sorted(sigma), log_every=0,
        )
    for n, p in params.items():
        p.requires_grad = not (fitcfg.freeze_learngene and (n.endswith(".U") or n.endswith(".V")))
    return model


def he_random_init(dcfg, rng):
    """Plain model: He-scaled Gaussian matrices, zero biases, unit norms."""
    return DiTModel(dcfg.replace(backing="plain"), fresh_params(dcfg.replace(backing="plain"), rng))


def _plain_source(source):
    return source.to_plain() if source.config.backing == "factorized" else source


def share_init(source, depth):
    """Fill ``depth`` blocks by cycling copies of the source blocks in order."""
    src = _plain_source(source)
    if src.config.depth < 1:
        raise IncompatibilityError("source model has no blocks")
    cfg = src.config.replace(depth=depth)
    params = {}
    copied = 0
    for n, p in src.params.items():
        if not n.startswith("blocks."):
            params[n] = Tensor(p.data.copy(), requires_grad=True)
            copied += p.size
    per_block = [n.split(".", 2)[2] for n in src.params if n.startswith("blocks.0.")]
    for l in range(depth):
        s = l % src.config.depth
        for leaf in per_block:
            params[f"blocks.{l}.{leaf}"] = Tensor(
                src.params[f"blocks.{s}.{leaf}"].data.copy(), requires_grad=True
            )
            if l < src.config.depth:
                copied += src.params[f"blocks.{s}.{leaf}"].size
    model = DiTModel(cfg, params)
    model.transferred = copied
    return model


def truncated_svd(mat, rank):
    u, s, vt = np.linalg.svd(mat, full_matrices=False)
    return (u[:, :rank] * s[:rank]) @ vt[:rank]


def svd_transfer_count(width, hidden, rank, depth):
    return depth * sum(rank * (sum(fz.family_shape(k, width, hidden)) + 1) for k in fz.FAMILY_KINDS)


def svd_transfer_init(source, depth, rank, rng):
    """Per-layer rank-``rank`` SVD truncations of the first ``depth`` source blocks.

    No factors are shared across layers; everything outside the four weight
    families is freshly initialized, as for a learngene-initialized model.
    """
    src = _plain_source(source)
    cfg = src.config.replace(depth=depth)
    if src.config.depth < depth:
        raise ContractError(f"source has {src.config.depth} blocks, cannot fill {depth}")
    limit = min(min(fz.family_shape(k, cfg.width, cfg.hidden)) for k in fz.FAMILY_KINDS)
    if not 1 <= rank <= limit:
        raise ConfigurationError(f"svd rank {rank} must lie in [1, {limit}]")
    params = fresh_params(cfg, rng.split("params"))
    for l in range(depth):
        for kind in fz.FAMILY_KINDS:
            w = src.params[f"blocks.{l}.{kind}.w"].data
            params[f"blocks.{l}.{kind}.w"] = Tensor(truncated_svd(w, rank), requires_grad=True)
    model = DiTModel(cfg, params)
    model.transferred = svd_transfer_count(cfg.width, cfg.hidden, rank, depth)
    return model


def check_source_width(source, dcfg):
    sc = source.config
    if (sc.width, sc.hidden) != (dcfg.width, dcfg.hidden):
        raise IncompatibilityError(
            f"source model has width D={sc.width}, D'={sc.hidden} but the target config has "
            f"D={dcfg.width}, D'={dcfg.hidden}"
        )


@dataclass
class HeRandom:
    id: str = "he"


@dataclass
class ShareInit:
    source: DiTModel
    id: str = "share"


@dataclass
class SvdTransfer:
    """Per-layer truncated SVD of a pretrained source.

    With ``rank=None`` the rank is chosen per depth so the transferred count
    comes closest to ``budget`` (typically a learngene's size).
    """

    source: DiTModel
    rank: int = None
    budget: int = None
    id: str = "svd"

    def rank_for(self, depth):
        if self.rank is not None:
            return self.rank
        if self.budget is None:
            raise ConfigurationError("svd_transfer needs either a rank or a parameter budget")
        cfg = self.source.config
        per_rank = svd_transfer_count(cfg.width, cfg.hidden, 1, depth)
        limit = min(min(fz.family_shape(k, cfg.width, cfg.hidden)) for k in fz.FAMILY_KINDS)
        return int(min(limit, max(1, round(self.budget / per_rank))))


@dataclass
class FineInit:
    """Learngene instantiation plus sigma fit.

    By default the fitted weights are materialized into a plain model, so the
    learngene only initializes and training afterwards is unconstrained. With
    ``keep_factorized`` the shared factors stay live parameters.
    """

    learngene: fz.Learngene
    fit: SigmaFitConfig = field(default_factory=SigmaFitConfig)
    keep_factorized: bool = False
    id: str = "fine"


def initialize(recipe, dcfg, depth, seed, target_data=None, sched=None):
    """Initial model for one recipe; fully determined by (recipe, config, depth, seed)."""
    rng = Rng(seed, ("init", recipe.id, str(depth)))
    cfg = dcfg.replace(depth=depth)
    if isinstance(recipe, HeRandom):
        return he_random_init(cfg, rng)
    if isinstance(recipe, ShareInit):
        check_source_width(recipe.source, cfg)
        return share_init(recipe.source, depth)
    if isinstance(recipe, SvdTransfer):
        check_source_width(recipe.source, cfg)
        return svd_transfer_init(recipe.source, depth, recipe.rank_for(depth), rng)
    if isinstance(recipe, FineInit):
        model = instantiate(recipe.learngene, depth, cfg, rng)
        fit = SigmaFitConfig(**{**recipe.fit.__dict__, "seed": seed})
        model = sigma_fit(model, fit, target_data, sched)
        return model if recipe.keep_factorized or fit.freeze_learngene else model.to_plain()
    raise ConfigurationError(f"unknown init recipe {recipe!r}")
