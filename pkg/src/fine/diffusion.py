"""DDPM forward noising, epsilon-prediction loss, ancestral sampling and EMA."""

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor, mse, no_grad

EMA_DECAY = 0.9999
COND_DROP_PROB = 0.1


@dataclass
class DiffusionSchedule:
    timesteps: int = 400
    beta_start: float = 1e-4
    beta_end: float = 2e-2

    def __post_init__(self):
        if self.timesteps < 2:
            raise ContractError("need at least two diffusion steps")
        self.beta = np.linspace(self.beta_start, self.beta_end, self.timesteps)
        if not (0 < self.beta[0] and self.beta[-1] < 1 and np.all(np.diff(self.beta) > 0)):
            raise ContractError("betas must be strictly increasing inside (0, 1)")
        self.alpha = 1.0 - self.beta
        self.alpha_bar = np.cumprod(self.alpha)

    def to_dict(self):
        return {"timesteps": self.timesteps, "beta_start": self.beta_start, "beta_end": self.beta_end}


def _coef(values, t, ndim):
    c = np.asarray(values[np.asarray(t)], dtype=np.float64)
    return c.reshape(c.shape + (1,) * (ndim - c.ndim)) if c.ndim else c


def q_sample(z0, t, eps, sched):
    """``sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps``; ``t`` may be per batch item."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise DimensionError(f"q_sample: z0 {z0.shape} and eps {eps.shape} differ")
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= sched.timesteps):
        raise ContractError(f"timestep outside [0, {sched.timesteps})")
    ab = _coef(sched.alpha_bar, t, z0.ndim)
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def draw_noise(z0, class_id, sched, rng, drop_prob=COND_DROP_PROB):
    """Sample ``(t, eps, class ids after condition dropout)`` for a batch."""
    z0 = np.asarray(z0)
    B = z0.shape[0]
    t = rng.integers(0, sched.timesteps, size=B)
    eps = rng.normal(size=z0.shape)
    keep = rng.random(B) >= drop_prob
    if class_id is None:
        cls = None
    else:
        cls = np.where(keep, np.broadcast_to(np.asarray(class_id), (B,)), -1)
    return t, eps, cls


def ddpm_loss(model, z0, class_id, sched, rng=None, t=None, eps=None):
    """Mean squared error between injected and predicted noise.

    ``t`` and ``eps`` are drawn from ``rng`` unless both are given; when drawn,
    each class label is replaced by the unconditional embedding with
    probability 0.1. Passing ``t``/``eps`` pins the randomness and uses
    ``class_id`` as given.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    if t is None or eps is None:
        if rng is None:
            raise ContractError("ddpm_loss needs an rng unless t and eps are pinned")
        t, eps, class_id = draw_noise(z0, class_id, sched, rng)
    zt = q_sample(z0, t, eps, sched)
    return mse(model(zt, t, class_id), Tensor(eps))


def sample(model, sched, n, class_id=None, rng=None, batch_size=256, clip=True):
    """DDPM ancestral sampling from pure noise; returns an ``[n,c,h,h]`` array."""
    cfg = model.config
    shape = (cfg.channels, cfg.image_size, cfg.image_size)
    z = rng.split("init").normal(size=(n,) + shape)
    step_rng = rng.split("steps")
    cls = None if class_id is None else np.broadcast_to(np.asarray(class_id), (n,))
    with no_grad():
        for t in range(sched.timesteps - 1, -1, -1):
            noise = step_rng.normal(size=z.shape) if t > 0 else None
            for lo in range(0, n, batch_size):
                hi = min(n, lo + batch_size)
                part = z[lo:hi]
                eps = model(part, np.full(hi - lo, t), None if cls is None else cls[lo:hi])
                eps = eps.data if isinstance(eps, Tensor) else np.asarray(eps)
                mean = (part - sched.beta[t] / np.sqrt(1.0 - sched.alpha_bar[t]) * eps) / np.sqrt(
                    sched.alpha[t]
                )
                if t > 0:
                    mean = mean + np.sqrt(sched.beta[t]) * noise[lo:hi]
                z[lo:hi] = mean
    return np.clip(z, -1.0, 1.0) if clip else z


class EmaModel:
    """Exponential moving average of a model's trainable parameters."""

    def __init__(self, model, decay=EMA_DECAY):
        self.decay = decay
        self.shadow = {
            n: p.data.copy() for n, p in model.parameters().items() if p.requires_grad
        }

    def copy_to(self, model):
        params = model.parameters()
        for n, s in self.shadow.items():
            params[n].data = s.copy()


def ema_update(ema, model, decay=None):
    """``shadow <- decay * shadow + (1 - decay) * param`` for every tracked tensor."""
    d = ema.decay if decay is None else decay
    params = model.parameters()
    missing = sorted(set(ema.shadow) - set(params))
    bad = [n for n, s in ema.shadow.items() if n in params and params[n].shape != s.shape]
    if missing or bad:
        raise ContractError(
            f"EMA shadow does not match the model (missing {missing}, shape mismatch {bad})"
        )
    for n, s in ema.shadow.items():
        s *= d
        s += (1.0 - d) * params[n].data
