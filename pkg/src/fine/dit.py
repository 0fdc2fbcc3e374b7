"""A small diffusion transformer for noise prediction.

Block weights come either from plain per-layer tensors or from shared
factorized families (see :mod:`fine.factorized`). Conditioning on timestep and
class is additive: both embeddings are summed into every patch token.
"""

import copy
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import factorized as fz
from .errors import ConfigurationError, ContractError, DimensionError
from .tensor import (
    Tensor,
    as_tensor,
    gelu,
    layer_norm,
    matmul,
    reshape,
    softmax_rows,
    take_rows,
    transpose,
)

BACKINGS = ("plain", "factorized")


@dataclass
class DiTConfig:
    image_size: int = 8
    channels: int = 1
    patch: int = 2
    width: int = 64
    hidden: int = 0  # 0 -> 4 * width
    heads: int = 4
    depth: int = 6
    num_classes: int = 2
    timesteps: int = 400
    backing: str = "plain"
    rank: int = 0  # 0 -> width // 2
    group_size: int = 4

    def __post_init__(self):
        if not self.hidden:
            self.hidden = 4 * self.width
        if not self.rank:
            self.rank = self.width // 2
        if self.image_size % self.patch:
            raise ConfigurationError(
                f"image size {self.image_size} is not divisible by patch size {self.patch}"
            )
        if self.width % self.heads:
            raise ConfigurationError(f"width {self.width} is not divisible by {self.heads} heads")
        if self.width % 2:
            raise ConfigurationError("width must be even for the sinusoidal timestep embedding")
        if self.depth < 1:
            raise ConfigurationError(f"depth must be >= 1, got {self.depth}")
        if self.backing not in BACKINGS:
            raise ConfigurationError(f"backing must be one of {BACKINGS}, got {self.backing!r}")
        if self.backing == "factorized":
            fz.check_rank(self.width, self.hidden, self.rank, self.group_size)

    @property
    def tokens(self):
        return (self.image_size // self.patch) ** 2

    @property
    def patch_dim(self):
        return self.channels * self.patch ** 2

    def replace(self, **changes):
        d = asdict(self)
        d.update(changes)
        return DiTConfig(**d)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def patchify(x, p):
    """``[.., c, h, h]`` image(s) to ``[.., T, c*p*p]`` raster-ordered tokens."""
    x = as_tensor(x)
    if x.ndim not in (3, 4):
        raise DimensionError(f"patchify expects [c,h,h] or [B,c,h,h], got {x.shape}")
    batched = x.ndim == 4
    if not batched:
        x = reshape(x, (1,) + x.shape)
    b, c, h, w = x.shape
    if h % p or w % p:
        raise ConfigurationError(f"image side {h} is not divisible by patch size {p}")
    n = h // p
    t = reshape(x, (b, c, n, p, n, p))
    t = transpose(t, (0, 2, 4, 1, 3, 5))
    t = reshape(t, (b, n * n, c * p * p))
    return t if batched else reshape(t, t.shape[1:])


def unpatchify(tokens, p, c):
    """Inverse of :func:`patchify`."""
    tokens = as_tensor(tokens)
    batched = tokens.ndim == 3
    if not batched:
        tokens = reshape(tokens, (1,) + tokens.shape)
    b, T, _ = tokens.shape
    n = math.isqrt(T)
    if n * n != T or tokens.shape[2] != c * p * p:
        raise DimensionError(f"cannot unpatchify tokens of shape {tokens.shape} with p={p}, c={c}")
    x = reshape(tokens, (b, n, n, c, p, p))
    x = transpose(x, (0, 3, 1, 4, 2, 5))
    x = reshape(x, (b, c, n * p, n * p))
    return x if batched else reshape(x, x.shape[1:])


def attention_block(hseq, w_qkv, w_o, n_heads, b_qkv=None, b_o=None, return_probs=False):
    """Multi-head self-attention over the token axis (no residual)."""
    hseq = as_tensor(hseq)
    single = hseq.ndim == 2
    x = reshape(hseq, (1,) + hseq.shape) if single else hseq
    B, T, D = x.shape
    if D % n_heads:
        raise DimensionError(f"width {D} not divisible by {n_heads} heads")
    if w_qkv.shape != (D, 3 * D) or w_o.shape != (D, D):
        raise DimensionError(
            f"attention weights {w_qkv.shape}, {w_o.shape} do not fit width {D}"
        )
    d = D // n_heads
    qkv = matmul(x, w_qkv)
    if b_qkv is not None:
        qkv = qkv + b_qkv
    qkv = transpose(reshape(qkv, (B, T, 3, n_heads, d)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    probs = softmax_rows(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    z = reshape(transpose(matmul(probs, v), (0, 2, 1, 3)), (B, T, D))
    out = matmul(z, w_o)
    if b_o is not None:
        out = out + b_o
    if single:
        out = reshape(out, (T, D))
    return (out, probs) if return_probs else out


def pff_block(u, w_in, b1, w_out, b2):
    """Tokenwise two-layer feedforward with GELU in between."""
    u = as_tensor(u)
    D = u.shape[-1]
    if w_in.shape[0] != D or w_out.shape != (w_in.shape[1], D):
        raise DimensionError(
            f"feedforward weights {w_in.shape}, {w_out.shape} do not fit width {D}"
        )
    return matmul(gelu(matmul(u, w_in) + b1), w_out) + b2


def timestep_features(t, dim):
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


def _he(rng, fan_in, shape):
    return rng.normal(size=shape, scale=math.sqrt(2.0 / fan_in))


def fresh_params(cfg, rng, block_weights=True):
    """Freshly initialized parameters: He-scaled matrices, zero biases, unit norms.

    With ``block_weights=False`` the four per-block weight families are left
    out (a factorized model supplies them).
    """
    D, Dp, pd = cfg.width, cfg.hidden, cfg.patch_dim
    p = {}

    def w(name, shape):
        p[name] = Tensor(_he(rng.split(name), shape[0], shape), requires_grad=True)

    def zeros(name, shape):
        p[name] = Tensor(np.zeros(shape), requires_grad=True)

    def ones(name, shape):
        p[name] = Tensor(np.ones(shape), requires_grad=True)

    w("patch.w", (pd, D))
    zeros("patch.b", (D,))
    p["pos"] = Tensor(rng.split("pos").normal(size=(cfg.tokens, D), scale=0.02), requires_grad=True)
    w("temb.w", (D, D))
    zeros("temb.b", (D,))
    p["cls"] = Tensor(
        rng.split("cls").normal(size=(cfg.num_classes + 1, D), scale=0.02), requires_grad=True
    )
    for l in range(cfg.depth):
        pre = f"blocks.{l}."
        ones(pre + "ln1.g", (D,))
        zeros(pre + "ln1.b", (D,))
        zeros(pre + "qkv.b", (3 * D,))
        zeros(pre + "o.b", (D,))
        ones(pre + "ln2.g", (D,))
        zeros(pre + "ln2.b", (D,))
        zeros(pre + "in.b", (Dp,))
        zeros(pre + "out.b", (D,))
        if block_weights:
            for kind in fz.FAMILY_KINDS:
                w(pre + kind + ".w", fz.family_shape(kind, D, Dp))
    ones("final.g", (D,))
    zeros("final.b", (D,))
    w("head.w", (D, pd))
    zeros("head.b", (pd,))
    return p


class DiTModel:
    """Noise-prediction transformer ``eps_theta(z_t | c, t)``."""

    def __init__(self, config, params, families=None):
        self.config = config
        self.params = params
        self.families = families
        self.transferred = 0
        self.fitted_at_init = None
        if config.backing == "factorized":
            if families is None or sorted(families) != sorted(fz.FAMILY_KINDS):
                raise ContractError("factorized backing needs all four weight families")
            for f in families.values():
                if f.depth != config.depth:
                    raise ContractError(
                        f"family {f.kind} has {f.depth} sigma vectors, model depth is {config.depth}"
                    )
        elif families is not None:
            raise ContractError("plain backing takes no families")

    def parameters(self):
        """All parameters by name, in a stable order."""
        out = dict(self.params)
        if self.families is not None:
            for kind in fz.FAMILY_KINDS:
                f = self.families[kind]
                out[f"fam.{kind}.U"] = f.U
                out[f"fam.{kind}.V"] = f.V
                for l, s in enumerate(f.sigmas):
                    out[f"fam.{kind}.sigma.{l}"] = s
        return out

    def sigma_names(self):
        return [n for n in self.parameters() if ".sigma." in n]

    def weight(self, layer, kind):
        if self.families is not None:
            return fz.materialize(self.families[kind], layer)
        return self.params[f"blocks.{layer}.{kind}.w"]

    def weight_array(self, layer, kind):
        if self.families is not None:
            return fz.materialize_array(self.families[kind], layer)
        return self.params[f"blocks.{layer}.{kind}.w"].data

    def _class_index(self, class_id, batch):
        K = self.config.num_classes
        if class_id is None:
            return np.full(batch, K, dtype=np.int64)
        idx = np.asarray(class_id, dtype=np.int64).reshape(-1)
        if idx.size == 1 and batch > 1:
            idx = np.full(batch, idx[0])
        if idx.size != batch:
            raise ContractError(f"got {idx.size} class ids for a batch of {batch}")
        if np.any(idx >= K) or np.any(idx < -1):
            raise ContractError(f"class id out of range for {K} classes: {idx}")
        return np.where(idx < 0, K, idx)

    def forward(self, z, t, class_id=None):
        """Predict the noise in ``z`` (``[c,h,h]`` or ``[B,c,h,h]``) at step ``t``.

        ``class_id`` may be None (unconditional), an int, or one id per batch
        item where -1 marks the unconditional embedding.
        """
        cfg = self.config
        z = as_tensor(z)
        single = z.ndim == 3
        x = reshape(z, (1,) + z.shape) if single else z
        B = x.shape[0]
        if x.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
            raise DimensionError(f"input {z.shape} does not match model config {cfg}")
        ts = np.asarray(t, dtype=np.int64).reshape(-1)
        if ts.size == 1 and B > 1:
            ts = np.full(B, ts[0])
        if ts.size != B or np.any(ts < 0) or np.any(ts >= cfg.timesteps):
            raise ContractError(f"timestep(s) {t} outside [0, {cfg.timesteps})")
        P = self.params
        h = matmul(patchify(x, cfg.patch), P["patch.w"]) + P["patch.b"] + P["pos"]
        cond = matmul(Tensor(timestep_features(ts, cfg.width)), P["temb.w"]) + P["temb.b"]
        cond = cond + take_rows(P["cls"], self._class_index(class_id, B))
        h = h + reshape(cond, (B, 1, cfg.width))
        for l in range(cfg.depth):
            pre = f"blocks.{l}."
            a = layer_norm(h, P[pre + "ln1.g"], P[pre + "ln1.b"])
            h = h + attention_block(
                a, self.weight(l, "qkv"), self.weight(l, "o"), cfg.heads,
                P[pre + "qkv.b"], P[pre + "o.b"],
            )
            u = layer_norm(h, P[pre + "ln2.g"], P[pre + "ln2.b"])
            h = h + pff_block(
                u, self.weight(l, "in"), P[pre + "in.b"], self.weight(l, "out"), P[pre + "out.b"]
            )
        out = matmul(layer_norm(h, P["final.g"], P["final.b"]), P["head.w"]) + P["head.b"]
        out = unpatchify(out, cfg.patch, cfg.channels)
        return reshape(out, out.shape[1:]) if single else out

    __call__ = forward

    def to_plain(self):
        """Detached plain-backed copy with every factorized weight materialized."""
        cfg = self.config.replace(backing="plain")
        params = {n: Tensor(p.data.copy(), requires_grad=True) for n, p in self.params.items()}
        for l in range(cfg.depth):
            for kind in fz.FAMILY_KINDS:
                params[f"blocks.{l}.{kind}.w"] = Tensor(
                    self.weight_array(l, kind).copy(), requires_grad=True
                )
        model = DiTModel(cfg, params)
        model.transferred = self.transferred
        model.fitted_at_init = fz.count_params(self)["trainable_at_init"]
        return model

    def copy(self):
        return copy.deepcopy(self)

    def snapshot(self):
        """``{name: array copy}`` of every parameter."""
        return {n: p.data.copy() for n, p in self.parameters().items()}


def build_model(cfg, named_arrays, requires_grad=True):
    """Reassemble a model from a flat ``{name: array}`` mapping."""
    def t(name):
        try:
            return Tensor(np.array(named_arrays[name], dtype=np.float64), requires_grad=requires_grad)
        except KeyError:
            raise ContractError(f"missing parameter {name!r}") from None

    fam_names = {n for n in named_arrays if n.startswith("fam.")}
    params = {n: t(n) for n in named_arrays if n not in fam_names}
    families = None
    if cfg.backing == "factorized":
        families = {}
        for kind in fz.FAMILY_KINDS:
            sig = [t(f"fam.{kind}.sigma.{l}") for l in range(cfg.depth)]
            families[kind] = fz.FactorizedFamily(
                kind, t(f"fam.{kind}.U"), t(f"fam.{kind}.V"), sig, cfg.rank, cfg.group_size
            )
    return DiTModel(cfg, params, families)
