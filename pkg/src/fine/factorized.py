"""Cross-layer shared low-rank factorization of transformer weight families.

Each of the four per-block weight families ``qkv, o, in, out`` is stored as a
pair of shared factors ``U`` (m1 x r) and ``V`` (m2 x r) plus one grouped
singular-value vector per layer. Layer ``l``'s weight is always computed as
``U @ diag(expand(sigma[l])) @ V.T``; it never exists on its own.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractError
from .tensor import Tensor, matmul, mul, record_op, transpose

FAMILY_KINDS = ("qkv", "o", "in", "out")
LEARNGENE_FORMAT_VERSION = 1


def family_shape(kind, width, hidden):
    """``(m1, m2)`` of a weight family for model width D and hidden width D'."""
    shapes = {
        "qkv": (width, 3 * width),
        "o": (width, width),
        "in": (width, hidden),
        "out": (hidden, width),
    }
    try:
        return shapes[kind]
    except KeyError:
        raise ConfigurationError(f"unknown weight family {kind!r}") from None


def n_groups(rank, group_size):
    return math.ceil(rank / group_size)


def expand_sigma(grouped, rank, group_size):
    """Repeat each grouped value over its block of ``group_size`` positions.

    Entry ``j`` of the result is ``grouped[j // group_size]``; the backward pass
    sums adjoints within each block.
    """
    if grouped.ndim != 1 or grouped.shape[0] != n_groups(rank, group_size):
        raise ContractError(
            f"expand_sigma: expected {n_groups(rank, group_size)} grouped values for "
            f"r={rank}, s={group_size}, got shape {grouped.shape}"
        )
    starts = np.arange(0, rank, group_size)
    data = np.repeat(grouped.data, group_size)[:rank]
    return record_op(data, (grouped,), lambda g: (np.add.reduceat(g, starts),))


@dataclass
class FactorizedFamily:
    kind: str
    U: Tensor
    V: Tensor
    sigmas: list
    rank: int
    group_size: int

    @property
    def depth(self):
        return len(self.sigmas)

    @property
    def shape(self):
        return (self.U.shape[0], self.V.shape[0])


def materialize(family, layer):
    """Weight matrix of one layer, differentiable w.r.t. U, V and that sigma."""
    if not 0 <= layer < family.depth:
        raise IndexError(f"layer {layer} out of range for depth {family.depth}")
    sig = expand_sigma(family.sigmas[layer], family.rank, family.group_size)
    return matmul(mul(family.U, sig), transpose(family.V))


def materialize_array(family, layer):
    """Tape-free float64 copy of :func:`materialize`, for inspection."""
    grouped = family.sigmas[layer].data
    sig = np.repeat(grouped, family.group_size)[: family.rank]
    return (family.U.data * sig) @ family.V.data.T


def _orthonormal(rows, cols, rng):
    q, r = np.linalg.qr(rng.normal(size=(rows, cols)))
    # Fix the sign ambiguity of QR so the factor is a function of the draw.
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def check_rank(width, hidden, rank, group_size):
    limit = min(min(family_shape(k, width, hidden)) for k in FAMILY_KINDS)
    if not 1 <= rank <= limit:
        raise ConfigurationError(f"rank r={rank} must lie in [1, {limit}] for D={width}, D'={hidden}")
    if not 1 <= group_size <= rank:
        raise ConfigurationError(f"group size s={group_size} must lie in [1, r={rank}]")


def init_shared_factors(width, hidden, rank, group_size, depth, rng):
    """Four families with column-orthonormal U, V and sigma groups ~ N(0, 1/r)."""
    check_rank(width, hidden, rank, group_size)
    if depth < 1:
        raise ConfigurationError(f"depth must be >= 1, got {depth}")
    g = n_groups(rank, group_size)
    families = []
    for kind in FAMILY_KINDS:
        m1, m2 = family_shape(kind, width, hidden)
        frng = rng.split(kind)
        U = Tensor(_orthonormal(m1, rank, frng.split("U")), requires_grad=True)
        V = Tensor(_orthonormal(m2, rank, frng.split("V")), requires_grad=True)
        srng = frng.split("sigma")
        sigmas = [
            Tensor(srng.normal(size=g, scale=1.0 / math.sqrt(rank)), requires_grad=True)
            for _ in range(depth)
        ]
        families.append(FactorizedFamily(kind, U, V, sigmas, rank, group_size))
    return families


def fit_shared_factorization(mats, rank, group_size=1):
    """Least-squares shared-(U, V) fit to a stack of same-shaped matrices.

    U and V are the leading singular vectors of the horizontally / vertically
    stacked matrices; each layer's grouped sigma is then the least-squares
    optimum given those orthonormal factors.
    """
    mats = [np.asarray(m, dtype=np.float64) for m in mats]
    U = np.linalg.svd(np.concatenate(mats, axis=1), full_matrices=False)[0][:, :rank]
    V = np.linalg.svd(np.concatenate(mats, axis=0), full_matrices=False)[2][:rank].T
    g = n_groups(rank, group_size)
    sigmas = []
    for m in mats:
        diag = np.einsum("ir,ij,jr->r", U, m, V)
        grouped = np.array(
            [diag[i * group_size:(i + 1) * group_size].mean() for i in range(g)]
        )
        sigmas.append(grouped)
    return U, V, sigmas


@dataclass
class Learngene:
    """The four shared (U, V) pairs and the structure they were condensed with.

    Deliberately holds neither sigma values nor a layer count.
    """

    factors: dict
    width: int
    hidden: int
    rank: int
    group_size: int
    condensation_steps: int = 0
    seed: int = 0
    format_version: int = LEARNGENE_FORMAT_VERSION
    extra: dict = field(default_factory=dict)

    def tensors(self):
        out = {}
        for kind in FAMILY_KINDS:
            U, V = self.factors[kind]
            out[f"U_{kind}"] = U
            out[f"V_{kind}"] = V
        return out

    def meta(self):
        return {
            "D": self.width,
            "D_prime": self.hidden,
            "r": self.rank,
            "s": self.group_size,
            "condensation_steps": self.condensation_steps,
            "seed": self.seed,
            "format_version": self.format_version,
        }

    @property
    def n_params(self):
        return sum(U.size + V.size for U, V in self.factors.values())


def extract_learngene(families, meta=None):
    """Copy the shared factors out of trained families, discarding sigma."""
    meta = dict(meta or {})
    by_kind = {f.kind: f for f in families}
    if sorted(by_kind) != sorted(FAMILY_KINDS) or len(families) != 4:
        raise ContractError(f"need exactly the families {FAMILY_KINDS}, got {[f.kind for f in families]}")
    ranks = {f.rank for f in families}
    groups = {f.group_size for f in families}
    width = by_kind["o"].U.shape[0]
    hidden = by_kind["in"].V.shape[0]
    if len(ranks) != 1 or len(groups) != 1:
        raise ContractError(f"families disagree on rank/grouping: r={ranks}, s={groups}")
    for f in families:
        if f.shape != family_shape(f.kind, width, hidden):
            raise ContractError(
                f"family {f.kind} has shape {f.shape}, inconsistent with D={width}, D'={hidden}"
            )
    for key, val in (("D", width), ("D_prime", hidden), ("r", ranks.pop()), ("s", groups.pop())):
        if key in meta and meta[key] != val:
            raise ContractError(f"metadata {key}={meta[key]} disagrees with families ({val})")
        meta[key] = val
    factors = {k: (by_kind[k].U.data.copy(), by_kind[k].V.data.copy()) for k in FAMILY_KINDS}
    return Learngene(
        factors=factors,
        width=meta["D"],
        hidden=meta["D_prime"],
        rank=meta["r"],
        group_size=meta["s"],
        condensation_steps=int(meta.get("condensation_steps", 0)),
        seed=int(meta.get("seed", 0)),
    )


def transferred_count(width, hidden, rank):
    """Parameters carried by a learngene: sum over families of r * (m1 + m2)."""
    return sum(rank * sum(family_shape(k, width, hidden)) for k in FAMILY_KINDS)


def count_params(obj):
    """``{total, transferred, trainable_at_init}`` for a model or a learngene.

    For a factorized model, ``trainable_at_init`` is the number of grouped
    sigma scalars fitted during initialization (4 * L * ceil(r / s)). For a
    plain model it is every trainable parameter, unless the model was
    materialized from a factorized one, which keeps the fitted sigma count.
    ``transferred`` comes from whatever the initializer recorded on the model.
    """
    if isinstance(obj, Learngene):
        n = obj.n_params
        return {"total": n, "transferred": n, "trainable_at_init": 0}
    params = obj.parameters()
    total = sum(p.size for p in params.values())
    cfg = obj.config
    if cfg.backing == "factorized":
        transferred = transferred_count(cfg.width, cfg.hidden, cfg.rank)
        trainable = 4 * cfg.depth * n_groups(cfg.rank, cfg.group_size)
    else:
        transferred = int(getattr(obj, "transferred", 0))
        trainable = getattr(obj, "fitted_at_init", None)
        if trainable is None:
            trainable = sum(p.size for p in params.values() if p.requires_grad)
    return {"total": total, "transferred": transferred, "trainable_at_init": trainable}
