"""Gaussian-Frechet sample metric and the convergence benchmark harness."""

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .condense import initialize, train
from .diffusion import DiffusionSchedule, sample
from .errors import (
    ConfigurationError,
    ContractError,
    DivergenceError,
    IncompatibilityError,
)
from .factorized import count_params
from .rng import Rng

log = logging.getLogger(__name__)

MA_WINDOW = 100
TARGET_FACTOR = 1.05
PROJECTION_DIM = 64
COV_JITTER = 1e-6


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def dim(self):
        return self.mean.shape[0]


def _psd_sqrt(c):
    w, v = np.linalg.eigh(0.5 * (c + c.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a, b):
    """``|mu_a - mu_b|^2 + tr(Ca + Cb - 2 (Ca Cb)^(1/2))``.

    The trace of the square root is taken from the eigenvalues of the
    symmetric product ``Ca^(1/2) Cb Ca^(1/2)``, clipped at zero.
    """
    if a.mean.shape != b.mean.shape or a.cov.shape != b.cov.shape:
        raise ContractError(f"stats have different dimensions: {a.dim} vs {b.dim}")
    diff = a.mean - b.mean
    s = _psd_sqrt(a.cov)
    m = s @ b.cov @ s
    tr_sqrt = np.sqrt(np.clip(np.linalg.eigvalsh(0.5 * (m + m.T)), 0.0, None)).sum()
    d = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_sqrt)
    return max(d, 0.0)


def random_projection(dim, out=PROJECTION_DIM, seed=0):
    """Fixed ``dim x min(dim, out)`` matrix with orthonormal columns."""
    k = min(dim, out)
    g = Rng(seed, ("projection", str(dim), str(k))).normal(size=(dim, k))
    q, r = np.linalg.qr(g)
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def feature_stats(samples, projection=None):
    """Mean and covariance (plus 1e-6 I) of flattened, optionally projected samples."""
    x = np.asarray(samples, dtype=np.float64)
    if x.shape[0] == 0:
        raise ContractError("feature_stats needs at least one sample")
    x = x.reshape(x.shape[0], -1)
    if projection is not None:
        x = x @ projection
    mu = x.mean(axis=0)
    if x.shape[0] > 1:
        xc = x - mu
        cov = xc.T @ xc / (x.shape[0] - 1)
    else:
        cov = np.zeros((x.shape[1], x.shape[1]))
    return GaussianStats(mu, cov + COV_JITTER * np.eye(x.shape[1]))


def surrogate_distance(samples_a, samples_b, seed=0):
    """Frechet distance between projected pixel statistics of two sample sets."""
    a = np.asarray(samples_a).reshape(len(samples_a), -1)
    proj = random_projection(a.shape[1], seed=seed)
    return frechet_distance(feature_stats(a, proj), feature_stats(samples_b, proj))


def moving_average(values, window=MA_WINDOW):
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        return np.empty(0)
    c = np.cumsum(np.concatenate([[0.0], v]))
    return (c[window:] - c[:-window]) / window


def steps_to_target(losses, target, window=MA_WINDOW):
    """Training steps taken when the trailing ``window``-step mean first reaches ``target``.

    Returns None when the target is never reached.
    """
    ma = moving_average(losses, window)
    hit = np.nonzero(ma <= target)[0]
    return int(hit[0]) + window if hit.size else None


@dataclass
class BenchResult:
    recipe: str
    depth: int
    seed: int
    losses: list = field(default_factory=list)
    steps_to_target: object = None
    target_loss: float = None
    frechet: float = None
    params_transferred: int = 0
    stream_seed: int = None
    error: str = None

    @property
    def curve(self):
        return list(enumerate(self.losses))

    @property
    def failed(self):
        return self.error is not None


def eval_frechet(model, sched, reference, n, seed, batch_size=256):
    """Surrogate Frechet distance between ``n`` model samples and ``reference`` images."""
    K = model.config.num_classes
    cls = (np.arange(n) % K) if K else None
    gen = sample(model, sched, n, cls, Rng(seed, ("eval-sample",)), batch_size=batch_size)
    return surrogate_distance(reference, gen)


def run_benchmark(recipes, depths, seeds, train_steps, target_loss=None, *, dcfg, data,
                  sched=None, lr=1e-4, batch_size=16, eval_samples=1024, on_result=None):
    """Initialize and train every (recipe, depth, seed); compare convergence.

    All recipes at one seed see the same shuffled data stream and noise draws.
    When ``target_loss`` is None it is set per depth to 1.05 x the best
    moving-average loss that every ``he`` baseline run reached.
    """
    sched = sched or DiffusionSchedule(dcfg.timesteps)
    results = []
    for depth in depths:
        for recipe in recipes:
            for seed in seeds:
                res = BenchResult(recipe.id, depth, seed, stream_seed=seed)
                try:
                    model = initialize(recipe, dcfg, depth, seed, data, sched)
                    res.params_transferred = count_params(model)["transferred"]
                    res.losses = train(
                        model, data, train_steps, lr=lr, batch_size=batch_size, seed=seed,
                        sched=sched, log_every=0,
                    )
                    if eval_samples:
                        res.frechet = eval_frechet(model, sched, data.images, eval_samples, seed)
                except (ContractError, ConfigurationError, IncompatibilityError, DivergenceError) as e:
                    res.error = f"{type(e).__name__}: {e}"
                    log.warning("run %s/L%d/seed %d failed: %s", recipe.id, depth, seed, e)
                log.info("finished %s L%d seed %d", recipe.id, depth, seed)
                results.append(res)
                if on_result is not None:
                    on_result(res)
    targets = {}
    for depth in depths:
        if target_loss is not None:
            targets[depth] = target_loss
            continue
        best = [
            float(moving_average(r.losses).min())
            for r in results
            if r.recipe == "he" and r.depth == depth and not r.failed and len(r.losses) >= MA_WINDOW
        ]
        if not best:
            raise ContractError("target_loss not given and no he baseline run to derive it from")
        targets[depth] = TARGET_FACTOR * max(best)
    for r in results:
        r.target_loss = targets[r.depth]
        if not r.failed:
            r.steps_to_target = steps_to_target(r.losses, r.target_loss)
    return results


def speedups(results, baseline="he", candidate="fine"):
    """``steps(baseline) / steps(candidate)`` per (depth, seed); None where undefined."""
    by = {(r.recipe, r.depth, r.seed): r for r in results}
    out = {}
    for (rec, depth, seed), r in by.items():
        if rec != candidate:
            continue
        b = by.get((baseline, depth, seed))
        if b is None or b.steps_to_target is None or r.steps_to_target is None:
            out[(depth, seed)] = None
        else:
            out[(depth, seed)] = b.steps_to_target / r.steps_to_target
    return out


def _mean_sd(values):
    vals = [v for v in values if v is not None and not (isinstance(v, float) and math.isnan(v))]
    if not vals:
        return None, None
    sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    return float(np.mean(vals)), sd


def aggregate_report(results):
    """One row per (recipe, depth): mean and sd over seeds, misses excluded."""
    if not results:
        raise ContractError("aggregate_report needs at least one result")
    groups = {}
    for r in results:
        groups.setdefault((r.recipe, r.depth), []).append(r)
    rows = []
    for (recipe, depth), rs in sorted(groups.items()):
        ok = [r for r in rs if not r.failed]
        steps_m, steps_sd = _mean_sd([r.steps_to_target for r in ok])
        fr_m, fr_sd = _mean_sd([r.frechet for r in ok])
        para, _ = _mean_sd([r.params_transferred for r in ok])
        rows.append({
            "recipe": recipe,
            "depth": depth,
            "runs": len(rs),
            "failed": len(rs) - len(ok),
            "reached": sum(r.steps_to_target is not None for r in ok),
            "steps_mean": steps_m,
            "steps_sd": steps_sd,
            "frechet_mean": fr_m,
            "frechet_sd": fr_sd,
            "params_transferred": para,
        })
    return rows


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def write_curves_csv(results, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["recipe", "depth", "seed", "step", "loss"])
        for r in results:
            for step, loss in enumerate(r.losses):
                w.writerow([r.recipe, r.depth, r.seed, step, _fmt(loss)])


def write_summary_csv(results, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["recipe", "depth", "seed", "steps_to_target", "frechet", "params_transferred"])
        for r in results:
            w.writerow([r.recipe, r.depth, r.seed, _fmt(r.steps_to_target), _fmt(r.frechet),
                        _fmt(r.params_transferred)])


REPORT_COLUMNS = ["recipe", "depth", "runs", "failed", "reached", "steps_mean", "steps_sd",
                  "frechet_mean", "frechet_sd", "params_transferred"]


def write_report_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])


def report_markdown(rows):
    def pm(m, sd, digits):
        return "n/a" if m is None else f"{m:.{digits}f} ± {sd:.{digits}f}"

    lines = [
        "| recipe | depth | steps to target | Fréchet | Para. | reached |",
        "|---|---:|---:|---:|---:|---:|",
    ]
    for row in rows:
        para = "n/a" if row["params_transferred"] is None else f"{row['params_transferred']:.0f}"
        lines.append(
            f"| {row['recipe']} | {row['depth']} | {pm(row['steps_mean'], row['steps_sd'], 0)} | "
            f"{pm(row['frechet_mean'], row['frechet_sd'], 3)} | {para} | "
            f"{row['reached']}/{row['runs'] - row['failed']} |"
        )
    return "\n".join(lines) + "\n"
