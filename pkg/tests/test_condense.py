import math

import numpy as np
import pytest

from fine import factorized as fz
from fine.condense import (
    CondenseConfig,
    FineInit,
    HeRandom,
    ShareInit,
    SigmaFitConfig,
    SvdTransfer,
    condense,
    fit_subset,
    frozen_noise_loss,
    he_random_init,
    initialize,
    instantiate,
    share_init,
    sigma_fit,
    svd_transfer_count,
    svd_transfer_init,
    train,
    truncated_svd,
)
from fine.data import make_dataset
from fine.diffusion import DiffusionSchedule
from fine.dit import DiTConfig
from fine.errors import ConfigurationError, ContractError, DivergenceError, IncompatibilityError
from fine.rng import Rng


@pytest.fixture(scope="module")
def small_setup():
    cfg = DiTConfig(width=16, heads=2, depth=3, timesteps=50, rank=8, group_size=4, backing="factorized")
    data = make_dataset("shapes-A", 256, 8, seed=0)
    sched = DiffusionSchedule(50)
    lg, aux = condense(CondenseConfig(model=cfg, steps=60, lr=1e-3, n_samples=256, log_every=0), data, sched)
    return cfg, data, sched, lg, aux


def test_condense_returns_learngene_and_aux(small_setup):
    cfg, _, _, lg, aux = small_setup
    assert (lg.width, lg.hidden, lg.rank, lg.group_size) == (16, 64, 8, 4)
    assert lg.condensation_steps == 60 and len(aux.losses) == 60
    for kind in fz.FAMILY_KINDS:
        assert np.array_equal(lg.factors[kind][0], aux.families[kind].U.data)
    # every parameter class moved during condensation
    fresh = condense(CondenseConfig(model=cfg, steps=0, n_samples=256), small_setup[1], small_setup[2])[1]
    moved = {n for n, p in aux.parameters().items() if not np.array_equal(p.data, fresh.parameters()[n].data)}
    assert {"fam.qkv.U", "fam.out.V", "fam.o.sigma.2", "patch.w", "blocks.1.ln2.g", "head.b"} <= moved


def test_condense_is_deterministic(small_setup):
    cfg, data, sched, lg, _ = small_setup
    lg2, _ = condense(CondenseConfig(model=cfg, steps=60, lr=1e-3, n_samples=256, log_every=0), data, sched)
    for kind in fz.FAMILY_KINDS:
        for a, b in zip(lg.factors[kind], lg2.factors[kind]):
            assert np.array_equal(a, b)


def test_condense_requires_factorized(small_setup):
    cfg, data, sched, _, _ = small_setup
    with pytest.raises(ConfigurationError):
        condense(CondenseConfig(model=cfg.replace(backing="plain"), steps=1), data, sched)


def test_divergence_reports_step_and_last_loss(small_setup):
    cfg, data, sched, _, _ = small_setup
    model = he_random_init(cfg, Rng(0))

    def poison(step, val, m):
        if step == 2:
            m.params["head.b"].data[:] = np.nan

    with pytest.raises(DivergenceError) as e:
        train(model, data, 10, sched=sched, log_every=0, on_step=poison)
    assert e.value.step == 3 and math.isfinite(e.value.last_finite)


def test_instantiate_contract(small_setup):
    cfg, _, _, lg, _ = small_setup
    for depth in (1, 4, 12):
        m = instantiate(lg, depth, cfg, Rng(0))
        assert m.config.depth == depth
        c = fz.count_params(m)
        assert c["transferred"] == fz.transferred_count(16, 64, 8)
        assert c["trainable_at_init"] == 4 * depth * 2
        for kind in fz.FAMILY_KINDS:
            f = m.families[kind]
            assert not f.U.requires_grad and not f.V.requires_grad
            assert np.array_equal(f.U.data, lg.factors[kind][0])
        assert not any(m.params[f"blocks.0.{b}"].data.any() for b in ("qkv.b", "o.b", "in.b", "out.b"))
        assert np.all(m.params["blocks.0.ln1.g"].data == 1.0)
    with pytest.raises(IncompatibilityError, match=r"D=16.*D=32"):
        instantiate(lg, 4, cfg.replace(width=32, hidden=0, rank=0), Rng(0))


def test_instantiate_sigma_scale(small_setup):
    _, _, _, lg, _ = small_setup
    m = instantiate(lg, 200, DiTConfig(width=16, heads=2, depth=1), Rng(0))
    vals = np.concatenate([m.parameters()[n].data for n in m.sigma_names()])
    assert abs(vals.var() - 1 / 8) < 0.1 / 8


def test_full_step_keeps_frozen_factors(small_setup):
    cfg, data, sched, lg, _ = small_setup
    m = instantiate(lg, 4, cfg, Rng(0))
    before = m.snapshot()
    train(m, data, 1, sched=sched, log_every=0)
    after = m.snapshot()
    assert all(np.array_equal(before[n], after[n]) for n in before if n.endswith((".U", ".V")))
    assert not np.array_equal(before["fam.qkv.sigma.0"], after["fam.qkv.sigma.0"])


def test_sigma_fit_touches_only_sigma(small_setup):
    cfg, _, sched, lg, _ = small_setup
    target = make_dataset("shapes-B", 256, 8, seed=0)
    m = instantiate(lg, 4, cfg, Rng(0))
    before = m.snapshot()
    sigma_fit(m, SigmaFitConfig(fit_steps=20), target, sched)
    after = m.snapshot()
    changed = {n for n in before if not np.array_equal(before[n], after[n])}
    assert changed == set(m.sigma_names())
    # afterwards everything is trainable again, learngene included
    assert all(p.requires_grad for p in m.parameters().values())
    m2 = instantiate(lg, 4, cfg, Rng(0))
    sigma_fit(m2, SigmaFitConfig(fit_steps=0, freeze_learngene=True), target, sched)
    assert all(np.array_equal(before[n], v) for n, v in m2.snapshot().items())
    assert not m2.families["o"].U.requires_grad and m2.families["o"].sigmas[0].requires_grad


def test_fit_subset_size():
    data = make_dataset("shapes-B", 512, 8)
    assert fit_subset(data, SigmaFitConfig()).n_samples == 64
    assert fit_subset(data, SigmaFitConfig(fit_fraction=0.5)).n_samples == 256
    with pytest.raises(ContractError):
        fit_subset(data.subset(np.arange(0)), SigmaFitConfig())


def test_he_random_init():
    cfg = DiTConfig(width=100, heads=4, depth=2)
    m = he_random_init(cfg, Rng(0))
    w = m.params["blocks.0.o.w"].data
    assert w.size == 10_000 and abs(w.var() / (2 / 100) - 1) < 0.1
    assert np.max(np.abs(w - m.params["blocks.1.o.w"].data)) > 0
    m2 = he_random_init(cfg, Rng(0))
    assert all(np.array_equal(a, m2.snapshot()[n]) for n, a in m.snapshot().items())
    assert not m.params["blocks.0.qkv.b"].data.any()


def test_share_init(small_setup):
    cfg, data, sched, _, aux = small_setup
    same = share_init(aux, 3)
    plain = aux.to_plain()
    assert all(np.array_equal(v, plain.snapshot()[n]) for n, v in same.snapshot().items())
    double = share_init(aux, 6)
    for l in range(6):
        assert np.array_equal(double.params[f"blocks.{l}.in.w"].data, plain.params[f"blocks.{l % 3}.in.w"].data)
    batch = data.images[:8]
    loss = double(batch, np.arange(8), data.labels[:8]).data
    assert np.all(np.isfinite(loss))
    with pytest.raises(IncompatibilityError):
        initialize(ShareInit(aux), DiTConfig(width=32, heads=2), 4, 0)


def test_truncated_svd_full_rank_and_eckart_young():
    rs = np.random.default_rng(0)
    m = rs.normal(size=(6, 5))
    assert np.max(np.abs(truncated_svd(m, 5) - m)) < 1e-8
    mats = [rs.normal(size=(6, 5)) for _ in range(4)]
    Uf, Vf, sig = fz.fit_shared_factorization(mats, 2)
    for mat, s in zip(mats, sig):
        per_layer = np.linalg.norm(mat - truncated_svd(mat, 2))
        shared = np.linalg.norm(mat - (Uf * s) @ Vf.T)
        assert per_layer <= shared + 1e-12
        # brute force: no random rank-2 matrix beats the truncation
        for _ in range(20):
            a, b = rs.normal(size=(6, 2)), rs.normal(size=(2, 5))
            assert per_layer <= np.linalg.norm(mat - a @ b)


def test_svd_transfer(small_setup):
    cfg, _, _, lg, aux = small_setup
    m = svd_transfer_init(aux, 2, 8, Rng(0))
    assert fz.count_params(m)["transferred"] == svd_transfer_count(16, 64, 8, 2) == 2 * 8 * (
        (16 + 48 + 1) + (16 + 16 + 1) + (16 + 64 + 1) + (64 + 16 + 1)
    )
    assert svd_transfer_count(16, 64, 8, 2) > fz.transferred_count(16, 64, 8)
    w = m.params["blocks.1.in.w"].data
    assert np.linalg.matrix_rank(w) == 8
    np.testing.assert_allclose(w, truncated_svd(aux.weight_array(1, "in"), 8), atol=1e-12)
    with pytest.raises(ConfigurationError):
        svd_transfer_init(aux, 2, 17, Rng(0))
    with pytest.raises(ContractError):
        svd_transfer_init(aux, 4, 4, Rng(0))


def test_svd_budget_matching(small_setup):
    _, _, _, lg, aux = small_setup
    rec = SvdTransfer(aux, budget=lg.n_params)
    for depth in (1, 2, 3):
        r = rec.rank_for(depth)
        best = min(range(1, 17), key=lambda k: abs(svd_transfer_count(16, 64, k, depth) - lg.n_params))
        assert r == best
    with pytest.raises(ConfigurationError):
        SvdTransfer(aux).rank_for(2)


def test_initialize_is_a_function_of_seed(small_setup):
    cfg, data, sched, lg, aux = small_setup
    target = make_dataset("shapes-B", 256, 8)
    for rec in (HeRandom(), FineInit(lg, SigmaFitConfig(fit_steps=3)), SvdTransfer(aux, 4)):
        a = initialize(rec, cfg.replace(backing="plain"), 3, 5, target, sched).snapshot()
        b = initialize(rec, cfg.replace(backing="plain"), 3, 5, target, sched).snapshot()
        assert all(np.array_equal(a[n], b[n]) for n in a)


def test_fine_recipe_materializes_after_fit(small_setup):
    cfg, data, sched, lg, aux = small_setup
    target = make_dataset("shapes-B", 256, 8)
    fit = SigmaFitConfig(fit_steps=3)
    plain = initialize(FineInit(lg, fit), cfg, 3, 5, target, sched)
    kept = initialize(FineInit(lg, fit, keep_factorized=True), cfg, 3, 5, target, sched)
    assert plain.config.backing == "plain" and kept.config.backing == "factorized"
    for l in range(3):
        for kind in fz.FAMILY_KINDS:
            assert np.array_equal(plain.weight_array(l, kind), kept.weight_array(l, kind))
    z = target.images[:4]
    t = np.array([0, 10, 20, 49])
    assert np.allclose(plain(z, t, target.labels[:4]).data, kept(z, t, target.labels[:4]).data, atol=1e-12)
    assert fz.count_params(plain)["transferred"] == fz.count_params(kept)["transferred"] == lg.n_params
    assert fz.count_params(plain)["trainable_at_init"] == 4 * 3 * 2
    assert all(p.requires_grad for p in plain.parameters().values())
    frozen = initialize(FineInit(lg, SigmaFitConfig(fit_steps=0, freeze_learngene=True)), cfg, 3, 5, target, sched)
    assert frozen.config.backing == "factorized"


def test_frozen_noise_loss_is_fixed(small_setup):
    cfg, data, sched, lg, aux = small_setup
    assert frozen_noise_loss(aux, data, sched, seed=1) == frozen_noise_loss(aux, data, sched, seed=1)
