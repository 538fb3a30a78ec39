import math

import numpy as np
import pytest

from glha import autodiff as ad
from glha import network as nw
from glha.guided_loss import EPS_CLAMP
from glha.synth import SceneConfig, generate_pair, pair_rng
from gradient_cases import network_cases, tiny_config


def _params(cfg, seed=0, jitter=0.0):
    store = nw.init_params(cfg, seed)
    rng = np.random.default_rng(seed + 100)
    P = {k: ad.Tensor(v + jitter * rng.normal(size=v.shape)) for k, v in store.params.items()}
    return P, store.bn


def _inputs(B=2, N=40, C=8, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(B, N, C)), rng.uniform(0.05, 0.95, (B, N))


# ---------------------------------------------------------------- context normalization


def test_context_normalize_standardized_input_is_nearly_unchanged():
    x, _ = _inputs(1, 200, 4)
    x = (x - x.mean(axis=1, keepdims=True)) / x.std(axis=1, keepdims=True)
    out = nw.context_normalize(x, np.full((1, 200), 1 / 200)).value
    assert np.abs(out - x / math.sqrt(1 + 1e-5)).max() < 1e-12
    assert np.abs(out - x).max() < 1e-4


def test_context_normalize_single_support_row_maps_to_zero():
    x, _ = _inputs(1, 10, 3)
    w = np.zeros((1, 10))
    w[0, 4] = 1.0
    out = nw.context_normalize(x, w).value
    assert np.array_equal(out[0, 4], np.zeros(3))


def test_context_normalize_zero_weight_rows_are_inert_bitwise():
    x, _ = _inputs(2, 30, 5, seed=1)
    w = np.random.default_rng(2).uniform(0.1, 1, (2, 30))
    w[:, ::3] = 0.0
    w /= w.sum(axis=1, keepdims=True)
    y = x.copy()
    y[:, ::3] = np.random.default_rng(3).normal(scale=100, size=y[:, ::3].shape)
    keep = w > 0
    for ordered in (True, False):
        with ad.ordered_reductions(ordered):
            a = nw.context_normalize(x, w).value
            b = nw.context_normalize(y, w).value
        assert np.array_equal(a[keep], b[keep])


def test_context_normalize_rejects_zero_weight_sum():
    with pytest.raises(ValueError):
        nw.context_normalize(np.ones((1, 4, 2)), np.zeros((1, 4)))


# ---------------------------------------------------------------- BACN & CA


def test_bacn_zero_final_map_gives_uniform_weights():
    cfg = tiny_config()
    P, _ = _params(cfg)
    x, prior = _inputs()
    w = nw.bacn_weights(x, prior, P, "feat.hab0.a").value
    assert np.array_equal(w, np.full_like(w, 1 / 40))


def test_bacn_weights_sum_to_one():
    cfg = tiny_config()
    P, _ = _params(cfg, jitter=0.5)
    x, prior = _inputs()
    w = nw.bacn_weights(x, prior, P, "feat.hab0.a").value
    assert np.all(w > 0)
    assert np.abs(w.sum(axis=-2) - 1).max() < 1e-12
    assert np.ptp(w) > 0


def test_channel_attention_zero_maps_halve_features():
    cfg = tiny_config()
    P, _ = _params(cfg)
    for k in ("ca1.W", "ca1.b", "ca2.W", "ca2.b"):
        P[f"feat.hab0.a.{k}"] = ad.Tensor(np.zeros(P[f"feat.hab0.a.{k}"].shape))
    x, _ = _inputs()
    assert np.array_equal(nw.channel_attention(x, P, "feat.hab0.a").value, 0.5 * x)


def test_channel_attention_shrinks_rows_and_is_per_point():
    cfg = tiny_config()
    P, _ = _params(cfg, jitter=0.5)
    x, _ = _inputs()
    y = nw.channel_attention(x, P, "feat.hab0.a").value
    assert np.all(np.linalg.norm(y, axis=-1) < np.linalg.norm(x, axis=-1))
    perm = np.random.default_rng(0).permutation(40)
    assert np.array_equal(nw.channel_attention(x[:, perm], P, "feat.hab0.a").value, y[:, perm])


# ---------------------------------------------------------------- HAB


def test_hab_with_zero_maps_is_identity():
    cfg = tiny_config()
    P, bn = _params(cfg, jitter=0.5)
    for s in ("a", "b"):
        for k in ("map.W", "map.b"):
            P[f"feat.hab0.{s}.{k}"] = ad.Tensor(np.zeros(P[f"feat.hab0.{s}.{k}"].shape))
    x, prior = _inputs()
    for training in (True, False):
        assert np.array_equal(nw.hab_forward(x, prior, P, bn, "feat.hab0", cfg, training).value, x)


def test_hab_permutation_equivariant_in_eval_mode():
    cfg = tiny_config()
    P, bn = _params(cfg, jitter=0.5)
    x, prior = _inputs()
    perm = np.random.default_rng(1).permutation(40)
    a = nw.hab_forward(x, prior, P, bn, "feat.hab0", cfg, training=False).value
    b = nw.hab_forward(x[:, perm], prior[:, perm], P, bn, "feat.hab0", cfg, training=False).value
    assert np.array_equal(a[:, perm], b)


def test_refinement_override_ignores_zero_weight_rows_bitwise():
    cfg = tiny_config()
    P, bn = _params(cfg, jitter=0.5)
    x, prior = _inputs(seed=4)
    logits = np.random.default_rng(5).normal(size=(2, 40, 1))
    ctx, empty = nw.refinement_context(logits)
    assert not empty.any()
    dead = logits[..., 0] <= 0
    y = x.copy()
    y[dead] += np.random.default_rng(6).normal(scale=10, size=y[dead].shape)
    a = nw.hab_forward(x, prior, P, bn, "ref1.hab0", cfg, training=False, context=ctx).value
    b = nw.hab_forward(y, prior, P, bn, "ref1.hab0", cfg, training=False, context=ctx).value
    assert np.array_equal(a[~dead], b[~dead])


def test_refinement_context_falls_back_to_uniform():
    logits = np.stack([np.full((6, 1), -1.0), np.linspace(-1, 1, 6)[:, None]])
    ctx, empty = nw.refinement_context(logits)
    assert list(empty) == [True, False]
    assert np.array_equal(ctx.value[0], np.full((6, 1), 1 / 6))
    assert abs(ctx.value[1].sum() - 1) < 1e-15 and ctx.value[1, 0, 0] == 0.0


# ---------------------------------------------------------------- gradients


@pytest.mark.parametrize("name,fn,inputs", network_cases(1), ids=[c[0] for c in network_cases(1)])
def test_network_gradients(name, fn, inputs):
    assert ad.grad_check(fn, inputs) < 1e-4


# ---------------------------------------------------------------- cascade


def _pair(n=64, seed=0):
    return generate_pair(pair_rng(seed, 0), SceneConfig(n=n, inlier_rate=0.3))


def test_cascade_permutation_equivariant_bitwise_in_eval():
    cfg = tiny_config()
    P, bn = _params(cfg, jitter=0.3)
    p = _pair()
    prior = np.random.default_rng(0).uniform(0.05, 0.95, p.n)
    perm = np.random.default_rng(2).permutation(p.n)
    a = nw.cascade_forward(P, bn, cfg, p.coords, prior)
    b = nw.cascade_forward(P, bn, cfg, p.coords[perm], prior[perm])
    assert len(a.logits) == 3
    for la, lb in zip(a.logits, b.logits):
        assert np.array_equal(la.value[:, perm], lb.value)


def test_cascade_weights_in_unit_interval_and_finite_at_large_n():
    cfg = nw.CascadeConfig()  # full width and depth
    model = nw.CascadeModel.create(cfg)
    rng = np.random.default_rng(0)
    for n in (8, 2048):
        coords = rng.uniform(-1, 1, (1, n, 4))
        out, _ = model.forward(coords, rng.uniform(0, 1, (1, n)))
        assert all(np.all(np.isfinite(lg.value)) for lg in out.logits)
        w = out.w_final.value
        assert np.all((w >= 0) & (w < 1))


def test_cascade_rejects_fewer_than_eight_rows():
    cfg = tiny_config()
    P, bn = _params(cfg)
    with pytest.raises(ValueError):
        nw.cascade_forward(P, bn, cfg, np.zeros((1, 7, 4)), np.zeros((1, 7)))


def test_total_loss_regression_gated_by_warmup():
    cfg = tiny_config(warmup_iters=10)
    P, bn = _params(cfg, jitter=0.3)
    p = _pair()
    prior = np.full(p.n, 0.5)
    out = nw.cascade_forward(P, bn, cfg, p.coords, prior, regression=True)
    before = nw.total_loss(out, p.labels, p.E_gt, 9, cfg)
    after = nw.total_loss(out, p.labels, p.E_gt, 10, cfg)
    assert before.reg == 0.0
    assert float(before.total.value) == float(nw.total_loss(
        nw.cascade_forward(P, bn, cfg, p.coords, prior), p.labels, p.E_gt, 10, cfg).total.value)
    assert after.reg > 0
    assert float(after.total.value) == pytest.approx(float(before.total.value) + 0.1 * after.reg, rel=1e-12)


def test_total_loss_of_perfect_prediction_is_tiny():
    cfg = tiny_config(warmup_iters=0)
    p = _pair()
    lg = ad.Tensor(np.where(p.labels, 40.0, -40.0)[None])
    out = nw.StageOutputs([lg, lg, lg], nw.inlier_weights(lg), ad.Tensor(p.E_gt[None]), np.array([True]))
    terms = nw.total_loss(out, p.labels, p.E_gt, 0, cfg)
    assert 0 <= float(terms.total.value) <= 3 * -math.log(1 - EPS_CLAMP)


def test_total_loss_with_zero_eta_is_final_stage_loss():
    cfg = tiny_config(eta_coarse=(0.0, 0.0), eta_reg=0.0)
    P, bn = _params(cfg, jitter=0.3)
    p = _pair()
    out = nw.cascade_forward(P, bn, cfg, p.coords, np.full(p.n, 0.5), regression=True)
    terms = nw.total_loss(out, p.labels, p.E_gt, 10**6, cfg)
    assert float(terms.total.value) == terms.stage[-1]


def test_total_loss_gradient_final_stage_only():
    # guided weights move with the probabilities while backward holds them
    # fixed, so the finite-difference reference needs fixed weights: ibce
    cfg = tiny_config(eta_coarse=(0.0, 0.0), eta_reg=0.0, loss="ibce")
    store = nw.init_params(cfg, 0)
    p = _pair(n=32)
    prior = np.full(p.n, 0.5)
    names = ["ref2.head.W", "ref2.hab0.b.map.W"]
    base = {k: v + 0.3 * np.random.default_rng(1).normal(size=v.shape) for k, v in store.params.items()}

    def fn(*ts):
        P = {k: ad.Tensor(v) for k, v in base.items()}
        P.update(dict(zip(names, ts)))
        bn = {k: ad.BatchNormState(v.mean.copy(), v.var.copy()) for k, v in store.bn.items()}
        out = nw.cascade_forward(P, bn, cfg, p.coords, prior, training=True)
        return nw.total_loss(out, p.labels, p.E_gt, 0, cfg).total

    assert ad.grad_check(fn, [base[n] for n in names]) < 1e-4


# ---------------------------------------------------------------- config


def test_default_config_is_valid_and_round_trips():
    cfg = nw.CascadeConfig()
    cfg.validate()
    assert cfg.stages == 3
    assert nw.CascadeConfig(**cfg.to_dict()) == cfg


@pytest.mark.parametrize("kw", [
    dict(channels=100),                   # not divisible by ca_groups
    dict(guidance=(0.2, 0.25, 0.3)),      # not decreasing
    dict(guidance=(0.3, 0.25)),           # wrong length
    dict(guidance=(0.3, 0.25, -0.1)),     # not positive
    dict(loss="focal"),                   # unsupported baseline
    dict(loss="bogus"),
    dict(eta_coarse=(0.1,)),
])
def test_invalid_configs_are_rejected(kw):
    with pytest.raises(nw.ConfigError):
        nw.CascadeConfig(**kw).validate()


def test_single_stage_config():
    cfg = nw.CascadeConfig(cascade=False, guidance=(1.0,), eta_coarse=())
    cfg.validate()
    assert cfg.stages == 1
    assert "ref1.lift.W" not in nw.init_params(cfg).params
