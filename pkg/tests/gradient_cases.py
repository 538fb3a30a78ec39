"""Reverse-mode vs central-difference probes for every differentiable piece.

Each case is ``(name, fn, inputs)`` where ``fn`` maps tensors to a scalar
tensor. Probe points are drawn away from relu kinks and clamp edges.
"""

from __future__ import annotations

import numpy as np

from glha import autodiff as ad
from glha import network as nw
from glha.geometry import regression_loss, weighted_eight_point
from glha.guided_loss import classify_counts, solve_weights, weighted_ibce
from glha.synth import SceneConfig, generate_pair, pair_rng


def _away_from_zero(rng, shape, lo=0.2, hi=1.5):
    return rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], shape)


def _projection(rng, shape):
    """Fixed random weights that turn any output into a scalar."""
    return rng.normal(size=shape)


def op_cases(seed: int = 0):
    rng = np.random.default_rng(seed)
    a = _away_from_zero(rng, (2, 5, 3))
    b = _away_from_zero(rng, (2, 5, 3))
    pos = rng.uniform(0.5, 2.0, (2, 5, 3))
    r = _projection(rng, (2, 5, 3))

    def scal(t, proj=r):
        return ad.sum(t * proj)

    w5 = rng.uniform(0.1, 1.0, (2, 5, 1))
    w5 = w5 / w5.sum(axis=1, keepdims=True)
    W = rng.normal(size=(3, 4))
    bias = rng.normal(size=4)
    Wg = rng.normal(size=(2, 2, 3))
    bg = rng.normal(size=6)
    x4 = rng.normal(size=(2, 5, 4))
    gamma, beta = rng.uniform(0.5, 1.5, 3), rng.normal(size=3)
    r4 = _projection(rng, (2, 5, 4))
    r6 = _projection(rng, (2, 5, 6))
    r13 = _projection(rng, (2, 1, 3))
    M = rng.normal(size=(2, 5, 5))
    S = M @ np.swapaxes(M, 1, 2) + np.arange(5) * np.eye(5)  # distinct eigenvalues
    r5 = _projection(rng, (2, 5))
    bn_train = ad.BatchNormState.fresh(3)
    bn_eval = ad.BatchNormState(rng.normal(size=3), rng.uniform(0.5, 2.0, 3))

    return [
        ("add", lambda x, y: scal(x + y), [a, b]),
        ("sub", lambda x, y: scal(x - y), [a, b]),
        ("mul", lambda x, y: scal(x * y), [a, b]),
        ("div", lambda x, y: scal(x / y), [a, pos]),
        ("relu", lambda x: scal(ad.relu(x)), [a]),
        ("tanh", lambda x: scal(ad.tanh(x)), [a]),
        ("sigmoid", lambda x: scal(ad.sigmoid(x)), [a]),
        ("log", lambda x: scal(ad.log(x)), [pos]),
        ("exp", lambda x: scal(ad.exp(x)), [a]),
        ("sqrt", lambda x: scal(ad.sqrt(x)), [pos]),
        ("square", lambda x: scal(ad.square(x)), [a]),
        ("concat", lambda x, y: ad.sum(ad.concat([x, y], -1) * r6), [a, b]),
        ("reshape", lambda x: ad.sum(ad.reshape(x, (2, 15)) * r.reshape(2, 15)), [a]),
        ("linear", lambda x, w, c: ad.sum(ad.linear(x, w, c) * r4), [a, W, bias]),
        ("grouped_linear", lambda x, w, c: ad.sum(ad.grouped_linear(x4, w, c) * r6) + scal(x),
         [a, Wg, bg]),
        ("grouped_linear_input", lambda x: ad.sum(ad.grouped_linear(x, Wg, bg) * r6), [x4]),
        ("softmax", lambda x: scal(ad.softmax(x, axis=-2)), [a]),
        ("sum", lambda x: ad.sum(ad.sum(x, axis=-2) * r13[:, 0]), [a]),
        ("mean", lambda x: ad.sum(ad.mean(x, axis=-2, keepdims=True) * r13), [a]),
        ("weighted_moments", lambda x, w: ad.sum(ad.weighted_moments(x, w, 1e-5)[0] * r13)
         + ad.sum(ad.weighted_moments(x, w, 1e-5)[1] * r13), [a, w5]),
        ("batch_norm_train", lambda x, g, c: scal(ad.batch_norm(x, g, c, bn_train, True)),
         [a, gamma, beta]),
        ("batch_norm_eval", lambda x, g, c: scal(ad.batch_norm(x, g, c, bn_eval, False)),
         [a, gamma, beta]),
        ("residual_add", lambda x: scal(x + ad.tanh(x)), [a]),
        ("norm", lambda x: ad.sum(ad.norm(x)), [a]),
        ("smallest_eigvec", lambda s: ad.sum(ad.smallest_eigvec((s + ad.transpose(s, (0, 2, 1))) * 0.5) * r5),
         [S]),
    ]


def tiny_config(**kw) -> nw.CascadeConfig:
    base = dict(channels=8, feature_layers=1, refine_layers=1, refinement_modules=2, ca_groups=2,
                ca_reduction=2, batch_size=2)
    base.update(kw)
    return nw.CascadeConfig(**base)


def _param_case(cfg, names, build, seed):
    """Gradient case over the named parameters of a freshly initialized model."""
    store = nw.init_params(cfg, seed)
    rng = np.random.default_rng(seed + 7)
    for k in store.params:  # break the zero initialisations so every path is live
        store.params[k] = store.params[k] + rng.normal(scale=0.3, size=store.params[k].shape)

    def fn(*tensors):
        P = {k: ad.Tensor(v) for k, v in store.params.items()}
        P.update(dict(zip(names, tensors)))
        bn = {k: ad.BatchNormState(v.mean.copy(), v.var.copy()) for k, v in store.bn.items()}
        return build(P, bn)

    return fn, [store.params[n].copy() for n in names]


def network_cases(seed: int = 0):
    rng = np.random.default_rng(seed)
    cfg = tiny_config()
    B, N, C = 2, 12, cfg.channels
    x = rng.normal(size=(B, N, C))
    prior = rng.uniform(0.05, 0.95, (B, N))
    proj = _projection(rng, (B, N, C))
    coords = rng.uniform(-1, 1, (B, N, 4))
    proj_n = _projection(rng, (B, N))

    cases = []
    fn, ins = _param_case(cfg, ["feat.hab0.a.att1.W", "feat.hab0.a.fuse1.W", "feat.hab0.a.fuse2.W"],
                          lambda P, bn: ad.sum(ad.reshape(nw.bacn_weights(x, prior, P, "feat.hab0.a"), (B, N))
                                               * proj_n), seed)
    cases.append(("bacn_params", fn, ins))
    P0 = {k: ad.Tensor(v) for k, v in nw.init_params(cfg, seed).params.items()}
    P0["feat.hab0.a.fuse2.W"] = ad.Tensor(rng.normal(size=(4, 1)))
    cases.append(("bacn_features", lambda f: ad.sum(ad.reshape(nw.bacn_weights(f, prior, P0, "feat.hab0.a"),
                                                               (B, N)) * proj_n), [x]))
    fn, ins = _param_case(cfg, ["feat.hab0.a.ca1.W", "feat.hab0.a.ca2.b"],
                          lambda P, bn: ad.sum(nw.channel_attention(x, P, "feat.hab0.a") * proj), seed)
    cases.append(("channel_attention_params", fn, ins))
    cases.append(("channel_attention_features",
                  lambda f: ad.sum(nw.channel_attention(f, P0, "feat.hab0.a") * proj), [x]))
    w = rng.uniform(0.1, 1.0, (B, N))
    w = w / w.sum(axis=1, keepdims=True)
    cases.append(("context_normalize", lambda f, ww: ad.sum(nw.context_normalize(f, ww) * proj), [x, w]))
    fn, ins = _param_case(cfg, ["feat.hab0.a.map.W", "feat.hab0.b.bn.gamma", "feat.hab0.b.fuse1.W", "feat.hab0.a.ca2.W"],
                          lambda P, bn: ad.sum(nw.hab_forward(x, prior, P, bn, "feat.hab0", cfg, True) * proj),
                          seed)
    cases.append(("hab_params", fn, ins))
    cases.append(("hab_features",
                  lambda f: ad.sum(nw.hab_forward(f, prior, P0, {k: ad.BatchNormState.fresh(C) for k in
                                                                 nw.init_params(cfg, seed).bn}, "feat.hab0",
                                                  cfg, True) * proj), [x]))

    def cascade_scalar(P, bn, training):
        out = nw.cascade_forward(P, bn, cfg, coords, prior, training=training)
        total = ad.sum(out.logits[0] * proj_n)
        for k, lg in enumerate(out.logits[1:], 1):
            total = total + ad.sum(lg * (proj_n * (k + 1)))
        return total

    names = ["feat.lift.W", "feat.hab0.b.map.W", "ref1.lift.W", "ref2.hab0.a.map.b", "ref2.head.W"]
    fn, ins = _param_case(cfg, names, lambda P, bn: cascade_scalar(P, bn, True), seed)
    cases.append(("cascade_forward_train", fn, ins))
    fn, ins = _param_case(cfg, names, lambda P, bn: cascade_scalar(P, bn, False), seed)
    cases.append(("cascade_forward_eval", fn, ins))
    return cases


def geometry_cases(seed: int = 0):
    rng = np.random.default_rng(seed)
    pair = generate_pair(pair_rng(seed, 0), SceneConfig(n=24, inlier_rate=0.5, noise=1e-3, seed=seed))
    w = rng.uniform(0.2, 1.0, pair.n)
    proj = _projection(rng, (3, 3))
    E_gt = pair.E_gt
    E_hat = E_gt + 0.2 * rng.normal(size=(3, 3))
    probs = rng.uniform(0.05, 0.95, 40)
    probs = np.where(np.abs(probs - 0.5) < 0.05, probs + 0.1, probs)
    labels = rng.random(40) < 0.3
    labels[:2] = [True, False]
    fixed = solve_weights(classify_counts(probs, labels), 0.5)
    return [
        ("weighted_eight_point", lambda ww: ad.sum(weighted_eight_point(pair.coords, ww) * proj), [w]),
        ("regression_loss", lambda e: regression_loss(e, E_gt), [E_hat]),
        ("regression_loss_negative_branch", lambda e: regression_loss(e, E_gt), [-E_hat]),
        # guided loss: weights are constants of the backward pass, so the
        # reference is the weighted loss with the weights frozen at the probe
        ("weighted_ibce", lambda p: weighted_ibce(p, labels, fixed.lam, fixed.mu), [probs]),
    ]


def all_cases(seed: int = 0):
    return op_cases(seed) + network_cases(seed) + geometry_cases(seed)
