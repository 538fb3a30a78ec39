"""Hybrid attention cascade for correspondence classification.

All tensors carry a leading pair axis: coordinates are ``(B, N, 4)``, priors
``(B, N)``, features ``(B, N, C)``. Every map acts per correspondence and
every reduction over ``N`` is symmetric, so the whole network is equivariant
to row permutations. In inference mode reductions are also summed in sorted
order, which makes that equivariance bitwise.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry import regression_loss, weighted_eight_point
from .guided_loss import Weights, batched_loss

LOSS_MODES = ("guided", "ibce", "ce")
UNSUPPORTED_LOSS_MODES = ("focal", "floss", "focal-off")


class ConfigError(ValueError):
    pass


@dataclass
class CascadeConfig:
    channels: int = 128
    feature_layers: int = 12
    refine_layers: int = 3
    refinement_modules: int = 2
    cascade: bool = True
    guidance: tuple[float, ...] = (0.3, 0.25, 0.2)  # one value per stage, coarse to final
    eta_coarse: tuple[float, ...] = (0.1, 0.1)
    eta_reg: float = 0.1
    warmup_iters: int = 500
    ca_groups: int = 8
    ca_reduction: int = 4
    cn_eps: float = 1e-5
    loss: str = "guided"
    lr: float = 1e-3
    batch_size: int = 16
    iters: int = 5000
    eval_every: int = 250
    seed: int = 0

    def __post_init__(self):
        self.guidance = tuple(float(g) for g in self.guidance)
        self.eta_coarse = tuple(float(e) for e in self.eta_coarse)
        self.validate()

    @property
    def stages(self) -> int:
        return 1 + self.refinement_modules if self.cascade else 1

    def validate(self) -> None:
        C, G, r = self.channels, self.ca_groups, self.ca_reduction
        if C <= 0 or self.feature_layers < 1:
            raise ConfigError("channels and feature_layers must be positive")
        if C % r or C % G or (C // r) % G:
            raise ConfigError(f"channels={C} must be divisible by ca_reduction={r} and ca_groups={G}, "
                              f"and channels/ca_reduction by ca_groups")
        if C % 4:
            raise ConfigError(f"channels={C} must be divisible by 4 for the attention branch")
        if self.loss in UNSUPPORTED_LOSS_MODES:
            raise ConfigError(f"loss mode {self.loss!r} is not supported (choose from {LOSS_MODES})")
        if self.loss not in LOSS_MODES:
            raise ConfigError(f"unknown loss mode {self.loss!r}")
        if len(self.guidance) != self.stages:
            raise ConfigError(f"guidance needs {self.stages} values, got {len(self.guidance)}")
        if any(g <= 0 for g in self.guidance):
            raise ConfigError("guidance values must be positive")
        if any(a <= b for a, b in zip(self.guidance, self.guidance[1:])):
            raise ConfigError("guidance must decrease strictly from coarse to final stage")
        if len(self.eta_coarse) != self.stages - 1:
            raise ConfigError(f"eta_coarse needs {self.stages - 1} values, got {len(self.eta_coarse)}")
        if self.cascade and (self.refinement_modules < 1 or self.refine_layers < 1):
            raise ConfigError("a cascade needs at least one refinement module with one block")
        if self.batch_size < 1 or self.iters < 0 or self.warmup_iters < 0 or self.eval_every < 1:
            raise ConfigError("batch_size, iters, warmup_iters and eval_every must be nonnegative "
                              "(batch_size and eval_every positive)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["guidance"] = list(self.guidance)
        d["eta_coarse"] = list(self.eta_coarse)
        return d


# ------------------------------------------------------------------ parameters


def _he(rng, fan_in, shape):
    return rng.normal(scale=np.sqrt(2.0 / fan_in), size=shape)


def _add_hab(store: ad.ParameterStore, rng, prefix: str, cfg: CascadeConfig) -> None:
    C, G = cfg.channels, cfg.ca_groups
    Cr = C // cfg.ca_reduction
    for s in ("a", "b"):
        p = f"{prefix}.{s}"
        store.add(f"{p}.att1.W", _he(rng, C, (C, C // 4)))
        store.add(f"{p}.att1.b", np.zeros(C // 4))
        store.add(f"{p}.att2.W", _he(rng, C // 4, (C // 4, 1)) * 0.1)
        store.add(f"{p}.att2.b", np.zeros(1))
        store.add(f"{p}.fuse1.W", _he(rng, 2, (2, 4)))
        store.add(f"{p}.fuse1.b", np.zeros(4))
        store.add(f"{p}.fuse2.W", np.zeros((4, 1)))  # uniform context at start
        store.add(f"{p}.fuse2.b", np.zeros(1))
        store.add(f"{p}.bn.gamma", np.ones(C))
        store.add(f"{p}.bn.beta", np.zeros(C))
        store.bn[f"{p}.bn"] = ad.BatchNormState.fresh(C)
        store.add(f"{p}.map.W", _he(rng, C, (C, C)))
        store.add(f"{p}.map.b", np.zeros(C))
        store.add(f"{p}.ca1.W", _he(rng, C // G, (G, C // G, Cr // G)))
        store.add(f"{p}.ca1.b", np.zeros(Cr))
        store.add(f"{p}.ca2.W", _he(rng, Cr // G, (G, Cr // G, C // G)))
        store.add(f"{p}.ca2.b", np.zeros(C))


def stage_prefixes(cfg: CascadeConfig) -> list[str]:
    return ["feat"] + [f"ref{m + 1}" for m in range(cfg.stages - 1)]


def init_params(cfg: CascadeConfig, seed: int | None = None) -> ad.ParameterStore:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    store = ad.ParameterStore()
    C = cfg.channels
    for k, prefix in enumerate(stage_prefixes(cfg)):
        fan_in = 4 if k == 0 else 6
        layers = cfg.feature_layers if k == 0 else cfg.refine_layers
        store.add(f"{prefix}.lift.W", _he(rng, fan_in, (fan_in, C)))
        store.add(f"{prefix}.lift.b", np.zeros(C))
        for i in range(layers):
            _add_hab(store, rng, f"{prefix}.hab{i}", cfg)
        store.add(f"{prefix}.head.W", rng.normal(scale=np.sqrt(1.0 / C), size=(C, 1)))
        store.add(f"{prefix}.head.b", np.zeros(1))
    return store


# ------------------------------------------------------------------ building blocks


def context_normalize(x, w, eps: float = 1e-5) -> ad.Tensor:
    """``(f - u) / sigma`` with weighted per-channel statistics over ``N``.

    ``w`` is ``(..., N)`` or ``(..., N, 1)`` and should sum to one per pair.
    """
    x, w = ad.as_tensor(x), ad.as_tensor(w)
    if w.shape == x.shape[:-1]:
        w = ad.reshape(w, w.shape + (1,))
    totals = w.value.sum(axis=-2)
    if np.any(np.abs(totals) < 1e-12):
        raise ValueError("context_normalize: weights sum to zero")
    u, sigma = ad.weighted_moments(x, w, eps)
    return (x - u) / sigma


def bacn_weights(x, prior, P: dict, prefix: str) -> ad.Tensor:
    """Attention weights over ``N`` fused with the prior; returns ``(..., N, 1)`` summing to 1."""
    x = ad.as_tensor(x)
    prior = ad.as_tensor(prior)
    if prior.shape != x.shape[:-1]:
        raise ad.ShapeError("bacn_weights", x.shape, prior.shape)
    h = ad.relu(ad.linear(x, P[f"{prefix}.att1.W"], P[f"{prefix}.att1.b"]))
    lik = ad.linear(h, P[f"{prefix}.att2.W"], P[f"{prefix}.att2.b"])
    z = ad.concat([lik, ad.reshape(prior, prior.shape + (1,))], axis=-1)
    z = ad.relu(ad.linear(z, P[f"{prefix}.fuse1.W"], P[f"{prefix}.fuse1.b"]))
    z = ad.linear(z, P[f"{prefix}.fuse2.W"], P[f"{prefix}.fuse2.b"])
    return ad.softmax(z, axis=-2)


def channel_attention(x, P: dict, prefix: str) -> ad.Tensor:
    """Per-point sigmoid gate over channels computed by two grouped maps."""
    h = ad.relu(ad.grouped_linear(x, P[f"{prefix}.ca1.W"], P[f"{prefix}.ca1.b"]))
    gate = ad.sigmoid(ad.grouped_linear(h, P[f"{prefix}.ca2.W"], P[f"{prefix}.ca2.b"]))
    return x * gate


def _sub_unit(x, prior, P, bn, prefix, cfg, training, context):
    w = bacn_weights(x, prior, P, prefix) if context is None else context
    h = context_normalize(x, w, cfg.cn_eps)
    h = ad.batch_norm(h, P[f"{prefix}.bn.gamma"], P[f"{prefix}.bn.beta"], bn[f"{prefix}.bn"], training)
    h = ad.linear(ad.relu(h), P[f"{prefix}.map.W"], P[f"{prefix}.map.b"])
    return channel_attention(h, P, prefix)


def hab_forward(x, prior, P: dict, bn: dict, prefix: str, cfg: CascadeConfig,
                training: bool = True, context=None) -> ad.Tensor:
    """Residual block of two context-normalized attention sub-units.

    ``context`` (``(..., N, 1)`` summing to 1) replaces the learned attention
    weights in both sub-units when given.
    """
    x = ad.as_tensor(x)
    h = _sub_unit(x, prior, P, bn, f"{prefix}.a", cfg, training, context)
    h = _sub_unit(h, prior, P, bn, f"{prefix}.b", cfg, training, context)
    return x + h


W_MAX = float(np.nextafter(1.0, 0.0))


def inlier_weights(logits) -> ad.Tensor:
    """``tanh(relu(logits))``, in ``[0, 1)``.

    tanh rounds to exactly 1.0 beyond a logit of about 19, so the result is
    capped at the largest double below one (where its slope is already zero
    to working precision).
    """
    return ad.clip(ad.tanh(ad.relu(logits)), 0.0, W_MAX)


def refinement_context(logits) -> tuple[ad.Tensor, np.ndarray]:
    """Previous-stage weights renormalized over ``N``; uniform where they are all zero.

    ``logits`` is ``(B, N, 1)``. Returns the context and a ``(B,)`` flag of
    pairs that fell back to uniform weights.
    """
    w = inlier_weights(logits)
    total = ad.sum(w, axis=-2, keepdims=True)
    empty = total.value[..., 0, 0] <= 0.0
    safe = ad.select(total.value > 0, total, np.ones_like(total.value))
    ctx = w / safe
    if np.any(empty):
        uniform = np.full(w.shape, 1.0 / w.shape[-2])
        ctx = ad.select(np.broadcast_to(empty[:, None, None], w.shape), uniform, ctx)
    return ctx, empty


# ------------------------------------------------------------------ cascade


@dataclass
class StageOutputs:
    logits: list[ad.Tensor]  # one (B, N) tensor per stage, coarse to final
    w_final: ad.Tensor
    E_hat: ad.Tensor | None = None
    E_ok: np.ndarray | None = None  # (B,) pairs whose E_hat is usable
    context_fallback: list[np.ndarray] = field(default_factory=list)

    @property
    def logits_final(self) -> ad.Tensor:
        return self.logits[-1]


def _stage_hab_count(cfg: CascadeConfig, k: int) -> int:
    return cfg.feature_layers if k == 0 else cfg.refine_layers


def cascade_forward(P: dict, bn: dict, cfg: CascadeConfig, coords, prior,
                    training: bool = False, regression: bool = False) -> StageOutputs:
    coords = np.asarray(coords, dtype=float)
    if coords.ndim == 2:
        coords = coords[None]
    prior = np.asarray(prior, dtype=float).reshape(coords.shape[:-1])
    if coords.shape[-2] < 8:
        raise ValueError(f"cascade_forward needs at least 8 correspondences, got {coords.shape[-2]}")
    with ad.ordered_reductions(not training):
        return _cascade(P, bn, cfg, coords, prior, training, regression)


def _cascade(P, bn, cfg, coords, prior, training, regression) -> StageOutputs:
    logits: list[ad.Tensor] = []
    fallbacks = []
    prev = None
    for k, prefix in enumerate(stage_prefixes(cfg)):
        if k == 0:
            x, context = ad.Tensor(coords), None
        else:
            x = ad.concat([ad.Tensor(coords), prev, ad.sigmoid(prev)], axis=-1)
            context, empty = refinement_context(prev)
            fallbacks.append(empty)
        h = ad.linear(x, P[f"{prefix}.lift.W"], P[f"{prefix}.lift.b"])
        for i in range(_stage_hab_count(cfg, k)):
            h = hab_forward(h, prior, P, bn, f"{prefix}.hab{i}", cfg, training, context)
        prev = ad.linear(h, P[f"{prefix}.head.W"], P[f"{prefix}.head.b"])  # (B, N, 1)
        logits.append(ad.reshape(prev, prev.shape[:-1]))
    w_final = inlier_weights(logits[-1])
    out = StageOutputs(logits, w_final, context_fallback=fallbacks)
    if regression:
        out.E_hat, out.E_ok = weighted_eight_point(coords, w_final, strict=False)
    return out


@dataclass
class LossTerms:
    total: ad.Tensor
    stage: list[float]  # classification loss per stage
    reg: float
    weights: list[list[Weights | None]]  # per stage, per pair


def total_loss(out: StageOutputs, labels, E_gt, it: int, cfg: CascadeConfig) -> LossTerms:
    """Final-stage loss plus weighted coarse-stage losses and the pose regression term."""
    labels = np.asarray(labels, dtype=bool)
    if labels.ndim == 1:
        labels = labels[None]
    stage_losses, stage_weights = [], []
    for k, lg in enumerate(out.logits):
        loss, w = batched_loss(ad.sigmoid(lg), labels, cfg.loss, cfg.guidance[k])
        stage_losses.append(loss)
        stage_weights.append(w)
    total = stage_losses[-1]
    for eta, loss in zip(cfg.eta_coarse, stage_losses[:-1]):
        if eta != 0.0:
            total = total + loss * eta
    reg_value = 0.0
    if it >= cfg.warmup_iters and cfg.eta_reg != 0.0 and out.E_hat is not None and np.any(out.E_ok):
        E_gt = np.asarray(E_gt, dtype=float).reshape(out.E_hat.shape)
        per_pair = regression_loss(out.E_hat, E_gt)
        ok = out.E_ok.astype(float)
        reg = ad.sum(per_pair * ok) * (1.0 / ok.sum())
        reg_value = float(reg.value)
        total = total + reg * cfg.eta_reg
    return LossTerms(total, [float(l.value) for l in stage_losses], reg_value, stage_weights)


@dataclass
class CascadeModel:
    config: CascadeConfig
    store: ad.ParameterStore

    @classmethod
    def create(cls, config: CascadeConfig) -> "CascadeModel":
        return cls(config, init_params(config))

    def forward(self, coords, prior, tape: ad.Tape | None = None, training: bool = False,
                regression: bool = False) -> tuple[StageOutputs, dict]:
        P = self.store.watch(tape)
        return cascade_forward(P, self.store.bn, self.config, coords, prior, training, regression), P

    def predict(self, coords, prior) -> list[np.ndarray]:
        """Per-stage logits ``(B, N)`` in inference mode."""
        out, _ = self.forward(coords, prior)
        return [lg.value for lg in out.logits]


@dataclass
class OracleModel:
    """Classifier that reads the ground-truth labels; an upper bound for evaluation."""

    stages: int = 1
    magnitude: float = 50.0

    def predict_pair(self, pair) -> list[np.ndarray]:
        lg = np.where(pair.labels, self.magnitude, -self.magnitude)[None]
        return [lg] * self.stages
