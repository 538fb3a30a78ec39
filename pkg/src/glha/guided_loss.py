"""Fn-measure guided class weighting for binary cross entropy.

The per-pair weights ``(lam, mu)`` are chosen so that the loss differential
with respect to the confusion counts ``(X, Y) = (#FN, #FP)`` is a negative
multiple of the Fn-measure differential. The weights are computed from the
forward pass and held constant during back-propagation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

EPS_CLAMP = 1e-7
FALLBACK = (0.5, 0.5)


class UndefinedGuidanceError(ValueError):
    pass


class SingleClassError(ValueError):
    pass


@dataclass(frozen=True)
class BatchPairStats:
    n_pos: int
    n_neg: int
    X: int  # false negatives
    Y: int  # false positives
    l_tp: float | None
    l_tn: float | None
    l_fp: float | None
    l_fn: float | None

    @property
    def tp(self) -> int:
        return self.n_pos - self.X

    @property
    def tn(self) -> int:
        return self.n_neg - self.Y

    @property
    def complete(self) -> bool:
        return None not in (self.l_tp, self.l_tn, self.l_fp, self.l_fn)


@dataclass(frozen=True)
class GuidanceConfig:
    n: float
    fallback_weights: tuple[float, float] = FALLBACK

    def __post_init__(self):
        if not self.n > 0:
            raise ValueError(f"guidance n must be positive, got {self.n}")


@dataclass(frozen=True)
class Weights:
    lam: float
    mu: float
    fallback: bool = False
    reason: str = ""


# ------------------------------------------------------------------ Fn-measure


def fn_measure(P, R, n):
    """``(1 + n^2) P R / (n^2 P + R)``, defined as 0 when P = R = 0."""
    P = np.asarray(P, dtype=float)
    R = np.asarray(R, dtype=float)
    n2 = float(n) ** 2
    den = n2 * P + R
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(den > 0, (1 + n2) * P * R / np.where(den > 0, den, 1.0), 0.0)
    return out if out.ndim else float(out)


def fn_of_counts(X, Y, n_pos, n):
    """Fn as a function of the FN count ``X`` and FP count ``Y``."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    n_pos = np.asarray(n_pos, dtype=float)
    if np.any(n_pos <= 0):
        raise UndefinedGuidanceError("Fn undefined for a pair without positives")
    tp = n_pos - X
    # F = (1+n^2) TP / ((1+n^2) TP + n^2 FN + FP), zero when TP = 0
    n2 = float(n) ** 2
    num = (1 + n2) * tp
    den = num + n2 * X + Y
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(tp > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return out if out.ndim else float(out)


def fn_forward_diffs(stats: BatchPairStats, n: float) -> tuple[float, float]:
    return _forward_diffs(stats.X, stats.Y, stats.n_pos, stats.n_neg, n)


def _forward_diffs(X, Y, n_pos, n_neg, n):
    """Unit forward differences of F; backward differences at the domain edge."""
    X, Y = np.asarray(X), np.asarray(Y)
    F0 = fn_of_counts(X, Y, n_pos, n)
    at_x = X + 1 > n_pos
    at_y = Y + 1 > n_neg
    dx = np.where(at_x, F0 - fn_of_counts(np.maximum(X - 1, 0), Y, n_pos, n),
                  fn_of_counts(np.minimum(X + 1, n_pos), Y, n_pos, n) - F0)
    dy = np.where(at_y, F0 - fn_of_counts(X, np.maximum(Y - 1, 0), n_pos, n),
                  fn_of_counts(X, Y + 1, n_pos, n) - F0)
    if dx.ndim == 0:
        return float(dx), float(dy)
    return dx, dy


def fn_chain_terms(stats: BatchPairStats, n: float) -> dict[str, float]:
    """Chain-rule factors of dF/dX and dF/dY through precision and recall."""
    tp = stats.tp
    if stats.n_pos <= 0 or tp <= 0:
        raise UndefinedGuidanceError("analytic partials need TP > 0")
    P = tp / (tp + stats.Y)
    R = tp / stats.n_pos
    n2 = n * n
    den = (n2 * P + R) ** 2
    return {
        "dF_dP": (1 + n2) * R * R / den,
        "dF_dR": n2 * (1 + n2) * P * P / den,
        "dP_dX": -stats.Y / (tp + stats.Y) ** 2,
        "dP_dY": -tp / (tp + stats.Y) ** 2,
        "dR_dX": -1.0 / stats.n_pos,
        "dR_dY": 0.0,
    }


def fn_partials_analytic(stats: BatchPairStats, n: float) -> tuple[float, float]:
    c = fn_chain_terms(stats, n)
    fx = c["dF_dP"] * c["dP_dX"] + c["dF_dR"] * c["dR_dX"]
    fy = c["dF_dP"] * c["dP_dY"] + c["dF_dR"] * c["dR_dY"]
    return fx, fy


# ------------------------------------------------------------------ counting


def classify_counts(probs, labels) -> BatchPairStats:
    """Confusion counts at threshold 0.5 (strict) and per-category mean CE terms."""
    p = np.clip(np.asarray(probs, dtype=float), EPS_CLAMP, 1 - EPS_CLAMP)
    y = np.asarray(labels, dtype=bool)
    if p.shape != y.shape:
        raise ad.ShapeError("classify_counts", p.shape, y.shape)
    pred = np.asarray(probs, dtype=float) > 0.5
    lpos = -np.log(p)
    lneg = -np.log1p(-p)

    def avg(values, mask):
        return float(values[mask].mean()) if mask.any() else None

    tp, fn = y & pred, y & ~pred
    fp, tn = ~y & pred, ~y & ~pred
    return BatchPairStats(
        n_pos=int(y.sum()), n_neg=int((~y).sum()), X=int(fn.sum()), Y=int(fp.sum()),
        l_tp=avg(lpos, tp), l_tn=avg(lneg, tn), l_fp=avg(lneg, fp), l_fn=avg(lpos, fn),
    )


# ------------------------------------------------------------------ weights


def solve_weights(stats: BatchPairStats, guidance: GuidanceConfig | float) -> Weights:
    if not isinstance(guidance, GuidanceConfig):
        guidance = GuidanceConfig(float(guidance))
    fb = guidance.fallback_weights

    def fallback(reason):
        return Weights(fb[0], fb[1], True, reason)

    if stats.n_pos == 0 or stats.n_neg == 0:
        return fallback("single class")
    if not stats.complete or stats.tp == 0 or stats.tn == 0 or stats.X == 0 or stats.Y == 0:
        return fallback("absent category")
    A = (stats.l_fn - stats.l_tp) / stats.n_pos
    B = (stats.l_fp - stats.l_tn) / stats.n_neg
    if not (A > 0 and B > 0):
        return fallback("nonpositive loss gap")
    fx, fy = fn_forward_diffs(stats, guidance.n)
    if fy == 0:
        return fallback("zero dF/dY")
    lam, mu = _split_weights(A, B, fx / fy)
    return Weights(float(lam), float(mu))


def _split_weights(A, B, rho):
    """``lam = rho B / (A + rho B)``, ``mu = A / (A + rho B)``.

    The smaller weight is evaluated from its closed form and the larger one
    as its complement, which keeps ``lam + mu == 1`` exactly while the ratio
    ``lam A / (mu B)`` stays accurate when one weight is close to 1.
    """
    den = A + rho * B
    lam_small = rho * B / den
    mu_small = A / den
    lam = np.where(lam_small <= mu_small, lam_small, 1.0 - mu_small)
    mu = np.where(lam_small <= mu_small, 1.0 - lam_small, mu_small)
    return lam, mu


# ------------------------------------------------------------------ losses


def weighted_ibce(probs, labels, lam: float, mu: float) -> ad.Tensor:
    """``-(lam mean_pos log p + mu mean_neg log(1 - p))`` on the tape."""
    probs = ad.as_tensor(probs)
    y = np.asarray(labels, dtype=bool)
    if probs.shape != y.shape:
        raise ad.ShapeError("weighted_ibce", probs.shape, y.shape)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("weighted_ibce needs both positive and negative labels")
    coef_pos = np.where(y, lam / n_pos, 0.0)
    coef_neg = np.where(y, 0.0, mu / n_neg)
    p = ad.clip(probs, EPS_CLAMP, 1 - EPS_CLAMP)
    return -(ad.sum(ad.log(p) * coef_pos) + ad.sum(ad.log(1.0 - p) * coef_neg))


def guided_loss(probs, labels, guidance: GuidanceConfig | float) -> tuple[ad.Tensor, Weights]:
    probs = ad.as_tensor(probs)
    w = solve_weights(classify_counts(probs.value, labels), guidance)
    return weighted_ibce(probs, labels, w.lam, w.mu), w


def pair_weights(probs: np.ndarray, labels: np.ndarray, mode: str, n: float) -> Weights:
    if mode == "guided":
        return solve_weights(classify_counts(probs, labels), n)
    if mode == "ibce":
        return Weights(0.5, 0.5)
    raise ValueError(f"unknown weighting mode {mode!r}")


def batched_loss(probs, labels, mode: str, n: float):
    """Mean over pairs of the per-pair classification loss.

    ``probs`` and ``labels`` are ``(B, N)``. ``mode`` is ``guided`` (weights
    from the solver, per pair), ``ibce`` (0.5/0.5) or ``ce`` (plain mean
    cross entropy). Pairs with a single class are skipped. Returns the loss
    tensor and a list with one :class:`Weights` (or ``None`` if skipped)
    per pair.
    """
    probs = ad.as_tensor(probs)
    y = np.asarray(labels, dtype=bool)
    if probs.shape != y.shape or y.ndim != 2:
        raise ad.ShapeError("batched_loss", probs.shape, y.shape)
    B, N = y.shape
    n_pos = y.sum(axis=1)
    n_neg = N - n_pos
    weights: list[Weights | None] = []
    coef_pos = np.zeros((B, N))
    coef_neg = np.zeros((B, N))
    for b in range(B):
        if n_pos[b] == 0 or n_neg[b] == 0:
            weights.append(None)
            continue
        if mode == "ce":
            coef_pos[b] = np.where(y[b], 1.0 / N, 0.0)
            coef_neg[b] = np.where(y[b], 0.0, 1.0 / N)
            weights.append(Weights(n_pos[b] / N, n_neg[b] / N))
            continue
        w = pair_weights(probs.value[b], y[b], mode, n)
        coef_pos[b] = np.where(y[b], w.lam / n_pos[b], 0.0)
        coef_neg[b] = np.where(y[b], 0.0, w.mu / n_neg[b])
        weights.append(w)
    valid = sum(w is not None for w in weights)
    if valid == 0:
        return ad.Tensor(0.0), weights
    coef_pos /= valid
    coef_neg /= valid
    p = ad.clip(probs, EPS_CLAMP, 1 - EPS_CLAMP)
    loss = -(ad.sum(ad.log(p) * coef_pos) + ad.sum(ad.log(1.0 - p) * coef_neg))
    return loss, weights


# ------------------------------------------------------------------ theorem checks

STEPS = [(dx, dy) for dx in range(-2, 3) for dy in range(-2, 3) if (dx, dy) != (0, 0)]


@dataclass
class CorrelationReport:
    fallback: bool
    lam: float
    mu: float
    residual: float  # |lam A / (mu B) - rho|
    max_linear_product: float  # max dl * dFn_lin over valid steps
    max_true_product: float  # max dl * dF_true over the unit forward steps
    passed: bool
    note: str = ""


def correlation_checks(n_pos, n_neg, X, Y, l_fn, l_tp, l_fp, l_tn, n):
    """Vectorized core of :func:`verify_negative_correlation` (non-degenerate inputs).

    Returns ``(lam, residual, max_linear_product, max_true_product)`` arrays.
    """
    n_pos, n_neg, X, Y = (np.asarray(a, dtype=float) for a in (n_pos, n_neg, X, Y))
    A = (np.asarray(l_fn) - np.asarray(l_tp)) / n_pos
    B = (np.asarray(l_fp) - np.asarray(l_tn)) / n_neg
    fx, fy = _forward_diffs(X, Y, n_pos, n_neg, n)
    rho = fx / fy
    lam, mu = _split_weights(A, B, rho)
    dl_x, dl_y = lam * A, mu * B
    residual = np.abs(dl_x / dl_y - rho)
    max_lin = np.full(X.shape, -np.inf)
    for dx, dy in STEPS:
        inside = (X + dx >= 0) & (X + dx <= n_pos) & (Y + dy >= 0) & (Y + dy <= n_neg)
        prod = (dl_x * dx + dl_y * dy) * (fx * dx + fy * dy)
        max_lin = np.where(inside, np.maximum(max_lin, prod), max_lin)
    F0 = fn_of_counts(X, Y, n_pos, n)
    max_true = np.full(X.shape, -np.inf)
    for dx, dy in ((1, 0), (0, 1)):
        inside = (X + dx <= n_pos) & (Y + dy <= n_neg)
        dF = fn_of_counts(np.minimum(X + dx, n_pos), np.minimum(Y + dy, n_neg), n_pos, n) - F0
        prod = (dl_x * dx + dl_y * dy) * dF
        max_true = np.where(inside, np.maximum(max_true, prod), max_true)
    return lam, residual, max_lin, max_true


def verify_negative_correlation(stats: BatchPairStats, guidance: GuidanceConfig | float,
                                residual_tol: float = 1e-9, product_tol: float = 1e-12) -> CorrelationReport:
    if not isinstance(guidance, GuidanceConfig):
        guidance = GuidanceConfig(float(guidance))
    w = solve_weights(stats, guidance)
    if w.fallback:
        return CorrelationReport(True, w.lam, w.mu, float("nan"), float("nan"), float("nan"),
                                 True, f"fallback mode ({w.reason}), theorem vacuous")
    lam, res, lin, true = correlation_checks(
        stats.n_pos, stats.n_neg, stats.X, stats.Y,
        stats.l_fn, stats.l_tp, stats.l_fp, stats.l_tn, guidance.n)
    res, lin, true = float(res), float(lin), float(true)
    ok = res < residual_tol and lin <= product_tol and true <= product_tol
    return CorrelationReport(False, w.lam, w.mu, res, lin, true, ok)


def random_stats(rng: np.random.Generator, size: int, max_count: int = 10_000,
                 min_count: int = 2) -> dict[str, np.ndarray]:
    """Non-degenerate confusion statistics: all four categories present,
    ``l_fn > l_tp`` and ``l_fp > l_tn`` (mean CE of misclassified samples
    exceeds log 2, of correct ones stays below it)."""
    n_pos = rng.integers(min_count, max_count + 1, size)
    n_neg = rng.integers(min_count, max_count + 1, size)
    X = rng.integers(1, n_pos)  # 1 .. n_pos - 1
    Y = rng.integers(1, n_neg)
    ln2 = np.log(2.0)
    return {
        "n_pos": n_pos, "n_neg": n_neg, "X": X, "Y": Y,
        "l_tp": rng.uniform(1e-4, ln2, size), "l_tn": rng.uniform(1e-4, ln2, size),
        "l_fn": rng.uniform(ln2 + 1e-6, 10.0, size), "l_fp": rng.uniform(ln2 + 1e-6, 10.0, size),
    }


def stats_at(sample: dict[str, np.ndarray], i: int) -> BatchPairStats:
    return BatchPairStats(int(sample["n_pos"][i]), int(sample["n_neg"][i]),
                          int(sample["X"][i]), int(sample["Y"][i]),
                          float(sample["l_tp"][i]), float(sample["l_tn"][i]),
                          float(sample["l_fp"][i]), float(sample["l_fn"][i]))


def theorem_suite(n_samples: int, guidance_values, seed: int = 0,
                  residual_tol: float = 1e-9, product_tol: float = 1e-12) -> dict:
    """Fuzz the weight solver over random statistics for each guidance value."""
    rng = np.random.default_rng(seed)
    per_n = []
    for n in guidance_values:
        s = random_stats(rng, n_samples)
        lam, res, lin, true = correlation_checks(
            s["n_pos"], s["n_neg"], s["X"], s["Y"], s["l_fn"], s["l_tp"], s["l_fp"], s["l_tn"], n)
        # the scalar solver must agree with the vectorized checks
        fallbacks = 0
        for i in range(n_samples):
            w = solve_weights(stats_at(s, i), n)
            fallbacks += w.fallback
            if not w.fallback and (w.lam != lam[i] or w.lam + w.mu != 1.0):
                raise AssertionError(f"solver mismatch at n={n}, sample {i}")
        per_n.append({
            "n": float(n),
            "samples": int(n_samples),
            "max_residual": float(res.max()),
            "max_linear_product": float(lin.max()),
            "max_true_product": float(true.max()),
            "lambda_range": [float(lam.min()), float(lam.max())],
            "fallback_rate": fallbacks / n_samples,
            "failures": int(np.sum((res >= residual_tol) | (lin > product_tol) | (true > product_tol)
                                   | (lam <= 0) | (lam >= 1))),
        })
    return {
        "samples_per_n": int(n_samples),
        "guidance": [float(n) for n in guidance_values],
        "seed": seed,
        "max_residual": max(r["max_residual"] for r in per_n),
        "max_linear_product": max(r["max_linear_product"] for r in per_n),
        "max_true_product": max(r["max_true_product"] for r in per_n),
        "fallback_rate": float(np.mean([r["fallback_rate"] for r in per_n])),
        "failures": int(sum(r["failures"] for r in per_n)),
        "per_guidance": per_n,
    }
