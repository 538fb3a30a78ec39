"""Training loop and evaluation for the cascade classifier."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry import (
    CheiralityAmbiguousError,
    RelativePose,
    decompose_essential,
    eight_point,
    map_at,
    pose_error,
    project_to_essential,
)
from .guided_loss import classify_counts, fn_measure, solve_weights
from .network import CascadeConfig, CascadeModel, OracleModel, total_loss
from .ransac import RansacConfig, ransac_essential
from .ratio_prior import PriorModel, pair_prior

log = logging.getLogger(__name__)

POST_MODES = ("weighted8pt", "ransac")
FAILED_POSE_DEG = 180.0


class TrainingError(RuntimeError):
    """Training aborted; ``diagnostics`` describes the failing step."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


def stack_pairs(pairs, prior_model: PriorModel | None):
    """Batch arrays ``coords (B, N, 4)``, ``prior (B, N)``, ``labels``, ``E_gt``."""
    sizes = {p.n for p in pairs}
    if len(sizes) != 1:
        raise ValueError(f"pairs in one batch must share N, got sizes {sorted(sizes)}")
    coords = np.stack([p.coords for p in pairs])
    if prior_model is None:
        prior = np.full(coords.shape[:-1], 0.5)
    else:
        prior = np.stack([pair_prior(p, prior_model) for p in pairs])
    labels = np.stack([p.labels for p in pairs])
    E_gt = np.stack([p.E_gt for p in pairs])
    return coords, prior, labels, E_gt


def _batches_by_size(pairs, chunk: int):
    groups: dict[int, list[int]] = {}
    for i, p in enumerate(pairs):
        groups.setdefault(p.n, []).append(i)
    for idx in groups.values():
        for s in range(0, len(idx), chunk):
            yield idx[s:s + chunk]


def predict_logits(model, pairs, prior_model: PriorModel | None, chunk: int = 16) -> list[list[np.ndarray]]:
    """Per pair, the list of stage logits (coarse to final) in inference mode."""
    if isinstance(model, OracleModel):
        return [[lg[0] for lg in model.predict_pair(p)] for p in pairs]
    out: list[list[np.ndarray] | None] = [None] * len(pairs)
    for idx in _batches_by_size(pairs, chunk):
        coords, prior, _, _ = stack_pairs([pairs[i] for i in idx], prior_model)
        stage_logits = model.predict(coords, prior)
        for j, i in enumerate(idx):
            out[i] = [lg[j] for lg in stage_logits]
    return out


# ------------------------------------------------------------------ metrics


def confusion(logits: np.ndarray, labels: np.ndarray) -> tuple[int, int, int]:
    """``(TP, FP, FN)`` with prediction ``prob > 0.5``, i.e. ``logit > 0``."""
    pred = np.asarray(logits) > 0.0
    y = np.asarray(labels, dtype=bool)
    return int(np.sum(pred & y)), int(np.sum(pred & ~y)), int(np.sum(~pred & y))


def precision_recall(tp: int, fp: int, fn: int) -> tuple[float, float]:
    """Precision is 0 when nothing is predicted positive; recall 0 without positives."""
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return p, r


def summarize_records(records: list[dict], stages: int) -> dict:
    """Pair-averaged classification metrics and pose mAP from per-pair records."""
    if not records:
        raise ValueError("no evaluation records")
    out: dict = {"pairs": len(records)}
    for k in range(stages):
        pr = [precision_recall(*r["confusion"][k]) for r in records]
        P = np.array([a for a, _ in pr])
        R = np.array([b for _, b in pr])
        tag = "final" if k == stages - 1 else f"stage{k + 1}"
        out[tag] = {
            "P": float(P.mean()),
            "R": float(R.mean()),
            "F1": float(np.mean([fn_measure(a, b, 1.0) for a, b in pr])),
            "F0.5": float(np.mean([fn_measure(a, b, 0.5) for a, b in pr])),
            "F2": float(np.mean([fn_measure(a, b, 2.0) for a, b in pr])),
            "abs_P_minus_R": float(np.mean(np.abs(P - R))),
        }
    final = out["final"]
    for key in ("P", "R", "F1", "F0.5", "F2"):
        out[key] = final[key]
    errs = [r["pose_error"] for r in records if r.get("pose_error") is not None]
    if errs:
        out["mAP@5"] = map_at(errs, 5.0)
        out["mAP@10"] = map_at(errs, 10.0)
        out["pose_failures"] = int(sum(not r["pose_ok"] for r in records))
    out["guidance_fallback_rate"] = float(np.mean([r["fallback"] for r in records]))
    return out


def fn_score(P: float, R: float, n: float) -> float:
    return fn_measure(P, R, n) if (P or R) else 0.0


def _pose_from_E(E, coords, mask, pair) -> tuple[float, bool]:
    try:
        pose = decompose_essential(project_to_essential(E), coords, mask)
    except (CheiralityAmbiguousError, ValueError, ArithmeticError):
        return FAILED_POSE_DEG, False
    rot, trans = pose_error(pose, RelativePose(pair.R_gt, pair.t_gt))
    return max(rot, trans), True


def estimate_pose(pair, weights: np.ndarray | None, post: str, ransac_config: RansacConfig | None = None):
    """Pose error (degrees, max of rotation and translation) and success flag.

    ``weights`` are per-correspondence inlier weights; ``None`` means all
    correspondences are used (the raw baseline). In ``ransac`` mode the
    correspondences with positive weight are passed to RANSAC.
    """
    coords = pair.coords
    w = np.ones(pair.n) if weights is None else np.asarray(weights, dtype=float)
    keep = w > 0
    if keep.sum() < 8:
        return FAILED_POSE_DEG, False
    if post == "weighted8pt":
        try:
            E = eight_point(coords, w)
        except (ValueError, ArithmeticError):
            return FAILED_POSE_DEG, False
        return _pose_from_E(E, coords, keep, pair)
    if post == "ransac":
        sub = coords[keep]
        res = ransac_essential(sub, ransac_config or RansacConfig())
        if not res.success:
            return FAILED_POSE_DEG, False
        return _pose_from_E(res.E, sub, res.mask, pair)
    raise ValueError(f"unknown post-processing {post!r}; choose from {POST_MODES}")


def pair_record(pair, stage_logits: list[np.ndarray], guidance_final: float, post: str | None,
                ransac_config: RansacConfig | None = None) -> dict:
    rec = {
        "pair_id": pair.pair_id,
        "n_pos": int(pair.labels.sum()),
        "confusion": [list(confusion(lg, pair.labels)) for lg in stage_logits],
    }
    final = stage_logits[-1]
    probs = 0.5 + 0.5 * np.tanh(0.5 * final)
    rec["fallback"] = bool(solve_weights(classify_counts(probs, pair.labels), guidance_final).fallback)
    if post is not None:
        w = np.tanh(np.maximum(final, 0.0))
        err, ok = estimate_pose(pair, w, post, ransac_config)
        rec["pose_error"], rec["pose_ok"] = err, ok
    return rec


def evaluate(model, pairs, prior_model: PriorModel | None, post: str | None = "weighted8pt",
             ransac_config: RansacConfig | None = None, guidance_final: float = 1.0) -> dict:
    """Metrics over ``pairs``: ``{"summary": ..., "pairs": [per-pair records]}``."""
    if post is not None and post not in POST_MODES:
        raise ValueError(f"unknown post-processing {post!r}; choose from {POST_MODES}")
    logits = predict_logits(model, pairs, prior_model)
    records = [pair_record(p, lg, guidance_final, post, ransac_config) for p, lg in zip(pairs, logits)]
    stages = len(logits[0]) if logits else 1
    return {"summary": summarize_records(records, stages), "pairs": records}


def evaluate_raw_ransac(pairs, ransac_config: RansacConfig | None = None) -> dict:
    errs = [estimate_pose(p, None, "ransac", ransac_config) for p in pairs]
    e = [x for x, _ in errs]
    return {"mAP@5": map_at(e, 5.0), "mAP@10": map_at(e, 10.0),
            "pose_failures": int(sum(not ok for _, ok in errs)), "pairs": len(pairs)}


# ------------------------------------------------------------------ training


@dataclass
class TrainResult:
    model: CascadeModel
    curves: list[dict] = field(default_factory=list)
    skipped_regression_steps: int = 0


def curve_columns(cfg: CascadeConfig) -> list[str]:
    cols = ["iter", "loss_total"]
    cols += [f"loss_stage{k + 1}" for k in range(cfg.stages)] + ["loss_reg"]
    cols += [f"lambda_stage{k + 1}" for k in range(cfg.stages)]
    for k in range(cfg.stages):
        cols += [f"val_P_stage{k + 1}", f"val_R_stage{k + 1}", f"val_Fn_stage{k + 1}"]
    return cols


def _validation_row(model: CascadeModel, val_pairs, prior_model) -> dict:
    cfg = model.config
    logits = predict_logits(model, val_pairs, prior_model)
    row = {}
    for k in range(cfg.stages):
        pr = [precision_recall(*confusion(lg[k], p.labels)) for lg, p in zip(logits, val_pairs)]
        P = float(np.mean([a for a, _ in pr]))
        R = float(np.mean([b for _, b in pr]))
        row[f"val_P_stage{k + 1}"] = P
        row[f"val_R_stage{k + 1}"] = R
        row[f"val_Fn_stage{k + 1}"] = float(np.mean([fn_score(a, b, cfg.guidance[k]) for a, b in pr]))
    return row


def train(train_pairs, config: CascadeConfig, prior_model: PriorModel | None,
          val_pairs=None, model: CascadeModel | None = None) -> TrainResult:
    """Adam on the total loss with seeded epoch shuffling.

    Validation curves are recorded every ``config.eval_every`` iterations
    and after the last one when ``val_pairs`` is given.
    """
    train_pairs = list(train_pairs)
    if not train_pairs:
        raise ValueError("empty training set")
    model = model or CascadeModel.create(config)
    cfg = model.config
    coords, prior, labels, E_gt = stack_pairs(train_pairs, prior_model)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    order = np.empty(0, dtype=int)
    result = TrainResult(model)
    window: list[dict] = []
    for it in range(cfg.iters):
        if len(order) < cfg.batch_size:
            order = np.concatenate([order, rng.permutation(len(train_pairs))])
        idx, order = order[:cfg.batch_size], order[cfg.batch_size:]
        tape = ad.Tape()
        regression = it >= cfg.warmup_iters and cfg.eta_reg != 0.0
        out, P = model.forward(coords[idx], prior[idx], tape, training=True, regression=regression)
        terms = total_loss(out, labels[idx], E_gt[idx], it, cfg)
        if regression and (out.E_ok is None or not np.all(out.E_ok)):
            result.skipped_regression_steps += 1
        value = float(terms.total.value)
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss at iteration {it}", {
                "iteration": it, "loss": repr(value), "stage_losses": terms.stage,
                "reg": terms.reg, "pairs": [train_pairs[i].pair_id for i in idx]})
        if terms.total.tape is tape:
            grads = tape.gradients(terms.total, P)
            try:
                ad.adam_step(model.store, grads, cfg.lr)
            except FloatingPointError as exc:
                raise TrainingError(str(exc), {"iteration": it, "loss": value,
                                               "pairs": [train_pairs[i].pair_id for i in idx]}) from exc
        lams = []
        for stage_w in terms.weights:
            vals = [w.lam for w in stage_w if w is not None]
            lams.append(float(np.mean(vals)) if vals else float("nan"))
        window.append({"loss_total": value, "stage": terms.stage, "reg": terms.reg, "lam": lams})
        last = it == cfg.iters - 1
        if val_pairs and ((it + 1) % cfg.eval_every == 0 or last):
            row = {"iter": it + 1, "loss_total": float(np.mean([w["loss_total"] for w in window]))}
            for k in range(cfg.stages):
                row[f"loss_stage{k + 1}"] = float(np.mean([w["stage"][k] for w in window]))
                row[f"lambda_stage{k + 1}"] = float(np.mean([w["lam"][k] for w in window]))
            row["loss_reg"] = float(np.mean([w["reg"] for w in window]))
            row.update(_validation_row(model, val_pairs, prior_model))
            result.curves.append({c: row[c] for c in curve_columns(cfg)})
            log.info("iter %d loss %.4f final P %.3f R %.3f", it + 1, row["loss_total"],
                     row[f"val_P_stage{cfg.stages}"], row[f"val_R_stage{cfg.stages}"])
            window = []
    return result
