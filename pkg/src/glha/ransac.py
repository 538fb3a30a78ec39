"""Hypothesize-and-verify essential matrix estimation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import INLIER_THRESHOLD, design_rows, eight_point, epipolar_residuals, project_to_essential


@dataclass
class RansacConfig:
    max_iters: int = 2000
    threshold: float = INLIER_THRESHOLD
    confidence: float = 0.999
    seed: int = 0
    chunk: int = 128

    def __post_init__(self):
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")


@dataclass
class RansacResult:
    E: np.ndarray | None
    mask: np.ndarray
    success: bool
    iterations: int
    history: list[int] = field(default_factory=list)  # best consensus after each iteration


def required_iterations(inlier_fraction: float, confidence: float, sample_size: int = 8) -> float:
    if inlier_fraction >= 1.0:
        return 1.0
    p_good = inlier_fraction ** sample_size
    if p_good <= 0.0:
        return math.inf
    return math.log(1.0 - confidence) / math.log1p(-p_good)


def _minimal_fits(coords: np.ndarray, samples: np.ndarray) -> np.ndarray:
    A = design_rows(coords[samples])  # (K, 8, 9)
    _, _, vt = np.linalg.svd(A)
    E = vt[:, -1, :].reshape(-1, 3, 3)
    U, _, Vt = np.linalg.svd(E)
    return U @ (np.array([1.0, 1.0, 0.0])[:, None] * Vt) / np.sqrt(2.0)


def ransac_essential(coords, config: RansacConfig | None = None, max_refits: int = 10) -> RansacResult:
    config = config or RansacConfig()
    coords = np.asarray(coords, dtype=float)
    N = len(coords)
    if N < 8:
        raise ValueError(f"ransac_essential needs at least 8 correspondences, got {N}")
    rng = np.random.default_rng(config.seed)
    best_count, best_cost, best_E = -1, math.inf, None
    history: list[int] = []
    it = 0
    limit = float(config.max_iters)
    while it < limit:
        k = int(min(config.chunk, math.ceil(limit - it)))
        if N == 8:
            samples = np.tile(np.arange(8), (k, 1))
        else:
            samples = np.argpartition(rng.random((k, N)), 8, axis=1)[:, :8]
        Es = _minimal_fits(coords, samples)
        res = epipolar_residuals(Es, coords)
        counts = (res < config.threshold).sum(axis=1)
        costs = np.minimum(res, config.threshold).sum(axis=1)
        for j in range(k):
            it += 1
            if costs[j] < best_cost:
                best_cost, best_count, best_E = float(costs[j]), int(counts[j]), Es[j]
                limit = min(float(config.max_iters),
                            required_iterations(best_count / N, config.confidence))
            history.append(best_count)
            if it >= limit:
                break
    mask = epipolar_residuals(best_E, coords) < config.threshold
    if best_count < 8:
        return RansacResult(None, mask, False, it, history)
    # final least-squares refit on the consensus set, repeated until it is stable
    for _ in range(max_refits):
        try:
            refit = project_to_essential(eight_point(coords[mask]))
        except (ValueError, ArithmeticError):
            break
        refit_mask = epipolar_residuals(refit, coords) < config.threshold
        if refit_mask.sum() < 8:
            break
        best_E, stable = refit, np.array_equal(refit_mask, mask)
        mask = refit_mask
        if stable:
            break
    return RansacResult(best_E, mask, True, it, history)
