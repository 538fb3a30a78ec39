"""Lowe-ratio prior: empirical inlier/outlier ratio densities and posteriors."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

SMOOTHING = 1e-3


@dataclass(frozen=True)
class RatioPdf:
    bin_edges: np.ndarray
    densities: np.ndarray

    def __call__(self, r) -> np.ndarray:
        return self.densities[bin_index(self.bin_edges, r)]

    def bin_masses(self) -> np.ndarray:
        return self.densities * np.diff(self.bin_edges)


@dataclass(frozen=True)
class PriorModel:
    f_in: RatioPdf
    f_out: RatioPdf

    @property
    def bin_edges(self) -> np.ndarray:
        return self.f_in.bin_edges

    def to_json(self) -> str:
        return json.dumps({
            "bin_edges": self.bin_edges.tolist(),
            "f_in": self.f_in.densities.tolist(),
            "f_out": self.f_out.densities.tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "PriorModel":
        d = json.loads(text)
        edges = np.array(d["bin_edges"], dtype=float)
        return cls(RatioPdf(edges, np.array(d["f_in"], dtype=float)),
                   RatioPdf(edges, np.array(d["f_out"], dtype=float)))


def bin_index(edges: np.ndarray, r) -> np.ndarray:
    """Half-open bins ``[e_i, e_i+1)``; ``r == 1`` falls in the last bin."""
    idx = np.searchsorted(edges, np.asarray(r, dtype=float), side="right") - 1
    return np.clip(idx, 0, len(edges) - 2)


def _density(samples, edges, smoothing) -> RatioPdf:
    counts = np.bincount(bin_index(edges, samples), minlength=len(edges) - 1).astype(float)
    mass = counts / max(counts.sum(), 1.0) + smoothing
    mass /= mass.sum()
    return RatioPdf(edges, mass / np.diff(edges))


def fit_densities(inlier_ratios, outlier_ratios, bins: int = 20,
                  smoothing: float = SMOOTHING) -> PriorModel:
    inlier_ratios = np.asarray(inlier_ratios, dtype=float)
    outlier_ratios = np.asarray(outlier_ratios, dtype=float)
    if inlier_ratios.size == 0 or outlier_ratios.size == 0:
        raise ValueError("need at least one inlier and one outlier ratio")
    edges = np.linspace(0.0, 1.0, bins + 1)
    return PriorModel(_density(inlier_ratios, edges, smoothing),
                      _density(outlier_ratios, edges, smoothing))


def fit_empirical_pdfs(pairs, bins: int = 20, smoothing: float = SMOOTHING) -> PriorModel:
    """Histogram the ratios of a labeled corpus, split by ground-truth label."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("empty training corpus")
    r = np.concatenate([p.ratios for p in pairs])
    lab = np.concatenate([p.labels for p in pairs]).astype(bool)
    return fit_densities(r[lab], r[~lab], bins, smoothing)


def estimate_inlier_ratio(ratios, model: PriorModel) -> tuple[float, bool]:
    """Least-squares mixture weight of the pair's ratio histogram.

    Returns ``(alpha, degenerate)``; ``degenerate`` is set (and alpha = 0.5)
    when the two densities coincide.
    """
    ratios = np.asarray(ratios, dtype=float)
    if ratios.size == 0:
        raise ValueError("estimate_inlier_ratio: no ratios")
    edges = model.bin_edges
    h = np.bincount(bin_index(edges, ratios), minlength=len(edges) - 1) / ratios.size
    p_in, p_out = model.f_in.bin_masses(), model.f_out.bin_masses()
    d = p_in - p_out
    denom = float(d @ d)
    if denom == 0.0:
        return 0.5, True
    alpha = float((h - p_out) @ d) / denom
    return min(max(alpha, 0.0), 1.0), False


def posterior_inlier_prob(r, alpha: float, model: PriorModel) -> np.ndarray:
    fi = model.f_in(r) * alpha
    fo = model.f_out(r) * (1.0 - alpha)
    return fi / (fi + fo)


def pair_prior(pair, model: PriorModel) -> np.ndarray:
    """Per-correspondence prior inlier probability for one pair."""
    alpha, _ = estimate_inlier_ratio(pair.ratios, model)
    return posterior_inlier_prob(pair.ratios, alpha, model)
