"""Desk-scale trend experiments: guided vs fixed weights, guidance sweep, cascade vs plain.

Each run is one (suite, variant, seed) triple. Results are JSON files keyed
by a hash of everything that determines them, so scripts can resume and the
acceptance tests can check that cached results match the current settings.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

from .network import CascadeConfig, OracleModel
from .ransac import RansacConfig
from .ratio_prior import fit_empirical_pdfs
from .synth import SceneConfig, generate_pairs
from .training import evaluate, evaluate_raw_ransac, train

SEEDS = (0, 1, 2)


@dataclass(frozen=True)
class DataSpec:
    inlier_rate: float
    train: int = 2000
    val: int = 50
    test: int = 200
    n: int = 512
    seed_offset: int = 0

    def scene(self, seed: int) -> SceneConfig:
        return SceneConfig(n=self.n, inlier_rate=self.inlier_rate, seed=self.seed_offset + seed)


# Width and depth are scaled down from the full architecture so that a run
# takes minutes on one CPU core; see README for the exact budget.
BASE = dict(channels=32, ca_groups=4, ca_reduction=4, batch_size=8, iters=1500,
            warmup_iters=150, eval_every=250, lr=1e-3)

HARD = DataSpec(inlier_rate=0.1, seed_offset=100)
CASCADE_DATA = DataSpec(inlier_rate=0.3, seed_offset=200)


def _single(**kw) -> dict:
    return {**BASE, "feature_layers": 4, "cascade": False, "eta_coarse": (), **kw}


SUITES: dict[str, tuple[DataSpec, dict[str, dict]]] = {
    # guided (n = 1) against fixed 0.5 / 0.5 weights, plus the guidance sweep
    "hard": (HARD, {
        "ibce": _single(loss="ibce", guidance=(1.0,)),
        "guided-n0.5": _single(loss="guided", guidance=(0.5,)),
        "guided-n1": _single(loss="guided", guidance=(1.0,)),
        "guided-n2": _single(loss="guided", guidance=(2.0,)),
    }),
    # 4 + 2 + 2 cascade against a plain 8-block network of the same depth
    "cascade": (CASCADE_DATA, {
        "cascade": dict(BASE, feature_layers=4, refine_layers=2, refinement_modules=2, cascade=True,
                        guidance=(0.3, 0.25, 0.2), eta_coarse=(0.1, 0.1)),
        "plain": _single(feature_layers=8, guidance=(0.2,)),
    }),
}


def run_key(suite: str, variant: str, seed: int) -> dict:
    data, variants = SUITES[suite]
    cfg = CascadeConfig(**variants[variant], seed=seed)
    return {"suite": suite, "variant": variant, "seed": seed,
            "data": asdict(data), "config": cfg.to_dict()}


def key_hash(key: dict) -> str:
    return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]


def result_path(root, suite: str, variant: str, seed: int) -> Path:
    return Path(root) / suite / f"{variant}-seed{seed}.json"


def load_result(root, suite: str, variant: str, seed: int) -> dict | None:
    """Cached result if present and produced by the current settings."""
    path = result_path(root, suite, variant, seed)
    if not path.exists():
        return None
    rec = json.loads(path.read_text())
    if rec.get("key_hash") != key_hash(run_key(suite, variant, seed)):
        return None
    return rec


def _splits(data: DataSpec, seed: int):
    pairs = generate_pairs(data.scene(seed), data.train + data.val + data.test)
    a, b = data.train, data.train + data.val
    return pairs[:a], pairs[a:b], pairs[b:]


def run(suite: str, variant: str, seed: int) -> dict:
    key = run_key(suite, variant, seed)
    data, _ = SUITES[suite]
    cfg = CascadeConfig(**key["config"])
    train_pairs, val_pairs, test_pairs = _splits(data, seed)
    prior = fit_empirical_pdfs(train_pairs)
    t0 = time.perf_counter()
    result = train(train_pairs, cfg, prior, val_pairs)
    seconds = time.perf_counter() - t0
    rec = dict(key, key_hash=key_hash(key), train_seconds=round(seconds, 1), curves=result.curves)
    posts = ("weighted8pt", "ransac") if suite == "cascade" else (None,)
    rec["test"] = {}
    for post in posts:
        metrics = evaluate(result.model, test_pairs, prior, post, RansacConfig(seed=seed),
                           guidance_final=cfg.guidance[-1])
        rec["test"][post or "none"] = metrics["summary"]
    if suite == "cascade":
        rec["test"]["raw_ransac"] = evaluate_raw_ransac(test_pairs, RansacConfig(seed=seed))
    return rec


def run_cached(root, suite: str, variant: str, seed: int, force: bool = False) -> dict:
    if not force:
        cached = load_result(root, suite, variant, seed)
        if cached is not None:
            return cached
    rec = run(suite, variant, seed)
    path = result_path(root, suite, variant, seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(rec, indent=1, sort_keys=True) + "\n")
    return rec


def oracle_ceiling(n_pairs: int = 100, seed: int = 0) -> dict:
    """Ground-truth classifier with weighted eight-point on noise-free pairs."""
    scene = replace(CASCADE_DATA.scene(seed), noise=0.0)
    pairs = generate_pairs(scene, n_pairs)
    return evaluate(OracleModel(), pairs, None, "weighted8pt")["summary"]
