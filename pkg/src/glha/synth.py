"""Synthetic two-view correspondence sets with exact ground truth."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .geometry import (
    INLIER_THRESHOLD,
    CorrespondencePair,
    epipolar_line_distances,
    epipolar_residuals,
    essential_from_pose,
)


@dataclass
class SceneConfig:
    n: int = 512
    inlier_rate: float = 0.3
    noise: float = 1e-3
    depth_range: tuple[float, float] = (2.0, 8.0)
    fov: float = 1.0  # half-width of the normalized image square
    rotation_deg: tuple[float, float] = (5.0, 30.0)
    translation: float = 1.0
    ratio_inlier_beta: tuple[float, float] = (2.0, 5.0)
    ratio_outlier_beta: tuple[float, float] | None = None  # default: mirrored inlier shape
    threshold: float = INLIER_THRESHOLD
    outlier_margin: float = 10.0  # outliers sit at least margin * threshold from both epipolar lines
    exact_inlier_count: bool = False  # round(n * inlier_rate) instead of a binomial draw
    max_retries: int = 20
    seed: int = 0

    def __post_init__(self):
        self.depth_range = tuple(self.depth_range)
        self.rotation_deg = tuple(self.rotation_deg)
        self.ratio_inlier_beta = tuple(self.ratio_inlier_beta)
        if self.ratio_outlier_beta is not None:
            self.ratio_outlier_beta = tuple(self.ratio_outlier_beta)
        if not 0 < self.inlier_rate < 1:
            raise ValueError("inlier_rate must lie in (0, 1)")
        if self.inlier_rate * self.n < 8:
            raise ValueError("inlier_rate * n must be at least 8")
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")

    @property
    def outlier_beta(self) -> tuple[float, float]:
        if self.ratio_outlier_beta is not None:
            return self.ratio_outlier_beta
        a, b = self.ratio_inlier_beta
        return (b, a)


def random_rotation(rng: np.random.Generator, deg_range) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.radians(rng.uniform(*deg_range))
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def _visible_points(rng, R, t, count, cfg: SceneConfig) -> np.ndarray:
    """Normalized projections (x1, y1, x2, y2) of points seen by both cameras."""
    out = np.empty((0, 4))
    for _ in range(1000):
        if len(out) >= count:
            break
        m = max(64, 4 * (count - len(out)))
        xy = rng.uniform(-cfg.fov, cfg.fov, size=(m, 2))
        depth = rng.uniform(*cfg.depth_range, size=m)
        X1 = np.column_stack([xy * depth[:, None], depth])
        X2 = X1 @ R.T + t
        z2 = X2[:, 2]
        ok = z2 > 1e-3
        p2 = X2[ok, :2] / z2[ok, None]
        keep = np.all(np.abs(p2) <= cfg.fov, axis=1)
        out = np.vstack([out, np.column_stack([xy[ok][keep], p2[keep]])])
    if len(out) < count:
        raise RuntimeError("could not sample enough co-visible points; check the scene config")
    return out[:count]


def _sample_pair(rng: np.random.Generator, cfg: SceneConfig, pair_id: str) -> CorrespondencePair:
    R = random_rotation(rng, cfg.rotation_deg)
    t_dir = rng.normal(size=3)
    t_dir /= np.linalg.norm(t_dir)
    t = cfg.translation * t_dir
    E = essential_from_pose(R, t)

    if cfg.exact_inlier_count:
        n_in = int(round(cfg.n * cfg.inlier_rate))
    else:
        n_in = int(rng.binomial(cfg.n, cfg.inlier_rate))
    n_out = cfg.n - n_in
    inl = _visible_points(rng, R, t, n_in, cfg)
    if cfg.noise > 0:
        inl = inl + rng.normal(scale=cfg.noise, size=inl.shape)

    # outliers: true first-view points matched to random second-view locations,
    # redrawn while either one-sided line distance falls inside the margin. The
    # symmetric distance alone is unstable near an epipole, where a slightly
    # wrong model can pull a far outlier under the threshold.
    outl = _visible_points(rng, R, t, n_out, cfg)
    outl[:, 2:] = rng.uniform(-cfg.fov, cfg.fov, size=(n_out, 2))
    floor = max(cfg.outlier_margin, 1.0) * cfg.threshold
    for _ in range(1000):
        bad = np.minimum(*epipolar_line_distances(E, outl)) < floor
        if not bad.any():
            break
        outl[bad, 2:] = rng.uniform(-cfg.fov, cfg.fov, size=(int(bad.sum()), 2))

    coords = np.vstack([inl, outl])
    ratios = np.concatenate([rng.beta(*cfg.ratio_inlier_beta, size=n_in),
                             rng.beta(*cfg.outlier_beta, size=n_out)])
    perm = rng.permutation(cfg.n)
    coords, ratios = coords[perm], ratios[perm]
    labels = epipolar_residuals(E, coords) < cfg.threshold
    return CorrespondencePair(pair_id, coords, ratios, labels, E, R, t_dir)


def generate_pair(rng: np.random.Generator, config: SceneConfig, pair_id: str = "pair") -> CorrespondencePair:
    """Sample one labeled pair; retries while fewer than 8 geometric inliers survive."""
    for _ in range(config.max_retries):
        pair = _sample_pair(rng, config, pair_id)
        if pair.labels.sum() >= 8:
            return pair
    raise RuntimeError(f"{pair_id}: fewer than 8 labeled inliers after {config.max_retries} attempts")


def pair_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def generate_pairs(config: SceneConfig, n_pairs: int, prefix: str = "p", start: int = 0):
    return [generate_pair(pair_rng(config.seed, i), config, f"{prefix}{config.seed}-{i:06d}")
            for i in range(start, start + n_pairs)]


def split_counts(n_pairs: int, ratios=(0.8, 0.1, 0.1)) -> list[int]:
    if n_pairs < len(ratios):
        raise ValueError(f"need at least {len(ratios)} pairs to split")
    total = sum(ratios)
    counts = [int(round(n_pairs * r / total)) for r in ratios[:-1]]
    counts.append(n_pairs - sum(counts))
    return counts


def generate_dataset(config: SceneConfig, n_pairs: int, splits=(0.8, 0.1, 0.1),
                     out_dir=None, names=("train", "val", "test")) -> dict:
    """Generate disjoint splits; write ``<name>.jsonl`` files when ``out_dir`` is given."""
    counts = split_counts(n_pairs, splits)
    pairs = generate_pairs(config, n_pairs)
    result, start = {}, 0
    for name, c in zip(names, counts):
        result[name] = pairs[start:start + c]
        start += c
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name in names:
            write_dataset(out / f"{name}.jsonl", result[name])
    return result


# --------------------------------------------------------------------- JSON Lines


def _floats(values) -> str:
    return "[" + ",".join(format(float(v), ".17g") for v in np.ravel(values)) + "]"


def pair_to_line(p: CorrespondencePair) -> str:
    labels = "[" + ",".join("true" if b else "false" for b in p.labels) + "]"
    return ("{" + f'"pair_id":{json.dumps(p.pair_id)},"n":{p.n},"coords":{_floats(p.coords)},'
            f'"ratios":{_floats(p.ratios)},"labels":{labels},"E_gt":{_floats(p.E_gt)},'
            f'"R_gt":{_floats(p.R_gt)},"t_gt":{_floats(p.t_gt)}' + "}")


def write_dataset(path, pairs) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in pairs:
            fh.write(pair_to_line(p) + "\n")


def _parse_pair(line: str, lineno: int, path) -> CorrespondencePair:
    where = f"{path}:{lineno}"
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{where}: malformed record ({exc.msg})") from None
    try:
        n = int(rec["n"])
        coords = np.array(rec["coords"], dtype=float).reshape(n, 4)
        ratios = np.array(rec["ratios"], dtype=float).reshape(n)
        labels = np.array(rec["labels"], dtype=bool).reshape(n)
        E = np.array(rec["E_gt"], dtype=float).reshape(3, 3)
        R = np.array(rec["R_gt"], dtype=float).reshape(3, 3)
        t = np.array(rec["t_gt"], dtype=float).reshape(3)
        pid = str(rec["pair_id"])
    except (KeyError, ValueError, TypeError) as exc:
        raise ValueError(f"{where}: malformed record ({exc})") from None
    return CorrespondencePair(pid, coords, ratios, labels, E, R, t)


def read_dataset(path) -> list[CorrespondencePair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            pairs.append(_parse_pair(line, lineno, path))
    return pairs


def scene_config_dict(cfg: SceneConfig) -> dict:
    return asdict(cfg)
