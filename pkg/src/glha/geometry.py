"""Essential-matrix algebra for calibrated two-view geometry.

Convention: a 3D point ``X1`` in the first camera frame maps to
``X2 = R @ X1 + t`` in the second, and ``E = [t]x R`` so that
``p2.T @ E @ p1 = 0`` for homogeneous normalized image points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

INLIER_THRESHOLD = 1e-4


class DegenerateConfigurationError(ValueError):
    pass


class CheiralityAmbiguousError(ValueError):
    pass


@dataclass
class CorrespondencePair:
    pair_id: str
    coords: np.ndarray  # (N, 4): x1, y1, x2, y2
    ratios: np.ndarray  # (N,)
    labels: np.ndarray  # (N,) bool
    E_gt: np.ndarray
    R_gt: np.ndarray
    t_gt: np.ndarray

    @property
    def n(self) -> int:
        return len(self.coords)


@dataclass
class RelativePose:
    R: np.ndarray
    t: np.ndarray


def skew(t) -> np.ndarray:
    x, y, z = np.asarray(t, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def essential_from_pose(R, t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if np.linalg.norm(t) < 1e-12:
        raise DegenerateConfigurationError("translation is zero; essential matrix undefined")
    E = skew(t) @ np.asarray(R, dtype=float)
    return E / np.linalg.norm(E)


def epipolar_line_distances(E, coords) -> tuple[np.ndarray, np.ndarray]:
    """Squared point-to-epipolar-line distances in the second and first image.

    Broadcasts like :func:`epipolar_residuals`. A vanishing line normal gives
    ``inf`` unless the algebraic error is also zero.
    """
    E = np.asarray(E, dtype=float)
    coords = np.asarray(coords, dtype=float)
    n = coords.shape[0]
    p1 = np.column_stack([coords[:, 0], coords[:, 1], np.ones(n)])
    p2 = np.column_stack([coords[:, 2], coords[:, 3], np.ones(n)])
    Ep1 = np.einsum("...ij,nj->...ni", E, p1)
    Etp2 = np.einsum("...ji,nj->...ni", E, p2)
    e2 = np.einsum("ni,...ni->...n", p2, Ep1) ** 2
    a = Ep1[..., 0] ** 2 + Ep1[..., 1] ** 2
    b = Etp2[..., 0] ** 2 + Etp2[..., 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        ta = np.where(a > 0, e2 / np.where(a > 0, a, 1.0), np.where(e2 > 0, np.inf, 0.0))
        tb = np.where(b > 0, e2 / np.where(b > 0, b, 1.0), np.where(e2 > 0, np.inf, 0.0))
    both_zero = (a == 0) & (b == 0)
    return np.where(both_zero, np.inf, ta), np.where(both_zero, np.inf, tb)


def epipolar_residuals(E, coords) -> np.ndarray:
    """Symmetric epipolar distance for every row of ``coords``.

    Broadcasts: ``E`` of shape ``(..., 3, 3)`` against ``coords`` ``(N, 4)``
    gives ``(..., N)``. Rows where both line normals vanish get ``inf``.
    """
    ta, tb = epipolar_line_distances(E, coords)
    return ta + tb


def epipolar_residual(E, row) -> float:
    return float(epipolar_residuals(E, np.asarray(row, dtype=float).reshape(1, 4))[..., 0])


def label_correspondences(pair_or_E, coords=None, threshold: float = INLIER_THRESHOLD) -> np.ndarray:
    if isinstance(pair_or_E, CorrespondencePair):
        E, coords = pair_or_E.E_gt, pair_or_E.coords
    else:
        E = pair_or_E
    return epipolar_residuals(E, coords) < threshold


def design_rows(coords) -> np.ndarray:
    """Rows ``x`` with ``x . vec(E) = p2^T E p1`` (row-major ``vec``)."""
    c = np.asarray(coords, dtype=float)
    x1, y1, x2, y2 = c[..., 0], c[..., 1], c[..., 2], c[..., 3]
    one = np.ones_like(x1)
    return np.stack([x2 * x1, x2 * y1, x2, y2 * x1, y2 * y1, y2, x1, y1, one], axis=-1)


def weighted_eight_point(coords, w, strict: bool = True, gap_tol: float = 1e-8):
    """Essential matrix minimizing the weighted algebraic epipolar error.

    ``coords`` is ``(..., N, 4)``, ``w`` ``(..., N)`` (array or tracked
    tensor). Weights are normalized to sum to one, so the result is
    invariant to their scale. Returns a unit-Frobenius ``(..., 3, 3)``
    tensor; with ``strict=False`` returns ``(E, ok)`` where ``ok`` marks
    matrices whose fit is well-posed and differentiable.
    """
    w = ad.as_tensor(w)
    X = design_rows(coords)
    if w.shape != X.shape[:-1]:
        raise ad.ShapeError("weighted_eight_point", np.shape(coords), w.shape)
    support = (w.value > 0).sum(axis=-1)
    total = w.value.sum(axis=-1)
    valid = (support >= 8) & (total > 0)
    if strict and not np.all(valid):
        raise DegenerateConfigurationError(
            f"weighted design needs at least 8 positive weights (got {int(np.min(support))})")
    safe_total = np.where(valid, total, 1.0)
    wn = w / ad.Tensor(safe_total[..., None])
    if not np.all(valid):
        uniform = np.full(w.shape, 1.0 / w.shape[-1])
        wn = ad.select(np.broadcast_to(valid[..., None], w.shape), wn, uniform)
    A = ad.matmul(ad.Tensor(np.swapaxes(X, -1, -2)), ad.mul(ad.reshape(wn, wn.shape + (1,)), X))
    lead = A.shape[:-2]
    if strict:
        v = ad.smallest_eigvec(A, gap_tol=gap_tol, strict=True)
        return ad.reshape(v, lead + (3, 3))
    v, ok = ad.smallest_eigvec(A, gap_tol=gap_tol, strict=False)
    return ad.reshape(v, lead + (3, 3)), ok & valid


def eight_point(coords, w=None) -> np.ndarray:
    """Plain (non-differentiable) weighted eight-point fit returning an array."""
    coords = np.asarray(coords, dtype=float)
    if w is None:
        w = np.ones(coords.shape[:-1])
    return weighted_eight_point(coords, np.asarray(w, dtype=float)).value


def project_to_essential(E) -> np.ndarray:
    E = np.asarray(E, dtype=float)
    U, _, Vt = np.linalg.svd(E)
    return U @ np.diag([1.0, 1.0, 0.0]) @ Vt / np.sqrt(2.0)


def _candidates(E):
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = U[:, 2]
    R1, R2 = U @ W @ Vt, U @ W.T @ Vt
    return [(R1, t), (R1, -t), (R2, t), (R2, -t)]


def cheirality_counts(R, t, coords) -> int:
    """Points whose midpoint triangulation lies in front of both cameras."""
    c = np.asarray(coords, dtype=float)
    n = len(c)
    d1 = np.column_stack([c[:, 0], c[:, 1], np.ones(n)])
    d2 = np.column_stack([c[:, 2], c[:, 3], np.ones(n)]) @ R  # rows of R^T p2
    c2 = -R.T @ t
    a = (d1 * d1).sum(1)
    b = (d1 * d2).sum(1)
    cc = (d2 * d2).sum(1)
    e = d1 @ c2
    f = d2 @ c2
    det = a * cc - b * b
    ok = det > 1e-12 * a * cc
    det = np.where(ok, det, 1.0)
    s1 = (e * cc - b * f) / det
    s2 = (b * e - a * f) / det
    X = 0.5 * (s1[:, None] * d1 + c2 + s2[:, None] * d2)
    z1 = X[:, 2]
    z2 = (X @ R.T + t)[:, 2]
    return int(np.sum(ok & (z1 > 0) & (z2 > 0)))


def decompose_essential(E, coords, mask=None) -> RelativePose:
    coords = np.asarray(coords, dtype=float)
    if mask is not None:
        coords = coords[np.asarray(mask, dtype=bool)]
    if len(coords) == 0:
        raise CheiralityAmbiguousError("no correspondences selected for the cheirality test")
    cands = _candidates(np.asarray(E, dtype=float))
    counts = [cheirality_counts(R, t, coords) for R, t in cands]
    best = int(np.argmax(counts))
    if counts[best] == 0 or counts.count(counts[best]) > 1:
        raise CheiralityAmbiguousError(f"cheirality counts {counts} do not single out a pose")
    R, t = cands[best]
    return RelativePose(R, t / np.linalg.norm(t))


def regression_loss(E_hat, E_gt) -> ad.Tensor:
    """``min(|E_hat - E|, |E_hat + E|)`` on unit-normalized matrices (batched)."""
    E_hat = ad.as_tensor(E_hat)
    E_gt = np.asarray(E_gt, dtype=float)
    nh = ad.norm(E_hat)
    ng = np.linalg.norm(E_gt, axis=(-2, -1))
    if np.any(nh.value == 0) or np.any(ng == 0):
        raise ValueError("regression_loss: zero essential matrix")
    Eh = E_hat / ad.reshape(nh, nh.shape + (1, 1))
    Eg = E_gt / ng[..., None, None]
    d_minus = ad.norm(Eh - Eg)
    d_plus = ad.norm(Eh + Eg)
    return ad.select(d_minus.value <= d_plus.value, d_minus, d_plus)


def rotation_angle_deg(R_a, R_b) -> float:
    c = (np.trace(np.asarray(R_b).T @ np.asarray(R_a)) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def pose_error(est: RelativePose, gt: RelativePose) -> tuple[float, float]:
    rot = rotation_angle_deg(est.R, gt.R)
    te = np.asarray(est.t, dtype=float)
    tg = np.asarray(gt.t, dtype=float)
    cos = abs(te @ tg) / (np.linalg.norm(te) * np.linalg.norm(tg))
    trans = float(np.degrees(np.arccos(np.clip(cos, 0.0, 1.0))))
    return rot, trans


def map_at(errors, tau: float, step: float = 1.0) -> float:
    """Mean over thresholds ``step, 2 step, ..., tau`` of the fraction of errors below each."""
    errors = np.asarray(errors, dtype=float)
    if errors.size == 0:
        raise ValueError("map_at: empty error list")
    k = tau / step
    if tau <= 0 or abs(k - round(k)) > 1e-9:
        raise ValueError(f"map_at: tau={tau} is not a positive multiple of step={step}")
    thresholds = step * np.arange(1, int(round(k)) + 1)
    return float(np.mean([(errors < th).mean() for th in thresholds]))
