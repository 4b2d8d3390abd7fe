"""Similarity-transform estimation and the map alignment refiner pieces.

``kabsch_umeyama`` solves the closed-form least squares fit of scale,
rotation and translation between matched point sets (centroids, covariance
SVD with reflection correction, trace formula for scale).  ``ransac_sim3``
wraps it with outlier rejection over id-matched tagged points.  The AIMD
schedule decides how often a follower re-aligns against its group leader:
interval + 1 after a good round, interval / 2 after a bad one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Rotation, Sim3Transform


class DegenerateInputError(ValueError):
    pass


class NoModelError(RuntimeError):
    pass


@dataclass
class RansacParams:
    iterations: int = 200
    inlier_threshold: float = 0.05
    min_inliers: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.iterations <= 0 or self.inlier_threshold <= 0 or self.min_inliers <= 0:
            raise ValueError("RANSAC parameters must be positive")


def kabsch_umeyama(src: np.ndarray, dst: np.ndarray) -> Sim3Transform:
    """Least squares similarity transform with dst ~= s * R @ src + t.

    Raises DegenerateInputError when fewer than 3 points are given or the
    centered source is (numerically) rank deficient below 2, where the
    rotation is no longer determined.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("src and dst must be matching (n, 3) arrays")
    n = src.shape[0]
    if n < 3:
        raise DegenerateInputError(f"need at least 3 points, got {n}")
    mu_src = src.mean(axis=0)
    mu_dst = dst.mean(axis=0)
    src_c = src - mu_src
    dst_c = dst - mu_dst
    var_src = float((src_c ** 2).sum()) / n
    if var_src < 1e-24:
        raise DegenerateInputError("source points are coincident")
    cov = (dst_c.T @ src_c) / n
    u, d, vt = np.linalg.svd(cov)
    if d[1] < 1e-12 * max(d[0], 1e-300):
        raise DegenerateInputError("covariance rank below 2 (collinear points)")
    s_fix = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s_fix[2] = -1.0
    rot = u @ np.diag(s_fix) @ vt
    scale = float(np.sum(d * s_fix)) / var_src
    if scale <= 0:
        raise DegenerateInputError("non-positive scale solution")
    trans = mu_dst - scale * rot @ mu_src
    return Sim3Transform(scale, Rotation.from_matrix(rot), trans)


def ransac_sim3(
    src: list[tuple[int, np.ndarray]],
    dst: list[tuple[int, np.ndarray]],
    params: RansacParams,
) -> tuple[Sim3Transform, list[int]]:
    """Robust fit between tagged point sets matched by shared ids.

    Returns the refit transform and the ids of its inlier correspondences.
    Deterministic for a fixed seed.  Raises NoModelError when fewer than 3
    ids are shared or no sample reaches ``min_inliers``.
    """
    src_map = {uid: np.asarray(p, dtype=float) for uid, p in src}
    dst_map = {uid: np.asarray(p, dtype=float) for uid, p in dst}
    common = sorted(set(src_map) & set(dst_map))
    if len(common) < 3:
        raise NoModelError(f"only {len(common)} shared ids, need at least 3")
    a = np.array([src_map[u] for u in common])
    b = np.array([dst_map[u] for u in common])
    rng = np.random.default_rng(params.seed)
    n = len(common)
    best_count = 0
    best_mask: np.ndarray | None = None
    for _ in range(params.iterations):
        idx = rng.choice(n, size=3, replace=False)
        try:
            model = kabsch_umeyama(a[idx], b[idx])
        except DegenerateInputError:
            continue
        err = np.linalg.norm(b - model.apply(a), axis=1)
        mask = err < params.inlier_threshold
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
    if best_mask is None or best_count < params.min_inliers:
        raise NoModelError(
            f"best sample had {best_count} inliers, need {params.min_inliers}"
        )
    refit = kabsch_umeyama(a[best_mask], b[best_mask])
    inlier_ids = [u for u, keep in zip(common, best_mask) if keep]
    return refit, inlier_ids


def alignment_residuals(
    transform: Sim3Transform,
    src: list[tuple[int, np.ndarray]],
    dst: list[tuple[int, np.ndarray]],
    ids: list[int],
) -> np.ndarray:
    src_map = {uid: np.asarray(p, dtype=float) for uid, p in src}
    dst_map = {uid: np.asarray(p, dtype=float) for uid, p in dst}
    pts_s = np.array([src_map[u] for u in ids])
    pts_d = np.array([dst_map[u] for u in ids])
    return np.linalg.norm(pts_d - transform.apply(pts_s), axis=1)


def well_aligned(
    inlier_ratio: float, inlier_rmse: float, ok_ratio: float, ok_rmse: float
) -> bool:
    """Round verdict: enough correspondences agreed and the fit was tight."""
    return inlier_ratio >= ok_ratio and inlier_rmse <= ok_rmse


def aimd_next(interval: float, aligned: bool, t_min: float, t_max: float) -> float:
    """Additive increase (+1) on a good round, halving on a bad one, clamped."""
    nxt = interval + 1.0 if aligned else interval / 2.0
    return min(max(nxt, t_min), t_max)


@dataclass
class AimdState:
    interval: float
    next_due: float
    t_min: float = 1.0
    t_max: float = 60.0

    def record(self, aligned: bool, now: float) -> None:
        self.interval = aimd_next(self.interval, aligned, self.t_min, self.t_max)
        self.next_due = now + self.interval

    def skip(self, now: float) -> None:
        """Round could not run (leader unreachable); retry at the same interval."""
        self.next_due = now + self.interval
