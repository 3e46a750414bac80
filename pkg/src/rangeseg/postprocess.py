"""Back-project per-pixel predictions to every point with a windowed KNN vote."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .errors import ShapeError
from .projection import RangeImageSet
from .scanio import PointCloudScan


@dataclass(frozen=True)
class KnnConfig:
    S: int = 5  # window side, odd
    K: int = 5  # neighbours that vote
    sigma: float = 1.0  # depth cutoff, metres
    gauss_bw: float = 1.0  # inverse-Gaussian kernel bandwidth
    vote_kept: bool = False  # also re-vote points that own their pixel

    def __post_init__(self):
        if self.S < 1 or self.S % 2 == 0:
            raise ValueError(f"window side S must be odd and >= 1, got {self.S}")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not self.sigma > 0 or not self.gauss_bw > 0:
            raise ValueError("sigma and gauss_bw must be positive")


@numba.njit(cache=True)
def _knn_kernel(pred, depth_img, valid, u, v, r, todo, S, K, sigma, bw, ncls, out):
    H, W = pred.shape
    half = S // 2
    dist = np.empty(S * S)
    cls = np.empty(S * S, dtype=np.int64)
    votes = np.zeros(ncls)
    inv2 = 1.0 / (2.0 * bw * bw)
    for k in range(u.shape[0]):
        if not todo[k]:
            continue
        n = 0
        best_d = np.inf
        best_c = -1
        for dv in range(-half, half + 1):
            vv = v[k] + dv
            if vv < 0 or vv >= H:
                continue
            for du in range(-half, half + 1):
                uu = u[k] + du
                if uu < 0 or uu >= W or not valid[vv, uu]:
                    continue
                d = abs(depth_img[vv, uu] - r[k])
                if d < best_d:
                    best_d = d
                    best_c = pred[vv, uu]
                if d < sigma:
                    dist[n] = d
                    cls[n] = pred[vv, uu]
                    n += 1
        if best_c < 0:
            out[k] = 0
            continue
        if n == 0:
            out[k] = best_c
            continue
        order = np.argsort(dist[:n], kind="mergesort")
        votes[:] = 0.0
        for i in range(min(K, n)):
            j = order[i]
            votes[cls[j]] += np.exp(-dist[j] * dist[j] * inv2)
        out[k] = np.argmax(votes)


def point_depths(scan: PointCloudScan) -> np.ndarray:
    """Per-point range, rounded to float32 exactly as stored in the depth image."""
    xyz = scan.points[:, :3].astype(np.float64)
    x, y, z = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    return np.sqrt(x * x + y * y + z * z).astype(np.float32).astype(np.float64)


def knn_backproject(pred: np.ndarray, images: RangeImageSet, scan: PointCloudScan,
                    cfg: KnnConfig | None = None) -> np.ndarray:
    """Class id for every point of ``scan``.

    Points that won their pixel during projection take that pixel's prediction
    (unless ``cfg.vote_kept``). Every other point gathers the valid pixels in an
    S x S window around its projected pixel, keeps those whose depth differs by
    less than ``sigma``, and lets the K closest (by depth difference, window
    scan order on ties) vote with weight ``exp(-d^2 / (2 bw^2))``. Vote ties go
    to the lowest class id. With no candidate under ``sigma`` the nearest valid
    pixel decides; with no valid pixel at all the point gets the ignore id 0.
    """
    cfg = cfg or KnnConfig()
    pred = np.asarray(pred)
    if pred.shape != images.shape:
        raise ShapeError(f"prediction {pred.shape} does not match images {images.shape}")
    if len(scan) != images.n_points:
        raise ShapeError(f"scan has {len(scan)} points, projection has {images.n_points}")
    pred = pred.astype(np.int64)
    out = np.zeros(len(scan), dtype=np.int64)
    if cfg.vote_kept:
        todo = np.ones(len(scan), dtype=np.bool_)
    else:
        own = images.kept
        out[own] = pred[images.point_v[own], images.point_u[own]]
        todo = ~own
    if todo.any():
        ncls = int(pred.max()) + 1 if pred.size else 1
        _knn_kernel(pred, images.depth.astype(np.float64), images.valid_mask,
                    images.point_u.astype(np.int64), images.point_v.astype(np.int64),
                    point_depths(scan), todo, cfg.S, cfg.K, float(cfg.sigma),
                    float(cfg.gauss_bw), max(ncls, 1), out)
    return out
