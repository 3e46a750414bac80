"""Class-weighted cross-entropy and Lovasz-Softmax over per-pixel probabilities."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, LabelError
from .tensor import Tensor, _make, add, scale

WEIGHT_FLOOR = 1e-6
LOG_FLOOR = 1e-12


@dataclass
class ClassWeights:
    w: np.ndarray
    ignore: frozenset[int] = frozenset({0})

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.ignore = frozenset(self.ignore)

    @classmethod
    def uniform(cls, num_classes: int, ignore=(0,)) -> ClassWeights:
        w = np.ones(num_classes)
        w[list(ignore)] = 0.0
        return cls(w, frozenset(ignore))


@dataclass
class LossConfig:
    lam: float = 1.0
    lovasz_classes: str = "present"  # or "all"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.lovasz_classes not in ("present", "all"):
            raise ValueError(f"unknown lovasz class mode {self.lovasz_classes!r}")


def class_weights(frequencies, ignore=(0,), eps: float = WEIGHT_FLOOR) -> ClassWeights:
    """Inverse-frequency weights ``1 / max(f, eps)``; ignored ids get weight 0."""
    f = np.asarray(frequencies, dtype=np.float64)
    if (f < 0).any() or f.sum() > 1 + 1e-9:
        raise ValueError("frequencies must be non-negative and sum to at most 1")
    w = 1.0 / np.maximum(f, eps)
    for j in ignore:
        if 0 <= j < w.shape[0]:
            w[j] = 0.0
    return ClassWeights(w, frozenset(ignore))


def write_frequencies(freqs, path) -> None:
    Path(path).write_text("".join(f"{j} {float(f)!r}\n" for j, f in enumerate(freqs)))


def read_frequencies(path) -> np.ndarray:
    pairs = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            j, f = line.split()
            pairs.append((int(j), float(f)))
    if not pairs:
        raise DataError(f"{path}: no class frequencies")
    out = np.zeros(max(j for j, _ in pairs) + 1)
    for j, f in pairs:
        out[j] = f
    return out


def _flatten(probs: Tensor, labels):
    """(N, C, H, W) probabilities -> (P, C) rows and matching (P,) labels."""
    labels = np.asarray(labels)
    n, c = probs.shape[:2]
    if labels.shape != (n,) + probs.shape[2:]:
        raise LabelError(f"labels {labels.shape} do not match probabilities {probs.shape}")
    flat = np.moveaxis(probs.data, 1, -1).reshape(-1, c)
    lab = labels.reshape(-1).astype(np.int64)
    bad = np.flatnonzero((lab < 0) | (lab >= c))
    if bad.size:
        idx = np.unravel_index(bad[0], labels.shape)
        raise LabelError(f"label {lab[bad[0]]} out of range [0, {c}) at pixel {tuple(int(i) for i in idx)}")
    return flat, lab


def _unflatten(g: np.ndarray, shape) -> np.ndarray:
    n, c = shape[:2]
    return np.moveaxis(g.reshape((n,) + tuple(shape[2:]) + (c,)), -1, 1)


def weighted_xent(probs: Tensor, labels, weights: ClassWeights) -> Tensor:
    """Mean over non-ignored pixels of ``-w[y] * log(p[y] + 1e-12)``."""
    flat, lab = _flatten(probs, labels)
    keep = ~np.isin(lab, list(weights.ignore))
    rows = np.flatnonzero(keep)
    count = max(rows.size, 1)
    py = flat[rows, lab[rows]].astype(np.float64)
    w = weights.w[lab[rows]]
    value = float(-(w * np.log(py + LOG_FLOOR)).sum() / count)

    def bw(g):
        gf = np.zeros(flat.shape, dtype=np.float64)
        gf[rows, lab[rows]] = -w / (py + LOG_FLOOR) / count
        return (_unflatten(gf * float(g), probs.shape).astype(probs.dtype),)

    return _make(np.asarray(value, dtype=probs.dtype), (probs,), bw)


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Lovasz extension of the Jaccard loss for errors sorted descending."""
    gts = gt_sorted.sum()
    inter = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jac = 1.0 - inter / union
    jac[1:] = jac[1:] - jac[:-1]
    return jac


def lovasz_softmax(probs: Tensor, labels, ignore=(0,), classes="present") -> Tensor:
    """Mean over classes of the Lovasz-extended Jaccard loss of per-pixel errors.

    ``classes`` is ``"present"`` (classes occurring in the non-ignored labels),
    ``"all"`` (every non-ignored class id) or an explicit list of class ids.
    Sort ties are broken by original pixel order.
    """
    flat, lab = _flatten(probs, labels)
    ignore = set(ignore)
    rows = np.flatnonzero(~np.isin(lab, list(ignore)))
    p = flat[rows].astype(np.float64)
    y = lab[rows]
    c = flat.shape[1]
    if classes == "present":
        cls = [j for j in np.unique(y).tolist() if j not in ignore]
    elif classes == "all":
        cls = [j for j in range(c) if j not in ignore]
    else:
        cls = list(classes)

    terms = []
    grads = np.zeros_like(p)
    for j in cls:
        fg = (y == j).astype(np.float64)
        err = np.abs(fg - p[:, j])
        order = np.argsort(-err, kind="stable")
        g = lovasz_grad(fg[order])
        terms.append(float(err[order] @ g))
        gj = np.empty_like(g)
        gj[order] = g
        # d|fg - p| / dp = -1 on the class's own pixels, +1 elsewhere
        grads[:, j] = gj * np.where(fg > 0, -1.0, 1.0)
    k = len(terms)
    value = sum(terms) / k if k else 0.0

    def bw(gout):
        gf = np.zeros(flat.shape, dtype=np.float64)
        if k:
            gf[rows] = grads * (float(gout) / k)
        return (_unflatten(gf, probs.shape).astype(probs.dtype),)

    return _make(np.asarray(value, dtype=probs.dtype), (probs,), bw)


def total_loss(probs: Tensor, labels, weights: ClassWeights, cfg: LossConfig | None = None) -> Tensor:
    """``weighted_xent + lam * lovasz_softmax``."""
    cfg = cfg or LossConfig()
    xent = weighted_xent(probs, labels, weights)
    if cfg.lam == 0:
        return xent
    lov = lovasz_softmax(probs, labels, weights.ignore, cfg.lovasz_classes)
    return add(xent, scale(lov, cfg.lam))
