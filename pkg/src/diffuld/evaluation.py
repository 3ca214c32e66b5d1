"""Landmark evaluation: regression NME, CED, Hungarian accuracy, equivariance and pose clusters."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

RIDGE_LAMBDA = 1e-6
DEFAULT_YAW_EDGES = (-90.0, -60.0, -30.0, 30.0, 60.0, 90.0)


@dataclass
class Regressor:
    """Linear map from flattened source landmarks to flattened target landmarks."""

    weights: np.ndarray  # 2K_src x 2K_dst
    bias: np.ndarray  # 2K_dst
    subset: np.ndarray
    seed: int
    direction: str
    ridge: bool = False

    def __post_init__(self):
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("non-finite regressor coefficients")

    def predict(self, src: np.ndarray) -> np.ndarray:
        src = np.asarray(src, dtype=np.float64)
        out = src.reshape(len(src), -1) @ self.weights + self.bias
        return out.reshape(len(src), -1, 2)


def fit_regressor(pred, gt, subset_size: int | None = None, direction: str = "forward",
                  seed: int = 0) -> Regressor:
    """Least squares with a bias column on a seeded subset of images.

    ``forward`` maps discovered landmarks to ground truth, ``backward`` the
    reverse. A rank-deficient design falls back to ridge with lambda 1e-6.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if len(pred) != len(gt):
        raise ValueError("pred and gt must cover the same images")
    if direction not in ("forward", "backward"):
        raise ValueError(f"unknown direction {direction!r}")
    m = len(pred)
    subset_size = m if subset_size is None else subset_size
    if not 1 <= subset_size <= m:
        raise ValueError(f"subset_size must be in [1, {m}]")
    if subset_size == m:
        rows = np.arange(m)
    else:
        rows = np.sort(np.random.default_rng(seed).choice(m, subset_size, replace=False))
    src, dst = (pred, gt) if direction == "forward" else (gt, pred)
    x = src[rows].reshape(len(rows), -1)
    y = dst[rows].reshape(len(rows), -1)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("regression inputs contain NaN; fill missing landmarks first")
    a = np.hstack([x, np.ones((len(x), 1))])
    ridge = np.linalg.matrix_rank(a) < a.shape[1]
    if ridge:
        coef = np.linalg.solve(a.T @ a + RIDGE_LAMBDA * np.eye(a.shape[1]), a.T @ y)
    else:
        coef = np.linalg.lstsq(a, y, rcond=None)[0]
    return Regressor(coef[:-1], coef[-1], rows, seed, direction, ridge)


def per_image_errors(mapped, target, normalizer) -> np.ndarray:
    """Mean landmark distance per image over its normaliser, in percent."""
    mapped = np.asarray(mapped, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if mapped.shape != target.shape:
        raise ValueError(f"shape mismatch {mapped.shape} vs {target.shape}")
    norm = np.broadcast_to(np.asarray(normalizer, dtype=np.float64), (len(mapped),))
    if np.any(norm <= 0):
        raise ValueError("normaliser must be positive")
    return np.linalg.norm(mapped - target, axis=-1).mean(axis=1) / norm * 100.0


def nme(mapped, target, normalizer) -> float:
    return float(per_image_errors(mapped, target, normalizer).mean())


def ced(errors, thresholds) -> tuple[np.ndarray, float]:
    """Fraction of images with error <= tau for each tau, and the trapezoid area
    under that curve divided by the threshold span (so it lies in [0, 1])."""
    errors = np.asarray(errors, dtype=np.float64)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if np.any(errors < 0):
        raise ValueError("errors must be non-negative")
    if len(errors) == 0:
        return np.zeros(len(thresholds)), 0.0
    curve = (errors[None, :] <= thresholds[:, None]).mean(axis=1)
    span = thresholds[-1] - thresholds[0] if len(thresholds) > 1 else 0.0
    auc = float(np.trapezoid(curve, thresholds) / span) if span > 0 else float(curve[-1]) if len(curve) else 0.0
    return curve, auc


def optimal_assignment(cost) -> tuple[np.ndarray, np.ndarray, float]:
    cost = np.asarray(cost, dtype=np.float64)
    rows, cols = linear_sum_assignment(cost)
    return rows, cols, float(cost[rows, cols].sum())


@dataclass
class HungarianResult:
    assignment: dict[int, int]  # gt landmark -> unsupervised landmark
    accuracy: np.ndarray  # percent per gt landmark, NaN where unmatched
    cost: np.ndarray  # K x N_gt mean normalised distance


def hungarian_accuracy(unsup, gt, d_iod, threshold_factor: float = 0.2) -> HungarianResult:
    """One global unsupervised-to-GT matching on dataset-mean normalised distances.

    A missing unsupervised landmark (NaN) is a miss for accuracy and is left out of
    the mean cost; a pair that is never observed costs +inf-like 1e9.
    """
    unsup = np.asarray(unsup, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if unsup.shape[1] < 1:
        raise ValueError("need K >= 1")
    d_iod = np.broadcast_to(np.asarray(d_iod, dtype=np.float64), (len(gt),))
    dist = np.linalg.norm(unsup[:, :, None, :] - gt[:, None, :, :], axis=-1) / d_iod[:, None, None]
    seen = np.isfinite(dist).sum(axis=0)
    cost = np.where(seen > 0, np.nansum(np.nan_to_num(dist, nan=0.0), axis=0) / np.maximum(seen, 1), 1e9)
    rows, cols, _ = optimal_assignment(cost)
    acc = np.full(gt.shape[1], np.nan)
    hits = np.where(np.isfinite(dist), dist <= threshold_factor, False)
    for r, c in zip(rows, cols):
        acc[c] = hits[:, r, c].mean() * 100.0
    return HungarianResult({int(c): int(r) for r, c in zip(rows, cols)}, acc, cost)


def consistency_error(detector, image, transform, warp=None):
    """Mean distance between landmarks of A(x) and A applied to landmarks of x.

    ``detector(image)`` returns {label: (x, y)}. Labels found in only one of the
    two images are excluded and counted. Returns (error or None, matched,
    unmatched); None means one side had no detections and the image is skipped.
    """
    if warp is None:
        from .bootstrap import warp_image as warp
    base = detector(image)
    moved = detector(image if transform.is_identity else warp(image, transform))
    if not base or not moved:
        return None, 0, len(set(base) ^ set(moved))
    common = sorted(set(base) & set(moved))
    unmatched = len(set(base) ^ set(moved))
    if not common:
        return None, 0, unmatched
    src = np.array([base[c] for c in common], dtype=np.float64)
    dst = np.array([moved[c] for c in common], dtype=np.float64)
    err = np.linalg.norm(dst - transform.apply(src), axis=1).mean()
    return float(err), len(common), unmatched


def yaw_bins(yaws, edges=DEFAULT_YAW_EDGES) -> np.ndarray:
    """Bin index per yaw. Bins are [lo, hi) except the last, which is [lo, hi]."""
    yaws = np.asarray(yaws, dtype=np.float64)
    edges = np.asarray(edges, dtype=np.float64)
    if np.any(~np.isfinite(yaws)) or np.any(yaws < edges[0]) or np.any(yaws > edges[-1]):
        raise ValueError("every yaw must fall inside the bin edges")
    idx = np.searchsorted(edges, yaws, side="right") - 1
    return np.minimum(idx, len(edges) - 2)


def yaw_binned_nme(errors, yaws, edges=DEFAULT_YAW_EDGES) -> dict[int, float]:
    """Mean error per yaw bin; empty bins are absent from the result."""
    errors = np.asarray(errors, dtype=np.float64)
    b = yaw_bins(yaws, edges)
    return {int(i): float(errors[b == i].mean()) for i in np.unique(b)}


@dataclass
class ClusterAccuracy:
    percent: float
    mapping: dict[int, int]  # pose cluster -> yaw range
    ties: list[int] = field(default_factory=list)  # clusters resolved by the tie rule


def clustering_accuracy(u, yaw_range, q: int) -> ClusterAccuracy:
    """Map each pose cluster to its majority yaw range (lowest range on ties) and
    score the share of images whose range matches their cluster's range."""
    u = np.asarray(u, dtype=np.int64)
    yaw_range = np.asarray(yaw_range, dtype=np.int64)
    if len(u) != len(yaw_range):
        raise ValueError("one yaw range per image required")
    if len(u) and (u.min() < 0 or u.max() >= q):
        raise ValueError(f"labels must lie in [0, {q})")
    mapping, ties, correct = {}, [], 0
    for c in range(q):
        r = yaw_range[u == c]
        if len(r) == 0:
            continue
        vals, counts = np.unique(r, return_counts=True)
        best = np.flatnonzero(counts == counts.max())
        if len(best) > 1:
            ties.append(c)
        mapping[c] = int(vals[best[0]])
        correct += int(counts[best[0]])
    pct = 100.0 * correct / len(u) if len(u) else 0.0
    return ClusterAccuracy(pct, mapping, ties)


def fill_missing(landmarks: np.ndarray, fill: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Replace NaN landmarks by a per-landmark fill (default: the nanmean over images)."""
    landmarks = np.asarray(landmarks, dtype=np.float64)
    if fill is None:
        with np.errstate(all="ignore"):
            fill = np.nanmean(landmarks, axis=0)
        fill = np.nan_to_num(fill, nan=0.0)
    out = np.where(np.isnan(landmarks), fill[None], landmarks)
    return out, fill


@dataclass
class EvalReport:
    """Key names are the serialised JSON keys."""

    stage: str
    forward_nme: float
    backward_nme: float
    ced_thresholds: list[float]
    ced_curve: list[float]
    ced_auc: float
    hungarian_accuracy: list[float | None]
    consistency_error: float | None
    consistency_skipped: int
    silhouette: float | None
    calinski_harabasz: float | None
    yaw_binned_nme: dict[str, float]
    clustering_accuracy: float | None
    purity: float | None = None
    detection_rate: float | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("forward_nme", "backward_nme", "clustering_accuracy", "purity", "detection_rate"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 100.0:
                raise ValueError(f"{name}={v} outside [0, 100]")
        for v in self.hungarian_accuracy:
            if v is not None and not 0.0 <= v <= 100.0:
                raise ValueError(f"Hungarian accuracy {v} outside [0, 100]")

    def to_json(self) -> str:
        return json.dumps(_clean(asdict(self)), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def write(self, directory) -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        report = directory / "report.json"
        report.write_text(self.to_json())
        curve = directory / "ced.csv"
        with curve.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "fraction"])
            for t, c in zip(self.ced_thresholds, self.ced_curve):
                w.writerow([repr(float(t)), repr(float(c))])
        return report, curve


def _clean(x):
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple, np.ndarray)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return None if not math.isfinite(float(x)) else float(x)
    if isinstance(x, np.integer):
        return int(x)
    return x
