"""K-means, pseudo-label assignment, exemplar assignment and two-stage clustering."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from sklearn.metrics import calinski_harabasz_score, silhouette_samples

from .model import ExtractConfig, extract_keypoints, normalize_rows

log = logging.getLogger(__name__)

STAGES = ("flat_keypoint", "pose_stage1", "keypoint_stage2")


@dataclass
class ClusterModel:
    centroids: np.ndarray  # K' x D
    stage: str = "flat_keypoint"
    parent_pose_label: int | None = None
    inertia_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or len(self.centroids) < 1:
            raise ValueError("a cluster model needs at least one centroid")
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("non-finite centroid")
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.stage == "keypoint_stage2" and self.parent_pose_label is None:
            raise ValueError("stage-2 models need a parent pose label")

    @property
    def k(self) -> int:
        return len(self.centroids)

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1] if self.inertia_history else float("nan")


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(-1)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    idx = [int(rng.integers(n))]
    d2 = _sq_dists(x, x[idx]).min(1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a centre; take the lowest unused index
            unused = np.setdiff1d(np.arange(n), idx)
            nxt = int(unused[0])
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        idx.append(nxt)
        d2 = np.minimum(d2, _sq_dists(x, x[[nxt]])[:, 0])
    return x[idx].copy()


def _lloyd(x: np.ndarray, centroids: np.ndarray, max_iter: int, tol: float):
    history = []
    for _ in range(max_iter):
        d2 = _sq_dists(x, centroids)
        labels = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(len(x)), labels].sum()))
        new = centroids.copy()
        counts = np.bincount(labels, minlength=len(centroids))
        for j in range(len(centroids)):
            if counts[j]:
                new[j] = x[labels == j].mean(axis=0)
        empty = np.flatnonzero(counts == 0)
        if len(empty):
            # re-seed empty clusters from the points farthest from their centroid
            own = d2[np.arange(len(x)), labels]
            order = np.argsort(-own, kind="stable")
            for j, i in zip(empty, order):
                new[j] = x[i]
        shift = float(np.sqrt(((new - centroids) ** 2).sum(1)).max())
        centroids = new
        if shift < tol and not len(empty):
            break
    d2 = _sq_dists(x, centroids)
    history.append(float(d2.min(1).sum()))
    return centroids, history


def kmeans(x: np.ndarray, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-8,
           n_init: int = 1, stage: str = "flat_keypoint", parent_pose_label: int | None = None) -> ClusterModel:
    """k-means++ initialisation followed by Lloyd iterations.

    With ``n_init > 1`` the restart with the lowest final inertia is kept
    (earliest restart on ties).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("expected an N x D array")
    if len(x) < k:
        raise ValueError(f"k-means needs N >= k, got N={len(x)}, k={k}")
    if k < 1:
        raise ValueError("k must be >= 1")
    best = None
    for run in range(n_init):
        rng = np.random.default_rng([seed, run])
        c, hist = _lloyd(x, _kmeanspp(x, k, rng), max_iter, tol)
        if best is None or hist[-1] < best[1][-1]:
            best = (c, hist)
    return ClusterModel(best[0], stage, parent_pose_label, best[1])


def assign(x: np.ndarray, model: ClusterModel) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-centroid labels and Euclidean distances; lowest index wins ties."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, model.dim) if np.size(x) else \
        np.zeros((0, model.dim))
    if x.shape[1] != model.dim:
        raise ValueError(f"dimension mismatch: {x.shape[1]} vs {model.dim}")
    d = np.sqrt(_sq_dists(x, model.centroids))
    labels = np.argmin(d, axis=1)
    return labels, d[np.arange(len(x)), labels]


def exemplar_indices(labels: np.ndarray, distances: np.ndarray) -> np.ndarray:
    """Index of the closest-to-centroid member for every label present, ordered by label."""
    labels = np.asarray(labels)
    keep = []
    for lab in np.unique(labels):
        members = np.flatnonzero(labels == lab)
        keep.append(members[np.argmin(distances[members])])
    return np.asarray(keep, dtype=np.int64)


def exemplar_assign(image_keypoints: list, model: ClusterModel) -> list:
    """Keep, per cluster label, the (keypoint, descriptor, label) whose descriptor
    is nearest that cluster's centroid."""
    if not image_keypoints:
        return []
    feats = np.stack([np.asarray(getattr(d, "f", d), dtype=np.float64) for _, d, _ in image_keypoints])
    labels = np.array([int(lab) for _, _, lab in image_keypoints])
    if labels.min() < 0 or labels.max() >= model.k:
        raise ValueError("label outside the model's label set")
    dist = np.linalg.norm(feats - model.centroids[labels], axis=1)
    return [image_keypoints[i] for i in exemplar_indices(labels, dist)]


# --------------------------------------------------------------------------
# two-stage clustering

@dataclass
class TwoStageResult:
    pose_model: ClusterModel
    keypoint_models: list[ClusterModel | None]  # one per pose cluster
    pose_labels: np.ndarray  # u_j per image
    labels: list[np.ndarray]  # composite label u * K + k per keypoint
    distances: list[np.ndarray]  # distance to own stage-2 centroid
    q: int
    k: int
    shrinkage: dict[int, int] = field(default_factory=dict)  # pose label -> reduced k

    @property
    def label_space(self) -> int:
        return self.q * self.k


def two_stage_cluster(latents: np.ndarray, descriptors: list[np.ndarray], q: int, k: int,
                      seed: int = 0, n_init: int = 1) -> TwoStageResult:
    """Stage 1: k-means of latent codes into ``q`` pose clusters. Stage 2: per pose
    cluster, k-means of its images' descriptors into ``k`` clusters."""
    latents = np.asarray(latents, dtype=np.float64)
    if q < 1 or k < 1:
        raise ValueError("Q and K must be >= 1")
    if len(latents) != len(descriptors):
        raise ValueError("one latent code per image required")
    pose_model = kmeans(latents, q, seed=seed, n_init=n_init, stage="pose_stage1")
    u, _ = assign(latents, pose_model)
    dim = next((d.shape[1] for d in descriptors if len(d)), 1)
    labels = [np.zeros(0, dtype=np.int64) for _ in descriptors]
    dists = [np.zeros(0) for _ in descriptors]
    models: list[ClusterModel | None] = []
    shrink = {}
    for pose in range(q):
        members = [j for j in range(len(descriptors)) if u[j] == pose and len(descriptors[j])]
        pool = np.concatenate([descriptors[j] for j in members]) if members else np.zeros((0, dim))
        kk = min(k, len(pool))
        if kk < k:
            shrink[pose] = kk
            log.info("pose cluster %d has %d descriptors; stage-2 k reduced to %d", pose, len(pool), kk)
        if kk == 0:
            models.append(None)
            continue
        m = kmeans(pool, kk, seed=seed + pose, n_init=n_init, stage="keypoint_stage2",
                   parent_pose_label=pose)
        models.append(m)
        for j in members:
            lab, d = assign(descriptors[j], m)
            labels[j] = pose * k + lab
            dists[j] = d
    return TwoStageResult(pose_model, models, u, labels, dists, q, k, shrink)


# --------------------------------------------------------------------------
# training set

@dataclass
class ImageRecord:
    points: np.ndarray  # n x 2
    scores: np.ndarray
    descriptors: np.ndarray  # n x D
    labels: np.ndarray  # n, values in [R]
    latent: np.ndarray | None = None
    pose_label: int | None = None

    def __post_init__(self):
        n = len(self.points)
        if not (len(self.scores) == len(self.descriptors) == len(self.labels) == n):
            raise ValueError("misaligned keypoint record")


@dataclass
class TrainingSet:
    records: list[ImageRecord]
    epoch: int
    k: int
    q: int = 1
    mode: str = "flat"  # or "two_stage"
    flat_model: ClusterModel | None = None
    two_stage: TwoStageResult | None = None

    @property
    def label_space(self) -> int:
        return self.k * self.q if self.mode == "two_stage" else self.k

    def __len__(self) -> int:
        return len(self.records)


def unlabeled_training_set(extracted, k: int) -> TrainingSet:
    recs = [ImageRecord(p, s, d, np.full(len(p), -1, dtype=np.int64)) for p, s, d in extracted]
    return TrainingSet(recs, epoch=-1, k=k)


def update_training_set(prev: TrainingSet | None, net, bank, k: int, q: int = 1, encoder=None,
                        extract_cfg: ExtractConfig | None = None, seed: int = 0,
                        n_init: int = 4) -> TrainingSet:
    """Re-extract keypoints, re-cluster and re-run exemplar assignment.

    With an ``encoder`` the latent pose codes are recomputed from the current
    detector heatmaps and two-stage clustering is used; otherwise flat k-means.
    """
    extracted = extract_keypoints(net, bank, extract_cfg or ExtractConfig())
    descs = [normalize_rows(d) for _, _, d in extracted]
    empty = [i for i, (p, _, _) in enumerate(extracted) if len(p) == 0]
    for i in empty:
        log.warning("image %d has no detected keypoints; kept with an empty set", i)
    epoch = 0 if prev is None else prev.epoch + 1
    records = []
    if encoder is None:
        pool = np.concatenate([d for d in descs if len(d)]) if any(len(d) for d in descs) else None
        if pool is None:
            raise RuntimeError("no keypoints detected in any image")
        model = kmeans(pool, min(k, len(pool)), seed=seed, n_init=n_init)
        for (pts, sc, _), d in zip(extracted, descs):
            lab, dist = assign(d, model) if len(d) else (np.zeros(0, np.int64), np.zeros(0))
            keep = exemplar_indices(lab, dist) if len(d) else np.zeros(0, np.int64)
            records.append(ImageRecord(pts[keep], sc[keep], d[keep], lab[keep].astype(np.int64)))
        return TrainingSet(records, epoch, k, 1, "flat", flat_model=model)

    latents = compute_latents(net, encoder, bank)
    ts = two_stage_cluster(latents, descs, q, k, seed=seed, n_init=n_init)
    for j, ((pts, sc, _), d) in enumerate(zip(extracted, descs)):
        lab, dist = ts.labels[j], ts.distances[j]
        keep = exemplar_indices(lab, dist) if len(lab) else np.zeros(0, np.int64)
        records.append(ImageRecord(pts[keep], sc[keep], d[keep], lab[keep].astype(np.int64),
                                   latent=latents[j], pose_label=int(ts.pose_labels[j])))
    return TrainingSet(records, epoch, k, q, "two_stage", two_stage=ts)


def compute_latents(net, encoder, bank, batch_size: int = 16) -> np.ndarray:
    out = []
    with torch.no_grad():
        for s in range(0, len(bank), batch_size):
            idx = list(range(s, min(len(bank), s + batch_size)))
            h = net.heatmaps(bank.raw(idx))
            out.append(encoder.encode_mean(h).double().numpy())
    return np.concatenate(out)


# --------------------------------------------------------------------------
# quality indices

def cluster_quality(x: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Mean silhouette and Calinski-Harabasz index.

    Singleton clusters score a silhouette of 0. When the within-cluster
    dispersion is zero the CH index is reported as 1.0.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    n_labels = len(np.unique(labels))
    if n_labels < 2:
        raise ValueError("cluster quality needs at least two clusters")
    if len(x) < 2:
        raise ValueError("silhouette needs at least two points")
    if n_labels >= len(x):
        return 0.0, 1.0
    sil = float(silhouette_samples(x, labels).mean())
    return sil, float(calinski_harabasz_score(x, labels))


# --------------------------------------------------------------------------
# serialisation

_CM_MAGIC = b"DULC"
_CM_VERSION = 1
_CM_HEAD = struct.Struct("<4sHI")
_CM_ENTRY = struct.Struct("<HiII")


def save_cluster_models(path, models: list[ClusterModel]) -> None:
    buf = [_CM_HEAD.pack(_CM_MAGIC, _CM_VERSION, len(models))]
    for m in models:
        parent = -1 if m.parent_pose_label is None else m.parent_pose_label
        buf.append(_CM_ENTRY.pack(STAGES.index(m.stage), parent, m.k, m.dim))
        buf.append(np.ascontiguousarray(m.centroids, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(buf))


def load_cluster_models(path) -> list[ClusterModel]:
    data = Path(path).read_bytes()
    if len(data) < _CM_HEAD.size:
        raise ValueError("truncated cluster file")
    magic, version, count = _CM_HEAD.unpack_from(data, 0)
    if magic != _CM_MAGIC or version != _CM_VERSION:
        raise ValueError(f"not a cluster file (magic {magic!r}, version {version})")
    off = _CM_HEAD.size
    out = []
    for _ in range(count):
        if len(data) < off + _CM_ENTRY.size:
            raise ValueError(f"truncated cluster entry at offset {off}")
        stage, parent, k, d = _CM_ENTRY.unpack_from(data, off)
        off += _CM_ENTRY.size
        nbytes = k * d * 8
        if len(data) < off + nbytes:
            raise ValueError(f"truncated centroids at offset {off}")
        c = np.frombuffer(data, dtype="<f8", count=k * d, offset=off).reshape(k, d).copy()
        off += nbytes
        out.append(ClusterModel(c, STAGES[stage], None if parent < 0 else parent))
    return out
