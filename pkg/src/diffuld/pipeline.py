"""Stage orchestration: data, ZeroShot, training stages, evaluation and run directories."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import ADAPTERS, OracleBackbone, get_adapter, roi_from_box, sample_roi_pixels, stack_to_tensors
from .bootstrap import bootstrap_train, draw_transform
from .checkpoint import FINAL, RESUME, has_checkpoint, load_checkpoint, save_checkpoint
from .clustering import (ClusterModel, ImageRecord, TrainingSet, assign, cluster_quality,
                         exemplar_indices, kmeans, save_cluster_models)
from .config import PipelineConfig
from .data import ImageBank, generate_synthetic_dataset, ingest_dataset, load_image
from .evaluation import (EvalReport, ced, clustering_accuracy, consistency_error, fill_missing,
                         fit_regressor, hungarian_accuracy, per_image_errors, yaw_binned_nme)
from .heads import nms_points, sample_descriptors
from .losslog import LossReport
from .model import LandmarkNet, extract_keypoints, normalize_rows
from .pose_proxy import PoseVAE
from .selftrain import StageState, evaluate_elbo, train_duld, train_duldpp, train_proxy

log = logging.getLogger(__name__)

STAGES = ("bootstrap", "duld", "proxy", "duldpp")
PREREQUISITE = {"duld": "bootstrap", "proxy": "duld", "duldpp": "proxy"}
RUN_ROOT_ENV = "ULD_RUN_ROOT"


class MissingPrerequisite(RuntimeError):
    def __init__(self, stage: str, missing: str):
        super().__init__(f"stage '{stage}' needs a finished '{missing}' stage; run '{missing}' first")
        self.stage = stage
        self.missing = missing


def set_determinism() -> None:
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


def run_dir(cfg: PipelineConfig) -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, cfg.run_root)) / cfg.run_id


# --------------------------------------------------------------------------
# data

@dataclass
class Data:
    train: ImageBank
    test: ImageBank
    adapter: object


def make_adapter(cfg: PipelineConfig, n_identities: int, input_size):
    b = cfg.backbone
    if b.name not in ADAPTERS:
        raise ValueError(f"unknown backbone {b.name!r}; known: {sorted(ADAPTERS)}")
    if b.name == "oracle":
        return OracleBackbone(n_identities, dim=b.dim, levels=b.levels, timesteps=b.timesteps,
                              noise_sigma=b.noise_sigma, seed=b.seed, input_size=input_size)
    return get_adapter(b.name)


def load_data(cfg: PipelineConfig) -> Data:
    d = cfg.data
    if d.root:
        root = Path(d.root)
        if not root.exists():
            raise FileNotFoundError(f"dataset root {root} does not exist")
        manifest = ingest_dataset(root, d.format_id)
        images = [load_image(manifest.image_path(e)) for e in manifest.entries]
    else:
        images, manifest = generate_synthetic_dataset(d.n_train, d.n_landmarks, d.pose_distribution,
                                                      seed=d.seed, n_test=d.n_test,
                                                      side_range=d.side_range)
    if not images:
        raise ValueError("dataset is empty")
    adapter = make_adapter(cfg, manifest.n_landmarks or d.n_landmarks, images[0].shape[:2])
    split = {"train": [], "test": []}
    for img, e in zip(images, manifest.entries):
        split["test" if e.split == "test" else "train"].append((img, e))
    banks = {k: ImageBank([i for i, _ in v], [e for _, e in v], adapter) for k, v in split.items()}
    if len(banks["train"]) == 0 or len(banks["test"]) == 0:
        raise ValueError("need both train and test images")
    return Data(banks["train"], banks["test"], adapter)


# --------------------------------------------------------------------------
# landmark discovery

def _roi_mask(roi, height: int, width: int) -> np.ndarray:
    xs, ys = roi.pixel_ranges()
    m = np.zeros((height, width))
    m[ys.start:ys.stop, xs.start:xs.stop] = 1.0
    return m


def _warp_roi(roi, transform, height: int, width: int):
    x0, y0, x1, y1 = roi.box
    corners = transform.apply(np.array([[x0, y0], [x1, y0], [x0, y1], [x1, y1]], dtype=np.float64))
    lo, hi = np.floor(corners.min(axis=0)), np.ceil(corners.max(axis=0))
    return roi_from_box([lo[0], lo[1], hi[0], hi[1]], height, width)


def _exemplar_landmarks(points: np.ndarray, descs: np.ndarray, model: ClusterModel) -> dict:
    if len(points) == 0:
        return {}
    lab, dist = assign(descs, model)
    keep = exemplar_indices(lab, dist)
    return {int(lab[i]): (float(points[i, 0]), float(points[i, 1])) for i in keep}


def landmark_array(found: list[dict], k: int) -> np.ndarray:
    out = np.full((len(found), k, 2), np.nan)
    for j, d in enumerate(found):
        for lab, xy in d.items():
            out[j, lab] = xy
    return out


class NetDiscoverer:
    """Keypoints from the detector, identities from a flat cluster model."""

    def __init__(self, net: LandmarkNet, model: ClusterModel, adapter, extract_cfg):
        self.net, self.model, self.adapter, self.extract = net, model, adapter, extract_cfg

    def bank(self, bank: ImageBank):
        found, descs = [], []
        for pts, _, d in extract_keypoints(self.net, bank, self.extract):
            d = normalize_rows(d)
            found.append(_exemplar_landmarks(pts, d, self.model))
            descs.append(d)
        return found, descs

    def image(self, image: np.ndarray, roi) -> dict:
        h, w = self.adapter.input_size
        raw = stack_to_tensors(self.adapter.extract(image.astype(np.float32)))
        self.net.eval()
        with torch.no_grad():
            heat, desc = self.net(raw)
        grid = heat[0, 0].double().numpy()
        if self.extract.restrict_to_roi:
            grid = grid * _roi_mask(roi, h, w)
        pts, _ = nms_points(grid, self.extract.window, self.extract.threshold, self.extract.max_keypoints)
        d = sample_descriptors(desc[0], torch.from_numpy(pts).to(desc.dtype)).double().numpy()
        return _exemplar_landmarks(pts, normalize_rows(d), self.model)


def fit_eval_model(net: LandmarkNet, bank: ImageBank, cfg: PipelineConfig) -> ClusterModel:
    """Flat K-cluster model over training-set keypoint descriptors, used to name test landmarks."""
    pool = [normalize_rows(d) for _, _, d in extract_keypoints(net, bank, cfg.extract) if len(d)]
    if not pool:
        raise RuntimeError("the detector found no keypoints on the training set")
    pool = np.concatenate(pool)
    return kmeans(pool, min(cfg.k, len(pool)), seed=cfg.seed, n_init=cfg.zeroshot_n_init)


def zeroshot_features(bank: ImageBank) -> torch.Tensor:
    """Uniformly weighted sum of the raw maps, upscaled to the image grid (N x D x H x W)."""
    raw = bank.raw(range(len(bank)))
    out = None
    for r in raw.values():
        if tuple(r.shape[-2:]) != (bank.height, bank.width):
            r = F.interpolate(r.double(), size=(bank.height, bank.width), mode="bilinear", align_corners=False)
        out = r.double() / len(raw) if out is None else out + r.double() / len(raw)
    return out


class ZeroShotDiscoverer:
    """Backbone features sampled at random RoI pixels; identities by nearest centroid."""

    def __init__(self, model: ClusterModel, adapter, n_pixels: int, seed: int):
        self.model, self.adapter, self.n_pixels, self.seed = model, adapter, n_pixels, seed

    def _sample(self, feats: np.ndarray, roi, key: int):
        xs, ys = roi.pixel_ranges()
        n = min(self.n_pixels, len(xs) * len(ys))
        pts = sample_roi_pixels(roi, n, seed=self.seed * 1_000_003 + key).astype(np.float64)
        ij = pts.astype(np.int64)
        return pts, normalize_rows(feats[:, ij[:, 1], ij[:, 0]].T)

    def bank(self, bank: ImageBank):
        feats = zeroshot_features(bank).numpy()
        found, descs = [], []
        for i in range(len(bank)):
            pts, d = self._sample(feats[i], bank.roi(i), i)
            found.append(_exemplar_landmarks(pts, d, self.model))
            descs.append(d)
        return found, descs

    def image(self, image: np.ndarray, roi) -> dict:
        h, w = self.adapter.input_size
        b = ImageBank([image.astype(np.float32)], [_bare_entry(roi)], self.adapter)
        feats = zeroshot_features(b).numpy()[0]
        pts, d = self._sample(feats, roi, 0)
        return _exemplar_landmarks(pts, d, self.model)


def _bare_entry(roi):
    from .data import ManifestEntry
    return ManifestEntry(image_id="probe", path="", landmarks=None, box=list(roi.box))


def fit_zeroshot(bank: ImageBank, cfg: PipelineConfig) -> ClusterModel:
    disc = ZeroShotDiscoverer(None, bank.adapter, cfg.zeroshot_pixels, cfg.seed)
    feats = zeroshot_features(bank).numpy()
    pool = np.concatenate([disc._sample(feats[i], bank.roi(i), i)[1] for i in range(len(bank))])
    return kmeans(pool, cfg.k, seed=cfg.seed, n_init=cfg.zeroshot_n_init)


# --------------------------------------------------------------------------
# evaluation

def pose_ranges(yaw: np.ndarray, cfg: PipelineConfig) -> np.ndarray:
    e = cfg.eval
    v = np.abs(yaw) if e.pose_range_abs else yaw
    edges = np.asarray(e.pose_range_edges)
    return np.minimum(np.searchsorted(edges, v, side="right") - 1, len(edges) - 2)


def oracle_purity(bank: ImageBank, found: list[dict]) -> float | None:
    """Share of discovered landmarks whose pixel carries their cluster's majority identity."""
    adapter = bank.adapter
    if not isinstance(adapter, OracleBackbone):
        return None
    pairs = []
    for img, d in zip(bank.images, found):
        ids = adapter.identities(img)
        for lab, (x, y) in d.items():
            pairs.append((lab, int(ids[int(round(y)), int(round(x))])))
    if not pairs:
        return 0.0
    pairs = np.array(pairs)
    correct = 0
    for lab in np.unique(pairs[:, 0]):
        ident = pairs[pairs[:, 0] == lab, 1]
        correct += np.bincount(ident + 1).max()
    return 100.0 * correct / len(pairs)


def evaluate(stage: str, cfg: PipelineConfig, data: Data, discoverer, pose_labels=None,
             extra: dict | None = None) -> EvalReport:
    e = cfg.eval
    k = discoverer.model.k
    train_found, _ = discoverer.bank(data.train)
    test_found, test_descs = discoverer.bank(data.test)
    train_raw = landmark_array(train_found, k)
    test_raw = landmark_array(test_found, k)
    train_lm, fill = fill_missing(train_raw)
    test_lm, _ = fill_missing(test_raw, fill)
    gt_train, gt_test = data.train.landmarks, data.test.landmarks
    norm = data.test.normalizers(e.normalizer, e.iod_pair)

    subset = e.regressor_subset if e.regressor_subset is None else min(e.regressor_subset, len(train_lm))
    fwd = fit_regressor(train_lm, gt_train, subset, "forward", e.seed)
    fwd_err = per_image_errors(fwd.predict(test_lm), gt_test, norm)
    bwd = fit_regressor(train_lm, gt_train, subset, "backward", e.seed)
    bwd_err = per_image_errors(bwd.predict(gt_test), test_lm, norm)
    thresholds = np.linspace(0.0, e.ced_max, e.ced_steps)
    curve, auc = ced(fwd_err, thresholds)
    hung = hungarian_accuracy(test_raw, gt_test, norm, e.hungarian_threshold)

    rng = np.random.default_rng([e.seed, 7])
    errs, skipped = [], 0
    n_cons = min(e.consistency_images, len(data.test))
    for i in range(n_cons):
        t = draw_transform(rng, data.test.height, data.test.width, e.consistency_aug)
        img = data.test.images[i]
        roi = data.test.roi(i)
        roi_t = _warp_roi(roi, t, data.test.height, data.test.width)
        detect = _RoiSwitch(discoverer, img, roi, roi_t)
        err, _, _ = consistency_error(detect, img, t)
        if err is None:
            skipped += 1
        else:
            errs.append(err)

    labels = np.concatenate([assign(d, discoverer.model)[0] for d in test_descs if len(d)]) \
        if any(len(d) for d in test_descs) else np.zeros(0, np.int64)
    pool = np.concatenate([d for d in test_descs if len(d)]) if len(labels) else np.zeros((0, 1))
    sil, ch = cluster_quality(pool, labels) if len(np.unique(labels)) > 1 else (None, None)

    yaws = data.test.yaw
    yaw_nme = {}
    if np.all(np.isfinite(yaws)):
        yaw_nme = {str(b): v for b, v in yaw_binned_nme(fwd_err, yaws, e.yaw_edges).items()}
    acc = None
    if pose_labels is not None and np.all(np.isfinite(data.train.yaw)):
        acc = clustering_accuracy(pose_labels, pose_ranges(data.train.yaw, cfg), cfg.q).percent
    rate = float(np.isfinite(test_raw[..., 0]).mean() * 100.0)
    return EvalReport(
        stage=stage, forward_nme=float(fwd_err.mean()), backward_nme=float(bwd_err.mean()),
        ced_thresholds=thresholds.tolist(), ced_curve=curve.tolist(), ced_auc=auc,
        hungarian_accuracy=[None if np.isnan(a) else float(a) for a in hung.accuracy],
        consistency_error=float(np.mean(errs)) if errs else None, consistency_skipped=skipped,
        silhouette=sil, calinski_harabasz=ch, yaw_binned_nme=yaw_nme, clustering_accuracy=acc,
        purity=oracle_purity(data.test, test_found), detection_rate=rate, extra=extra or {})


class _RoiSwitch:
    """Detector callable that uses the source RoI on the source image and the
    transformed RoI on anything else."""

    def __init__(self, discoverer, image, roi, roi_t):
        self.d, self.image, self.roi, self.roi_t = discoverer, image, roi, roi_t

    def __call__(self, img):
        return self.d.image(img, self.roi if img is self.image else self.roi_t)


def forward_nme(cfg: PipelineConfig, data: Data, discoverer) -> float:
    """Forward NME only; cheap enough to track during training."""
    k = discoverer.model.k
    train_lm, fill = fill_missing(landmark_array(discoverer.bank(data.train)[0], k))
    test_lm, _ = fill_missing(landmark_array(discoverer.bank(data.test)[0], k), fill)
    reg = fit_regressor(train_lm, data.train.landmarks, None, "forward", cfg.eval.seed)
    norm = data.test.normalizers(cfg.eval.normalizer, cfg.eval.iod_pair)
    return float(per_image_errors(reg.predict(test_lm), data.test.landmarks, norm).mean())


# --------------------------------------------------------------------------
# stages

def run_zeroshot(cfg: PipelineConfig, data: Data | None = None, write: bool = True):
    """Cluster backbone descriptors of sampled training RoI pixels, then name test landmarks."""
    set_determinism()
    data = data or load_data(cfg)
    model = fit_zeroshot(data.train, cfg)
    disc = ZeroShotDiscoverer(model, data.adapter, cfg.zeroshot_pixels, cfg.seed)
    report = evaluate("zeroshot", cfg, data, disc)
    landmarks = landmark_array(disc.bank(data.test)[0], model.k)
    if write:
        out = run_dir(cfg) / "zeroshot"
        report.write(out)
        save_cluster_models(out / "clusters.bin", [model])
        np.save(out / "landmarks.npy", landmarks)
    return landmarks, report


def _require(cfg: PipelineConfig, stage: str) -> None:
    need = PREREQUISITE.get(stage)
    if need is not None and not has_checkpoint(run_dir(cfg), need):
        raise MissingPrerequisite(stage, need)


def _new_net(cfg: PipelineConfig, data: Data) -> LandmarkNet:
    return LandmarkNet(data.adapter, cfg.net, seed=cfg.seed)


def _new_vae(cfg: PipelineConfig) -> PoseVAE:
    return PoseVAE(cfg.vae, seed=cfg.seed)


def _finish(cfg, stage, data, net, payload, losses: LossReport, pose_labels=None, extra=None):
    out = run_dir(cfg) / stage
    out.mkdir(parents=True, exist_ok=True)
    losses.write_jsonl(out / "losses.jsonl")
    model = fit_eval_model(net, data.train, cfg)
    save_cluster_models(out / "clusters.bin", [model])
    report = evaluate(stage, cfg, data, NetDiscoverer(net, model, data.adapter, cfg.extract),
                      pose_labels=pose_labels, extra=extra)
    report.write(out)
    save_checkpoint(run_dir(cfg), stage, payload, cfg.model_hash())
    resume = out / RESUME
    if resume.exists():
        resume.unlink()
    return report


def _tracker(cfg, data, key, with_pose=False):
    hist = []

    def on_recluster(it, net, X):
        entry = {"iteration": it, "epoch": X.epoch}
        if X.flat_model is not None:
            model = X.flat_model
        else:
            model = fit_eval_model(net, data.train, cfg)
        entry["forward_nme"] = forward_nme(cfg, data, NetDiscoverer(net, model, data.adapter, cfg.extract))
        if with_pose:
            u = np.array([r.pose_label for r in X.records])
            entry["clustering_accuracy"] = clustering_accuracy(
                u, pose_ranges(data.train.yaw, cfg), cfg.q).percent
        hist.append(entry)
        log.info("%s recluster it=%d %s", key, it, entry)
    return on_recluster, hist


def _resume_state(cfg, stage):
    if not has_checkpoint(run_dir(cfg), stage, RESUME):
        return None
    return load_checkpoint(run_dir(cfg), stage, cfg.model_hash(), name=RESUME)


def run_stage(stage: str, cfg: PipelineConfig, data: Data | None = None, stop_after: int | None = None,
              track: bool = True) -> EvalReport:
    """Run one training stage (or ``eval``) and write its artifacts under the run directory.

    A finished stage is not re-run; its saved report is returned. An
    interrupted stage resumes from its last re-clustering checkpoint.
    """
    if stage == "eval":
        return run_eval(cfg, data)
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    _require(cfg, stage)
    rd = run_dir(cfg)
    if has_checkpoint(rd, stage):
        return EvalReport.from_json((rd / stage / "report.json").read_text())
    set_determinism()
    data = data or load_data(cfg)
    (rd / stage).mkdir(parents=True, exist_ok=True)
    (rd / "config.json").write_text(cfg.to_json())

    if stage == "bootstrap":
        net = _new_net(cfg, data)
        bcfg = cfg.bootstrap
        net, _, losses = bootstrap_train(data.train, net, bcfg, cfg.k)
        return _finish(cfg, stage, data, net, {"net": net.state_dict()}, losses)

    prev = load_checkpoint(rd, PREREQUISITE[stage], cfg.model_hash())
    net = _new_net(cfg, data)
    net.load_state_dict(prev["net"])

    if stage == "proxy":
        vae = _new_vae(cfg)
        X = prev["training_set"]
        test_X = _labelled_set(net, data.test, X.flat_model, cfg)
        before = evaluate_elbo(net, vae, test_X, data.test, cfg.proxy.heat_sigma, cfg.proxy.beta)
        vae, losses = train_proxy(net, vae, X, data.train, cfg.proxy)
        after = evaluate_elbo(net, vae, test_X, data.test, cfg.proxy.heat_sigma, cfg.proxy.beta)
        payload = {"net": net.state_dict(), "vae": vae.state_dict(), "training_set": X}
        return _finish(cfg, stage, data, net, payload, losses,
                       extra={"heldout_elbo_before": before, "heldout_elbo_after": after})

    resume = _resume_state(cfg, stage)
    losses = LossReport()
    state = None
    if resume is not None:
        net.load_state_dict(resume["net"])
        losses = resume["losses"]
        state = StageState(resume["iteration"], resume["optimizer"], resume["training_set"])

    on_recluster, hist = _tracker(cfg, data, stage, with_pose=stage == "duldpp") if track else (None, [])
    if resume is not None:
        hist.extend(resume["history"])

    def checkpoint_fn(it, net_, opt, X, vae_=None):
        payload = {"net": net_.state_dict(), "optimizer": opt.state_dict(), "training_set": X,
                   "iteration": it, "losses": LossReport(list(losses.records), list(losses.recluster_events)),
                   "history": list(hist)}
        if vae_ is not None:
            payload["vae"] = vae_.state_dict()
        save_checkpoint(rd, stage, payload, cfg.model_hash(), name=RESUME)

    if stage == "duld":
        X0 = None
        net, traj, losses = train_duld(X0, net, data.train, cfg.duld, cfg.k, losses, on_recluster,
                                       checkpoint_fn, state, stop_after)
        payload = {"net": net.state_dict(), "training_set": traj[-1]}
        return _finish(cfg, stage, data, net, payload, losses, extra={"recluster_history": hist})

    vae = _new_vae(cfg)
    vae.load_state_dict(prev["vae"])
    if resume is not None:
        vae.load_state_dict(resume["vae"])
    net, vae, traj, losses = train_duldpp(
        net, vae, prev["training_set"], data.train, cfg.duldpp, cfg.k, cfg.q, losses, on_recluster,
        lambda it, n, o, X: checkpoint_fn(it, n, o, X, vae), state, stop_after)
    u = np.array([r.pose_label for r in traj[-1].records])
    payload = {"net": net.state_dict(), "vae": vae.state_dict(), "training_set": traj[-1]}
    return _finish(cfg, stage, data, net, payload, losses, pose_labels=u,
                   extra={"recluster_history": hist})


def _labelled_set(net, bank, model: ClusterModel, cfg: PipelineConfig) -> TrainingSet:
    records = []
    for pts, sc, d in extract_keypoints(net, bank, cfg.extract):
        d = normalize_rows(d)
        if len(d):
            lab, dist = assign(d, model)
            keep = exemplar_indices(lab, dist)
        else:
            lab, keep = np.zeros(0, np.int64), np.zeros(0, np.int64)
        records.append(ImageRecord(pts[keep], sc[keep], d[keep], lab[keep].astype(np.int64)))
    return TrainingSet(records, 0, cfg.k, flat_model=model)


def latest_stage(cfg: PipelineConfig) -> str | None:
    for stage in reversed(STAGES):
        if has_checkpoint(run_dir(cfg), stage):
            return stage
    return None


def run_eval(cfg: PipelineConfig, data: Data | None = None, stage: str | None = None) -> EvalReport:
    """Re-evaluate a finished stage (default: the latest) into run_dir/eval/<stage>."""
    stage = stage or latest_stage(cfg)
    if stage is None:
        raise MissingPrerequisite("eval", "bootstrap")
    set_determinism()
    data = data or load_data(cfg)
    payload = load_checkpoint(run_dir(cfg), stage, cfg.model_hash())
    net = _new_net(cfg, data)
    net.load_state_dict(payload["net"])
    model = fit_eval_model(net, data.train, cfg)
    u = None
    if stage == "duldpp":
        u = np.array([r.pose_label for r in payload["training_set"].records])
    report = evaluate(stage, cfg, data, NetDiscoverer(net, model, data.adapter, cfg.extract), pose_labels=u)
    report.write(run_dir(cfg) / "eval" / stage)
    return report


def run_pipeline(cfg: PipelineConfig, data: Data | None = None, track: bool = True) -> dict[str, EvalReport]:
    data = data or load_data(cfg)
    reports = {"zeroshot": run_zeroshot(cfg, data)[1]}
    for stage in STAGES:
        reports[stage] = run_stage(stage, cfg, data, track=track)
    return reports


def summarize(report: EvalReport) -> str:
    keys = ("forward_nme", "backward_nme", "ced_auc", "consistency_error", "clustering_accuracy", "purity")
    return json.dumps({k: getattr(report, k) for k in keys}, sort_keys=True)
