"""Self-supervised keypoint initialisation from image/augmentation pairs."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .backbone import stack_to_tensors
from .clustering import TrainingSet, unlabeled_training_set
from .heads import Heatmap
from .losslog import LossReport, TrainingDiverged, assert_finite_grads
from .model import ExtractConfig, LandmarkNet, extract_keypoints, normalized_volume

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimilarityTransform:
    """p' = s R(angle) Flip (p - c) + c + t, with c the image centre.

    The flip mirrors x about the centre, so on a W-wide image a pure flip
    maps x to W - 1 - x.
    """

    angle: float = 0.0  # radians
    flip: bool = False
    scale: float = 1.0
    tx: float = 0.0
    ty: float = 0.0
    cx: float = 0.0
    cy: float = 0.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    @classmethod
    def identity(cls, height: int, width: int) -> "SimilarityTransform":
        return cls(cx=(width - 1) / 2.0, cy=(height - 1) / 2.0)

    def linear(self) -> np.ndarray:
        c, s = math.cos(self.angle), math.sin(self.angle)
        rot = np.array([[c, -s], [s, c]])
        flip = np.diag([-1.0, 1.0]) if self.flip else np.eye(2)
        return self.scale * rot @ flip

    def matrix(self) -> np.ndarray:
        a = self.linear()
        centre = np.array([self.cx, self.cy])
        m = np.eye(3)
        m[:2, :2] = a
        m[:2, 2] = centre - a @ centre + np.array([self.tx, self.ty])
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        m = self.matrix()
        return p @ m[:2, :2].T + m[:2, 2]

    def inverse_apply(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        m = np.linalg.inv(self.matrix())
        return p @ m[:2, :2].T + m[:2, 2]

    @property
    def is_identity(self) -> bool:
        return np.allclose(self.matrix(), np.eye(3))


@dataclass
class AugConfig:
    max_angle_deg: float = 30.0
    flip_prob: float = 0.5
    scale_range: tuple[float, float] = (1.0, 1.0)
    max_translation: float = 0.0


@dataclass
class CorrespondencePair:
    image: np.ndarray
    image_aug: np.ndarray
    transform: SimilarityTransform
    mask: np.ndarray  # H x W bool, source pixels landing inside the augmented image
    target_xy: np.ndarray  # H x W x 2, A(q) for every source pixel q

    @property
    def target_index(self) -> np.ndarray:
        """Flat index of the nearest augmented pixel to A(q); -1 outside the mask."""
        h, w = self.mask.shape
        r = np.rint(self.target_xy).astype(np.int64)
        idx = r[..., 1] * w + r[..., 0]
        return np.where(self.mask, idx, -1)


def draw_transform(rng: np.random.Generator, height: int, width: int, cfg: AugConfig) -> SimilarityTransform:
    angle = math.radians(rng.uniform(-cfg.max_angle_deg, cfg.max_angle_deg)) if cfg.max_angle_deg > 0 else 0.0
    flip = bool(rng.random() < cfg.flip_prob) if cfg.flip_prob > 0 else False
    lo, hi = cfg.scale_range
    scale = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    t = rng.uniform(-cfg.max_translation, cfg.max_translation, 2) if cfg.max_translation > 0 else (0.0, 0.0)
    return SimilarityTransform(angle, flip, scale, float(t[0]), float(t[1]),
                               (width - 1) / 2.0, (height - 1) / 2.0)


def warp_image(image: np.ndarray, transform: SimilarityTransform, order: int = 0,
               fill: float = 0.0) -> np.ndarray:
    """Image of ``transform`` applied to ``image`` (nearest-neighbour by default,
    so palette colours survive)."""
    h, w = image.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    # round off float noise so exact quarter turns do not drop border pixels
    src = np.round(transform.inverse_apply(np.stack([xs.ravel(), ys.ravel()], axis=1)), 9)
    coords = [src[:, 1].reshape(h, w), src[:, 0].reshape(h, w)]
    if image.ndim == 2:
        return ndimage.map_coordinates(image, coords, order=order, mode="constant", cval=fill)
    return np.stack([ndimage.map_coordinates(image[..., c], coords, order=order, mode="constant",
                                             cval=fill) for c in range(image.shape[2])], axis=-1)


def correspondence_field(transform: SimilarityTransform, height: int, width: int):
    ys, xs = np.mgrid[0:height, 0:width]
    tgt = transform.apply(np.stack([xs.ravel(), ys.ravel()], axis=1)).reshape(height, width, 2)
    r = np.rint(tgt)
    mask = (r[..., 0] >= 0) & (r[..., 0] <= width - 1) & (r[..., 1] >= 0) & (r[..., 1] <= height - 1)
    return tgt, mask


def make_pair(image: np.ndarray, rng_seed, aug_config: AugConfig | None = None) -> CorrespondencePair:
    cfg = aug_config or AugConfig()
    h, w = image.shape[:2]
    transform = draw_transform(np.random.default_rng(rng_seed), h, w, cfg)
    tgt, mask = correspondence_field(transform, h, w)
    return CorrespondencePair(image, warp_image(image, transform), transform, mask, tgt)


def warp_to_source(t_aug: torch.Tensor, pair: CorrespondencePair) -> torch.Tensor:
    """Sample an augmented-frame map (C x H x W) at A(q) for every source pixel q."""
    _, h, w = t_aug.shape
    tgt = torch.from_numpy(pair.target_xy).to(t_aug.dtype)
    grid = torch.stack([2.0 * tgt[..., 0] / max(w - 1, 1) - 1.0,
                        2.0 * tgt[..., 1] / max(h - 1, 1) - 1.0], dim=-1)
    return F.grid_sample(t_aug[None], grid[None], mode="bilinear", align_corners=True)[0]


def _grid(h) -> torch.Tensor:
    if isinstance(h, Heatmap):
        return torch.from_numpy(h.grid)
    return h.reshape(h.shape[-2:]) if h.dim() > 2 else h


def mnn_targets(vol: torch.Tensor, vol_aug: torch.Tensor, pair: CorrespondencePair,
                tolerance: float = 1.0) -> torch.Tensor:
    """Positives are source pixels whose mutual nearest neighbour (by descriptor
    similarity) lands within ``tolerance`` px of the true correspondence."""
    d, h, w = vol.shape
    with torch.no_grad():
        f = F.normalize(vol.reshape(d, -1).t(), dim=1)
        g = F.normalize(vol_aug.reshape(d, -1).t(), dim=1)
        fwd = (f @ g.t()).argmax(dim=1)
        bwd = (g @ f.t()).argmax(dim=1)
        mutual = bwd[fwd] == torch.arange(h * w)
        mx, my = (fwd % w).double(), torch.div(fwd, w, rounding_mode="floor").double()
        tgt = torch.from_numpy(pair.target_xy.reshape(-1, 2))
        close = torch.maximum((mx - tgt[:, 0]).abs(), (my - tgt[:, 1]).abs()) <= tolerance
        m = torch.from_numpy(pair.mask.reshape(-1))
        return (mutual & close & m).reshape(h, w).to(vol.dtype)


def detector_bce(h, h_aug, pair: CorrespondencePair, target) -> torch.Tensor:
    """Mean BCE over masked pixels of both h and h_aug-warped-back against ``target``."""
    h, h_aug, target = _grid(h), _grid(h_aug), _grid(target)
    if h.shape != h_aug.shape:
        raise ValueError("heatmaps differ in shape")
    m = torch.from_numpy(pair.mask)
    if not m.any():
        raise ValueError("empty correspondence mask")
    if pair.transform.is_identity:
        warped = h_aug
    else:
        warped = warp_to_source(h_aug[None], pair)[0]
    t = target.to(h.dtype)[m]
    a = F.binary_cross_entropy(h[m].clamp(0.0, 1.0), t)
    b = F.binary_cross_entropy(warped[m].clamp(0.0, 1.0), t)
    return 0.5 * (a + b)


def correspondence_nll(vol: torch.Tensor, vol_aug: torch.Tensor, pair: CorrespondencePair,
                       temperature: float = 0.1, n_samples: int | None = None,
                       seed=0) -> torch.Tensor:
    """-log p(A(q) | q) with p a softmax over all augmented positions of
    <f(q), f'(.)> / temperature, averaged over (sampled) masked q."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    d, h, w = vol.shape
    idx = np.flatnonzero(pair.mask.reshape(-1))
    if len(idx) == 0:
        raise ValueError("empty correspondence mask")
    if n_samples is not None and n_samples < len(idx):
        idx = np.sort(np.random.default_rng(seed).choice(idx, n_samples, replace=False))
    tgt = torch.from_numpy(pair.target_index.reshape(-1)[idx])
    q = torch.from_numpy(idx)
    f = vol.reshape(d, -1)[:, q].t()
    g = vol_aug.reshape(d, -1).t()
    logits = f @ g.t() / temperature
    return F.cross_entropy(logits, tgt)


@dataclass
class BootstrapConfig:
    iterations: int = 300
    batch_size: int = 4
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    temperature: float = 0.1
    nll_samples: int = 256
    aug: AugConfig = field(default_factory=AugConfig)
    extract: ExtractConfig = field(default_factory=ExtractConfig)
    seed: int = 0


def _pair_batch(bank, indices, it_seed, cfg: BootstrapConfig):
    pairs, aug_stacks = [], []
    for j, i in enumerate(indices):
        pair = make_pair(bank.images[i], [*it_seed, j], cfg.aug)
        pairs.append(pair)
        aug_stacks.append(bank.adapter.extract(pair.image_aug.astype(np.float32)))
    return pairs, stack_to_tensors(aug_stacks)


def bootstrap_step_loss(net: LandmarkNet, bank, indices, it_seed, cfg: BootstrapConfig):
    pairs, aug = _pair_batch(bank, indices, it_seed, cfg)
    heat, desc = net(bank.raw(indices))
    heat_a, desc_a = net(aug)
    vol, vol_a = normalized_volume(desc), normalized_volume(desc_a)
    bce = nll = 0.0
    for j, pair in enumerate(pairs):
        target = mnn_targets(vol[j].detach(), vol_a[j].detach(), pair)
        bce = bce + detector_bce(heat[j, 0], heat_a[j, 0], pair, target)
        nll = nll + correspondence_nll(vol[j], vol_a[j], pair, cfg.temperature, cfg.nll_samples,
                                       seed=[*it_seed, j])
    n = len(pairs)
    return bce / n, nll / n


def bootstrap_train(bank, net: LandmarkNet, cfg: BootstrapConfig, k: int,
                    report: LossReport | None = None,
                    checkpoint_fn=None) -> tuple[LandmarkNet, TrainingSet, LossReport]:
    """Adam on BCE + NLL, then keypoint/descriptor extraction for every image."""
    if len(bank) == 0:
        raise ValueError("empty dataset")
    report = report or LossReport()
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr, betas=tuple(cfg.betas))
    net.train()
    for it in range(cfg.iterations):
        rng = np.random.default_rng([cfg.seed, it])
        idx = rng.choice(len(bank), size=cfg.batch_size, replace=len(bank) < cfg.batch_size).tolist()
        bce, nll = bootstrap_step_loss(net, bank, idx, (cfg.seed, it), cfg)
        loss = bce + nll
        if not torch.isfinite(loss):
            _diverged(net, opt, it, "bootstrap", checkpoint_fn)
        opt.zero_grad()
        loss.backward()
        if not assert_finite_grads(net):
            _diverged(net, opt, it, "bootstrap", checkpoint_fn)
        opt.step()
        report.log(it, "bootstrap", "bce", bce.item())
        report.log(it, "bootstrap", "nll", nll.item())
        report.log(it, "bootstrap", "total", loss.item())
    net.eval()
    extracted = extract_keypoints(net, bank, cfg.extract)
    return net, unlabeled_training_set(extracted, k), report


def _diverged(net, opt, it, stage, checkpoint_fn):
    state = {k: v.detach().clone() for k, v in net.state_dict().items()}
    if checkpoint_fn is not None:
        checkpoint_fn(it, state)
    raise TrainingDiverged(stage, it, state)
