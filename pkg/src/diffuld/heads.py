"""Detector and descriptor heads, NMS, descriptor sampling and Gaussian targets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from .backbone import FeatureMap


@dataclass
class Heatmap:
    grid: np.ndarray  # H x W in [0, 1]
    source: str = "detector_output"  # or "pseudo_gt"

    def __post_init__(self):
        if self.grid.ndim != 2:
            raise ValueError(f"heatmap must be H x W, got {self.grid.shape}")
        if not np.all(np.isfinite(self.grid)):
            raise ValueError("heatmap has non-finite values")
        if self.grid.size and (self.grid.min() < 0.0 or self.grid.max() > 1.0):
            raise ValueError("heatmap values must lie in [0, 1]")


@dataclass
class Keypoint:
    x: float
    y: float
    score: float = 1.0

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=np.float64)


@dataclass
class Descriptor:
    f: np.ndarray
    normalized: bool = True


@dataclass
class HeadConfig:
    in_channels: int = 32
    descriptor_dim: int = 16
    detector_widths: tuple[int, int] = (32, 16)
    descriptor_widths: tuple[int, int] = (32, 32)
    dilations: tuple[int, int, int] = (1, 2, 4)


def _conv(cin, cout, dilation, kernel=3):
    conv = nn.Conv2d(cin, cout, kernel, padding=dilation * (kernel // 2), dilation=dilation)
    nn.init.zeros_(conv.bias)
    return conv


class DetectorHead(nn.Module):
    """Three dilated 3x3 convolutions ending in a single sigmoid channel."""

    def __init__(self, cfg: HeadConfig):
        super().__init__()
        w1, w2 = cfg.detector_widths
        d1, d2, d3 = cfg.dilations
        self.net = nn.Sequential(
            _conv(cfg.in_channels, w1, d1), nn.ReLU(),
            _conv(w1, w2, d2), nn.ReLU(),
            _conv(w2, 1, d3),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(x))


class DescriptorHead(nn.Module):
    """Two dilated 3x3 convolutions and a 1x1 projection to D channels (unnormalised)."""

    def __init__(self, cfg: HeadConfig):
        super().__init__()
        w1, w2 = cfg.descriptor_widths
        d1, d2, _ = cfg.dilations
        self.net = nn.Sequential(
            _conv(cfg.in_channels, w1, d1), nn.ReLU(),
            _conv(w1, w2, d2), nn.ReLU(),
            _conv(w2, cfg.descriptor_dim, 1, kernel=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class LandmarkHeads(nn.Module):
    def __init__(self, cfg: HeadConfig):
        super().__init__()
        self.cfg = cfg
        self.detector = DetectorHead(cfg)
        self.descriptor = DescriptorHead(cfg)


def _as_input(fmap: FeatureMap, heads: LandmarkHeads) -> torch.Tensor:
    if fmap.channels != heads.cfg.in_channels:
        raise ValueError(f"feature map has {fmap.channels} channels, heads expect "
                         f"{heads.cfg.in_channels}")
    dtype = next(heads.parameters()).dtype
    return torch.from_numpy(np.ascontiguousarray(fmap.grid)).permute(2, 0, 1)[None].to(dtype)


def detect(fmap: FeatureMap, heads: LandmarkHeads) -> Heatmap:
    with torch.no_grad():
        h = heads.detector(_as_input(fmap, heads))[0, 0]
    return Heatmap(h.double().numpy())


def describe(fmap: FeatureMap, heads: LandmarkHeads) -> FeatureMap:
    with torch.no_grad():
        v = heads.descriptor(_as_input(fmap, heads))[0]
    return FeatureMap(v.permute(1, 2, 0).double().numpy(), provenance="descriptor")


def nms_extract(h: Heatmap, window: int = 3, threshold: float = 0.0,
                max_n: int | None = None) -> list[Keypoint]:
    """Strict local maxima of ``h`` over a ``window`` x ``window`` neighbourhood.

    Plateaus yield nothing. Output is sorted by descending score; equal
    scores keep row-major order.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be odd and >= 3")
    grid = np.asarray(h.grid, dtype=np.float64)
    footprint = np.ones((window, window), dtype=bool)
    footprint[window // 2, window // 2] = False
    neighbours = ndimage.maximum_filter(grid, footprint=footprint, mode="constant", cval=-np.inf)
    ys, xs = np.nonzero((grid > neighbours) & (grid >= threshold))
    scores = grid[ys, xs]
    order = np.argsort(-scores, kind="stable")
    if max_n is not None:
        order = order[:max_n]
    return [Keypoint(float(xs[i]), float(ys[i]), float(scores[i])) for i in order]


def nms_points(grid: np.ndarray, window: int, threshold: float, max_n: int | None) -> tuple[np.ndarray, np.ndarray]:
    """Array form of :func:`nms_extract`: (n x 2 points, n scores)."""
    kps = nms_extract(Heatmap(np.clip(grid, 0.0, 1.0)), window, threshold, max_n)
    if not kps:
        return np.zeros((0, 2)), np.zeros(0)
    return (np.array([[k.x, k.y] for k in kps]), np.array([k.score for k in kps]))


def _bilinear(grid: np.ndarray, x: float, y: float) -> np.ndarray:
    h, w = grid.shape[:2]
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    ax, ay = x - x0, y - y0
    return ((1 - ax) * (1 - ay) * grid[y0, x0] + ax * (1 - ay) * grid[y0, x1]
            + (1 - ax) * ay * grid[y1, x0] + ax * ay * grid[y1, x1])


def sample_descriptor(vol: FeatureMap, p: Keypoint) -> Descriptor:
    h, w = vol.grid.shape[:2]
    if not (0.0 <= p.x <= w - 1 and 0.0 <= p.y <= h - 1):
        raise ValueError(f"keypoint ({p.x}, {p.y}) outside {w} x {h} volume")
    v = _bilinear(vol.grid, p.x, p.y)
    n = np.linalg.norm(v)
    return Descriptor(v / n if n > 0 else v, normalized=True)


def sample_descriptors(vol: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Differentiable bilinear sampling + L2 normalisation.

    ``vol`` is D x H x W, ``points`` n x 2 in (x, y) pixels; returns n x D.
    """
    _, h, w = vol.shape
    if points.numel() == 0:
        return vol.new_zeros((0, vol.shape[0]))
    gx = 2.0 * points[:, 0] / max(w - 1, 1) - 1.0
    gy = 2.0 * points[:, 1] / max(h - 1, 1) - 1.0
    grid = torch.stack([gx, gy], dim=-1).to(vol.dtype)[None, None]
    out = F.grid_sample(vol[None], grid, mode="bilinear", align_corners=True)[0, :, 0].t()
    return F.normalize(out, dim=1, eps=1e-12)


def gaussian_grid(points: np.ndarray, sigma: float, height: int, width: int) -> np.ndarray:
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    out = np.zeros((height, width), dtype=np.float64)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        return out
    ys, xs = np.mgrid[0:height, 0:width]
    for x, y in pts:
        np.maximum(out, np.exp(-((xs - x) ** 2 + (ys - y) ** 2) / (2.0 * sigma ** 2)), out=out)
    return out


def render_gaussians(points: list[Keypoint], sigma: float, height: int, width: int) -> Heatmap:
    """Pixel-wise maximum of unit-peak Gaussians centred at ``points``."""
    pts = np.array([[p.x, p.y] for p in points]).reshape(-1, 2)
    return Heatmap(gaussian_grid(pts, sigma, height, width), source="pseudo_gt")
