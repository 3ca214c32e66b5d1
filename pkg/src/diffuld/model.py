"""The landmark network (aggregator + heads) and keypoint extraction."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import Aggregator, BackboneAdapter
from .heads import HeadConfig, LandmarkHeads, nms_points, sample_descriptors


@dataclass
class NetConfig:
    aggregated_channels: int = 32
    descriptor_dim: int = 16
    detector_widths: tuple[int, int] = (32, 16)
    descriptor_widths: tuple[int, int] = (32, 32)
    dilations: tuple[int, int, int] = (1, 2, 4)
    bottleneck: str = "conv"
    activation: str = "relu"


class LandmarkNet(nn.Module):
    """Aggregator followed by the detector and descriptor heads."""

    def __init__(self, adapter: BackboneAdapter, cfg: NetConfig | None = None, seed: int = 0):
        super().__init__()
        cfg = cfg or NetConfig()
        self.cfg = cfg
        torch.manual_seed(seed)
        self.aggregator = Aggregator(adapter.pairs, adapter.channels, cfg.aggregated_channels,
                                     adapter.input_size, cfg.bottleneck, cfg.activation)
        self.heads = LandmarkHeads(HeadConfig(cfg.aggregated_channels, cfg.descriptor_dim,
                                              tuple(cfg.detector_widths),
                                              tuple(cfg.descriptor_widths), tuple(cfg.dilations)))

    @property
    def detector(self) -> nn.Module:
        return self.heads.detector

    @property
    def descriptor(self) -> nn.Module:
        return self.heads.descriptor

    def forward(self, stack) -> tuple[torch.Tensor, torch.Tensor]:
        f = self.aggregator(stack)
        return self.heads.detector(f), self.heads.descriptor(f)

    def heatmaps(self, stack) -> torch.Tensor:
        return self.heads.detector(self.aggregator(stack))


def param_checksum(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class ExtractConfig:
    window: int = 5
    threshold: float = 0.05
    max_keypoints: int = 18
    restrict_to_roi: bool = True


def extract_keypoints(net: LandmarkNet, bank, cfg: ExtractConfig, indices=None,
                      batch_size: int = 16) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Per image: (points n x 2, scores n, L2-normalised descriptors n x D)."""
    indices = range(len(bank)) if indices is None else indices
    indices = list(indices)
    out = []
    was_training = net.training
    net.eval()
    with torch.no_grad():
        for s in range(0, len(indices), batch_size):
            chunk = indices[s:s + batch_size]
            heat, desc = net(bank.raw(chunk))
            for j, i in enumerate(chunk):
                grid = heat[j, 0].double().numpy()
                if cfg.restrict_to_roi:
                    grid = grid * bank.roi_mask(i)
                pts, scores = nms_points(grid, cfg.window, cfg.threshold, cfg.max_keypoints)
                d = sample_descriptors(desc[j], torch.from_numpy(pts).to(desc.dtype))
                out.append((pts, scores, d.double().numpy()))
    net.train(was_training)
    return out


def normalize_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(n > 0, n, 1.0)


def normalized_volume(desc: torch.Tensor) -> torch.Tensor:
    return F.normalize(desc, dim=-3, eps=1e-12)
