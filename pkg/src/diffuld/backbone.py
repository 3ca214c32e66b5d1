"""Feature backbones, the layer/timestep aggregator and RoI pixel sampling."""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .synthetic import SyntheticScene, palette, render


class BackboneUnavailable(RuntimeError):
    pass


class ConfigurationError(ValueError):
    pass


Pair = tuple[int, int]  # (layer index, timestep index)


@dataclass
class RawFeatureStack:
    maps: dict[Pair, np.ndarray]  # (l, t) -> h_l x w_l x d_l

    def __post_init__(self):
        if not self.maps:
            raise ValueError("empty feature stack")
        for key, grid in self.maps.items():
            if grid.ndim != 3:
                raise ValueError(f"grid {key} must be h x w x d, got {grid.shape}")
            if not np.all(np.isfinite(grid)):
                raise ValueError(f"grid {key} has non-finite values")

    @property
    def pairs(self) -> list[Pair]:
        return sorted(self.maps)

    @property
    def layers(self) -> list[int]:
        return sorted({l for l, _ in self.maps})

    @property
    def timesteps(self) -> list[int]:
        return sorted({t for _, t in self.maps})

    def channels(self) -> dict[int, int]:
        return {l: g.shape[2] for (l, _), g in self.maps.items()}


@dataclass
class FeatureMap:
    grid: np.ndarray  # H x W x D
    provenance: str = ""

    def __post_init__(self):
        if self.grid.ndim != 3 or self.grid.shape[0] <= 0 or self.grid.shape[1] <= 0:
            raise ValueError(f"feature map must be H x W x D, got {self.grid.shape}")
        if not np.all(np.isfinite(self.grid)):
            raise ValueError("feature map has non-finite values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.grid.shape

    @property
    def channels(self) -> int:
        return self.grid.shape[2]


@dataclass
class RoI:
    """Half-open pixel box: pixels with x_min <= x < x_max, y_min <= y < y_max."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate RoI {self.box}")

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def clamp(self, height: int, width: int) -> "RoI":
        return RoI(max(0.0, self.x_min), max(0.0, self.y_min),
                   min(float(width), self.x_max), min(float(height), self.y_max))

    def pixel_ranges(self) -> tuple[range, range]:
        xs = range(math.ceil(self.x_min), math.ceil(self.x_max))
        ys = range(math.ceil(self.y_min), math.ceil(self.y_max))
        return xs, ys

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return ((p[:, 0] >= self.x_min) & (p[:, 0] < self.x_max)
                & (p[:, 1] >= self.y_min) & (p[:, 1] < self.y_max))


def full_image_roi(height: int, width: int) -> RoI:
    return RoI(0.0, 0.0, float(width), float(height))


def roi_from_box(box, height: int, width: int) -> RoI:
    """RoI from a dataset box, falling back to the full image when absent."""
    if box is None:
        return full_image_roi(height, width)
    return RoI(*map(float, box)).clamp(height, width)


def sample_roi_pixels(roi: RoI, n: int, seed: int) -> np.ndarray:
    """Draw ``n`` distinct integer pixels (x, y) uniformly from inside ``roi``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    xs, ys = roi.pixel_ranges()
    area = len(xs) * len(ys)
    if n > area:
        raise ValueError(f"cannot sample {n} distinct pixels from an RoI of {area}")
    rng = np.random.default_rng(seed)
    flat = rng.choice(area, size=n, replace=False)
    yi, xi = np.divmod(flat, len(xs))
    return np.stack([xi + xs.start, yi + ys.start], axis=1).astype(np.int64)


# --------------------------------------------------------------------------
# adapters

class BackboneAdapter:
    """Contract every feature backbone implements.

    ``pairs`` lists the (layer, timestep) combinations the adapter emits and
    ``channels`` the per-layer channel count; the aggregator reads both from
    here instead of hard-coding them.
    """

    name: str = "abstract"
    input_size: tuple[int, int] = (0, 0)
    pairs: list[Pair] = []
    channels: dict[int, int] = {}

    def extract(self, image: np.ndarray) -> RawFeatureStack:
        raise NotImplementedError

    def check_input(self, image: np.ndarray) -> None:
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"{self.name}: expected H x W x 3 image, got {image.shape}")
        if tuple(image.shape[:2]) != tuple(self.input_size):
            raise ValueError(f"{self.name}: image size {image.shape[:2]} does not match "
                             f"declared input size {tuple(self.input_size)}")


class OracleBackbone(BackboneAdapter):
    """Synthetic backbone that reads landmark identities off palette colours.

    Pixels painted with identity ``k`` map to a fixed unit embedding ``e_k``;
    every other pixel maps to the background embedding. Embeddings are rows of
    a random orthogonal matrix, so any two are sqrt(2) apart. Layer ``l`` is
    average-pooled by ``2**l``; each timestep gets independent Gaussian noise
    of scale ``noise_sigma``. Noise is seeded by (seed, l, t, image checksum),
    so extraction is a pure function of the image.
    """

    name = "oracle"

    def __init__(self, n_identities: int, dim: int = 16, levels: int = 1, timesteps: int = 1,
                 noise_sigma: float = 0.05, seed: int = 0, input_size=(48, 48)):
        if dim < n_identities + 1:
            raise ConfigurationError(f"oracle dim {dim} too small for {n_identities} identities")
        self.n_identities = n_identities
        self.dim = dim
        self.noise_sigma = float(noise_sigma)
        self.seed = int(seed)
        self.input_size = tuple(input_size)
        self.pairs = [(l, t) for l in range(levels) for t in range(timesteps)]
        self.channels = {l: dim for l in range(levels)}
        q, _ = np.linalg.qr(np.random.default_rng(self.seed).standard_normal((dim, dim)))
        self.embeddings = q[: n_identities + 1].astype(np.float64)  # row 0 = background
        self.palette = palette(n_identities).astype(np.float64)

    @property
    def margin(self) -> float:
        d = np.linalg.norm(self.embeddings[:, None] - self.embeddings[None], axis=-1)
        return float(d[~np.eye(len(d), dtype=bool)].min() / 2.0)

    def identities(self, image: np.ndarray) -> np.ndarray:
        """Identity index per pixel, -1 for background (nearest palette colour)."""
        d = ((image[..., None, :].astype(np.float64) - self.palette) ** 2).sum(-1)
        return np.argmin(d, axis=-1) - 1

    def extract(self, image: np.ndarray) -> RawFeatureStack:
        self.check_input(image)
        base = self.embeddings[self.identities(image) + 1]
        crc = zlib.crc32(np.ascontiguousarray(image, dtype=np.float32).tobytes())
        maps = {}
        for l, t in self.pairs:
            grid = _avg_pool(base, 2 ** l)
            if self.noise_sigma > 0:
                rng = np.random.default_rng([self.seed, l, t, crc])
                grid = grid + self.noise_sigma * rng.standard_normal(grid.shape)
            maps[(l, t)] = grid
        return RawFeatureStack(maps)


def _avg_pool(grid: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return grid.copy()
    h, w, d = grid.shape
    h2, w2 = h // factor, w // factor
    g = grid[: h2 * factor, : w2 * factor].reshape(h2, factor, w2, factor, d)
    return g.mean(axis=(1, 3))


class StableDiffusionAdapter(BackboneAdapter):
    """Placeholder for a real latent-diffusion feature extractor (not shipped)."""

    name = "stable_diffusion"

    def __init__(self, **kwargs):
        raise BackboneUnavailable(
            "backbone adapter 'stable_diffusion' is not available in this build; "
            "use 'oracle' or register an external adapter")


ADAPTERS: dict[str, type] = {
    "oracle": OracleBackbone,
    "stable_diffusion": StableDiffusionAdapter,
}


def get_adapter(name: str, **kwargs) -> BackboneAdapter:
    if name not in ADAPTERS:
        raise BackboneUnavailable(f"unknown backbone adapter {name!r}")
    return ADAPTERS[name](**kwargs)


def extract_raw(image: np.ndarray, backbone: BackboneAdapter) -> RawFeatureStack:
    if backbone is None:
        raise BackboneUnavailable("no backbone adapter given")
    stack = backbone.extract(image)
    missing = set(backbone.pairs) - set(stack.maps)
    if missing:
        raise BackboneUnavailable(f"{backbone.name}: adapter did not return pairs {sorted(missing)}")
    return stack


def oracle_backbone(scene: SyntheticScene, noise_sigma: float, seed: int, dim: int = 16) -> FeatureMap:
    """Oracle descriptors for ``scene`` at full resolution."""
    adapter = OracleBackbone(scene.n_landmarks, dim=dim, noise_sigma=noise_sigma, seed=seed,
                             input_size=(scene.height, scene.width))
    stack = adapter.extract(render(scene))
    return FeatureMap(stack.maps[(0, 0)], provenance=f"oracle:sigma={noise_sigma}:seed={seed}")


# --------------------------------------------------------------------------
# aggregation

@dataclass
class AggregatorParams:
    """Mixing weights per (l, t) plus a per-layer bottleneck.

    A bottleneck is ``None`` (identity, requires d_l == out_channels) or a
    ``(weight, bias)`` pair with weight of shape out_channels x d_l.
    """

    weights: dict[Pair, float]
    bottlenecks: dict[int, tuple[np.ndarray, np.ndarray] | None]
    out_channels: int
    size: tuple[int, int]
    activation: str = "relu"
    extra: dict = field(default_factory=dict)


class Aggregator(nn.Module):
    """Upscale every r_{l,t} bilinearly, project with B_l, weight and sum."""

    def __init__(self, pairs, channels: dict[int, int], out_channels: int, size,
                 bottleneck: str = "conv", activation: str = "relu"):
        super().__init__()
        self.pairs = sorted(tuple(p) for p in pairs)
        self.size = tuple(size)
        self.out_channels = out_channels
        self.activation = activation
        self.layers = sorted({l for l, _ in self.pairs})
        self.bottlenecks = nn.ModuleDict()
        for l in self.layers:
            if bottleneck == "identity":
                if channels[l] != out_channels:
                    raise ConfigurationError(f"identity bottleneck needs d_{l} == {out_channels}")
                self.bottlenecks[str(l)] = nn.Identity()
            else:
                conv = nn.Conv2d(channels[l], out_channels, kernel_size=1)
                nn.init.zeros_(conv.bias)
                self.bottlenecks[str(l)] = conv
        self.mixing = nn.Parameter(torch.full((len(self.pairs),), 1.0 / len(self.pairs)))

    def _project(self, l: int, x: torch.Tensor) -> torch.Tensor:
        b = self.bottlenecks[str(l)]
        if isinstance(b, nn.Identity):
            return x
        y = b(x)
        if self.activation == "relu":
            y = F.relu(y)
        elif self.activation == "tanh":
            y = torch.tanh(y)
        return y

    def forward(self, stack: dict[Pair, torch.Tensor]) -> torch.Tensor:
        missing = [p for p in stack if p not in self.pairs]
        if missing:
            raise ConfigurationError(f"no mixing weight for pairs {missing}")
        out = None
        for i, (l, t) in enumerate(self.pairs):
            if (l, t) not in stack:
                continue
            r = stack[(l, t)]
            if tuple(r.shape[-2:]) != self.size:
                r = F.interpolate(r, size=self.size, mode="bilinear", align_corners=False)
            term = self.mixing[i] * self._project(l, r)
            out = term if out is None else out + term
        return out

    def to_params(self) -> AggregatorParams:
        weights = {p: float(w) for p, w in zip(self.pairs, self.mixing.detach().double())}
        bns = {}
        for l in self.layers:
            b = self.bottlenecks[str(l)]
            if isinstance(b, nn.Identity):
                bns[l] = None
            else:
                bns[l] = (b.weight.detach().double().numpy()[:, :, 0, 0].copy(),
                          b.bias.detach().double().numpy().copy())
        return AggregatorParams(weights, bns, self.out_channels, self.size, self.activation)

    @classmethod
    def from_params(cls, params: AggregatorParams) -> "Aggregator":
        pairs = sorted(params.weights)
        channels, kind = {}, "conv"
        for l, b in params.bottlenecks.items():
            if b is None:
                channels[l] = params.out_channels
                kind = "identity"
            else:
                channels[l] = b[0].shape[1]
        agg = cls(pairs, channels, params.out_channels, params.size, kind, params.activation).double()
        with torch.no_grad():
            agg.mixing.copy_(torch.tensor([params.weights[p] for p in pairs], dtype=torch.float64))
            for l, b in params.bottlenecks.items():
                if b is not None:
                    conv = agg.bottlenecks[str(l)]
                    conv.weight.copy_(torch.from_numpy(b[0])[:, :, None, None])
                    conv.bias.copy_(torch.from_numpy(b[1]))
        return agg


def stack_to_tensors(stacks, dtype=torch.float32) -> dict[Pair, torch.Tensor]:
    """Batch a list of RawFeatureStack into (l, t) -> N x d x h x w tensors."""
    if isinstance(stacks, RawFeatureStack):
        stacks = [stacks]
    keys = stacks[0].pairs
    return {k: torch.from_numpy(np.stack([s.maps[k] for s in stacks])).permute(0, 3, 1, 2)
            .contiguous().to(dtype) for k in keys}


def aggregate(raw: RawFeatureStack, params: AggregatorParams) -> FeatureMap:
    """Aggregated feature map sum_{l,t} w_{l,t} B_l(upscale(r_{l,t}))."""
    missing = [p for p in raw.pairs if p not in params.weights]
    if missing:
        raise ConfigurationError(f"no mixing weight for pairs {missing}")
    agg = Aggregator.from_params(params)
    with torch.no_grad():
        out = agg(stack_to_tensors(raw, torch.float64))[0].permute(1, 2, 0).numpy()
    return FeatureMap(out, provenance="aggregate")
