"""Pipeline configuration with ``desk`` and ``paper`` profiles."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .bootstrap import AugConfig, BootstrapConfig
from .model import ExtractConfig, NetConfig
from .pose_proxy import VaeConfig
from .selftrain import Schedule


@dataclass
class BackboneConfig:
    name: str = "oracle"
    dim: int = 16
    levels: int = 1
    timesteps: int = 1
    noise_sigma: float = 0.05
    seed: int = 0


@dataclass
class DataConfig:
    root: str | None = None  # dataset directory holding annotations.jsonl
    format_id: str = "generic_json_lines"
    n_train: int = 60
    n_test: int = 20
    n_landmarks: int = 6
    pose_distribution: str = "bimodal_right"
    # side mode wholly past the occlusion angle, so the two pose modes differ in visibility
    side_range: tuple[float, float] = (65.0, 85.0)
    seed: int = 0


@dataclass
class EvalConfig:
    normalizer: str = "canvas_diagonal"  # d_iod | bbox_diagonal | canvas_diagonal
    iod_pair: tuple[int, int] | None = None
    regressor_subset: int | None = None
    ced_max: float = 10.0
    ced_steps: int = 41
    hungarian_threshold: float = 0.2
    yaw_edges: tuple[float, ...] = (-90.0, -60.0, -30.0, 30.0, 60.0, 90.0)
    # pose ranges for clustering accuracy, applied to |yaw| when pose_range_abs
    pose_range_edges: tuple[float, ...] = (0.0, 30.0, 90.0)
    pose_range_abs: bool = True
    consistency_images: int = 10
    consistency_aug: AugConfig = field(default_factory=lambda: AugConfig(15.0, 0.0, (1.0, 1.0), 2.0))
    seed: int = 0


@dataclass
class PipelineConfig:
    profile: str = "desk"
    k: int = 10
    q: int = 5
    seed: int = 0
    run_root: str = "runs"
    run_id: str = "default"
    zeroshot_pixels: int = 100
    zeroshot_n_init: int = 4
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    data: DataConfig = field(default_factory=DataConfig)
    net: NetConfig = field(default_factory=NetConfig)
    extract: ExtractConfig = field(default_factory=ExtractConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    bootstrap: BootstrapConfig = field(default_factory=BootstrapConfig)
    duld: Schedule = field(default_factory=lambda: Schedule(stage="duld"))
    proxy: Schedule = field(default_factory=lambda: Schedule(stage="proxy"))
    duldpp: Schedule = field(default_factory=lambda: Schedule(stage="duldpp"))
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.k < 1 or self.q < 1:
            raise ValueError("K and Q must be >= 1")
        if self.profile not in ("desk", "paper"):
            raise ValueError(f"unknown profile {self.profile!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return _build(cls, d)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def override(self, dotted: str, value) -> "PipelineConfig":
        """Copy with one ``section.key`` replaced; ``value`` is parsed as JSON when possible."""
        if isinstance(value, str):
            try:
                value = json.loads(value)
            except json.JSONDecodeError:
                pass
        d = self.to_dict()
        node, keys = d, dotted.split(".")
        for key in keys[:-1]:
            if not isinstance(node, dict) or key not in node:
                raise KeyError(f"unknown config key {dotted!r}")
            node = node[key]
        if not isinstance(node, dict) or keys[-1] not in node:
            raise KeyError(f"unknown config key {dotted!r}")
        node[keys[-1]] = value
        return PipelineConfig.from_dict(d)

    def model_signature(self) -> dict:
        """Fields that determine parameter shapes; checkpoints refuse to load across changes."""
        return {"k": self.k, "q": self.q, "backbone": asdict(self.backbone),
                "net": asdict(self.net), "vae": asdict(self.vae),
                "n_landmarks": self.data.n_landmarks}

    def model_hash(self) -> str:
        blob = json.dumps(self.model_signature(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _build(cls, d):
    if not isinstance(d, dict):
        raise TypeError(f"expected a mapping for {cls.__name__}")
    hints = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(hints)
    if unknown:
        raise KeyError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in d.items():
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current) and isinstance(value, dict):
            value = _build(type(current), value)
        elif isinstance(value, list) and (isinstance(current, tuple) or _tuple_typed(hints[name])):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[name] = value
    return cls(**kwargs)


def _tuple_typed(f) -> bool:
    return "tuple" in str(f.type)


def desk_profile(**overrides) -> PipelineConfig:
    """Defaults sized for a single CPU core and the 48 x 48 synthetic world."""
    cfg = PipelineConfig(
        profile="desk", k=6, q=2,
        bootstrap=BootstrapConfig(iterations=150, batch_size=4, lr=1e-3),
        duld=Schedule(total_iterations=2000, recluster_every=200, learning_rate=1e-3,
                      batch_size=8, stage="duld"),
        proxy=Schedule(total_iterations=500, recluster_every=None, learning_rate=1e-3,
                       batch_size=8, stage="proxy"),
        duldpp=Schedule(total_iterations=2000, recluster_every=200, learning_rate=5e-4,
                        batch_size=8, stage="duldpp"),
    )
    for key, value in overrides.items():
        cfg = cfg.override(key, value)
    return cfg


def paper_profile(**overrides) -> PipelineConfig:
    """The published training constants: Adam (0.9, 0.999), batch 12, margin 0.8,
    re-clustering every 5000 iterations, K = 10, latent size 64."""
    betas = (0.9, 0.999)
    cfg = PipelineConfig(
        profile="paper", k=10, q=5,
        vae=VaeConfig(latent_dim=64),
        net=NetConfig(aggregated_channels=128),
        extract=ExtractConfig(max_keypoints=30),  # 3K
        bootstrap=BootstrapConfig(iterations=50_000, batch_size=12, lr=1e-4, betas=betas),
        duld=Schedule(total_iterations=100_000, recluster_every=5000, learning_rate=1e-4,
                      adam_betas=betas, batch_size=12, margin=0.8, stage="duld"),
        proxy=Schedule(total_iterations=50_000, recluster_every=None, learning_rate=5e-5,
                       adam_betas=betas, batch_size=12, margin=0.8, stage="proxy"),
        duldpp=Schedule(total_iterations=100_000, recluster_every=5000, learning_rate=5e-4,
                        adam_betas=betas, batch_size=12, margin=0.8, stage="duldpp"),
    )
    for key, value in overrides.items():
        cfg = cfg.override(key, value)
    return cfg


PROFILES = {"desk": desk_profile, "paper": paper_profile}
