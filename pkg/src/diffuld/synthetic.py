"""Procedural blob scenes used as a desk-scale stand-in for pose-varying objects.

Each scene is a small grid of landmark identities. A scalar pose in degrees
moves every landmark horizontally by ``amplitude * sin(pose) * depth`` where
``depth`` is a fixed per-landmark value (a depth shear). Landmarks on the far
side are hidden once ``|pose|`` exceeds the occlusion angle.
"""

from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class SyntheticScene:
    height: int
    width: int
    positions: np.ndarray  # K_true x 2, (x, y) pixel coordinates
    visible: np.ndarray  # K_true bool
    pose: float = 0.0
    radius: float = 8.0
    appearance_seed: int = 0
    landmark_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.visible = np.asarray(self.visible, dtype=bool)
        if self.landmark_ids is None:
            self.landmark_ids = np.arange(len(self.positions))
        if self.positions.ndim != 2 or self.positions.shape[1] != 2:
            raise ValueError("positions must be K x 2")
        if np.any(self.positions < 0) or np.any(self.positions[:, 0] > self.width - 1) \
                or np.any(self.positions[:, 1] > self.height - 1):
            raise ValueError("landmarks must lie inside the canvas")

    @property
    def n_landmarks(self) -> int:
        return len(self.positions)


@dataclass(frozen=True)
class SceneTemplate:
    """Canonical landmark layout plus the depth-shear parameters."""

    height: int = 48
    width: int = 48
    n_landmarks: int = 6
    spacing: float = 10.0
    radius: float = 8.0
    amplitude: float = 8.0
    occlusion_angle: float = 60.0
    jitter: float = 1.0

    def canonical(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (positions, depths) at pose 0, grid centred on the canvas."""
        k = self.n_landmarks
        ncols = math.ceil(math.sqrt(1.5 * k))
        nrows = math.ceil(k / ncols)
        cx, cy = (self.width - 1) / 2.0, (self.height - 1) / 2.0
        pts = []
        for i in range(k):
            r, c = divmod(i, ncols)
            pts.append((cx + (c - (ncols - 1) / 2.0) * self.spacing,
                        cy + (r - (nrows - 1) / 2.0) * self.spacing))
        pts = np.array(pts)
        half = max((ncols - 1) / 2.0 * self.spacing, 1e-9)
        depth = 1.0 - ((pts[:, 0] - cx) / half) ** 2
        return pts, depth

    def deform(self, pose: float) -> tuple[np.ndarray, np.ndarray]:
        """Landmark positions and visibility at ``pose`` degrees (no jitter)."""
        if not -90.0 <= pose <= 90.0:
            raise ValueError(f"pose {pose} outside [-90, 90]")
        pts, depth = self.canonical()
        out = pts.copy()
        out[:, 0] += self.amplitude * math.sin(math.radians(pose)) * depth
        visible = np.ones(len(pts), dtype=bool)
        if abs(pose) > self.occlusion_angle:
            cx = (self.width - 1) / 2.0
            far = np.sign(pts[:, 0] - cx) == -np.sign(pose)
            visible &= ~far
        return out, visible

    def scene(self, pose: float, appearance_seed: int = 0) -> SyntheticScene:
        pts, visible = self.deform(pose)
        if self.jitter > 0:
            rng = np.random.default_rng(appearance_seed)
            pts = pts + rng.uniform(-self.jitter, self.jitter, size=2)
        return SyntheticScene(self.height, self.width, pts, visible, pose=pose,
                              radius=self.radius, appearance_seed=appearance_seed)


def palette(n_identities: int) -> np.ndarray:
    """RGB colours: index 0 is the background, 1..n are landmark identities."""
    cols = [(0.0, 0.0, 0.0)]
    for i in range(n_identities):
        cols.append(colorsys.hsv_to_rgb(i / n_identities, 0.9, 0.95))
    return np.array(cols, dtype=np.float32)


def identity_map(scene: SyntheticScene) -> np.ndarray:
    """Per-pixel identity: -1 for background, else the nearest visible landmark
    within ``scene.radius``."""
    ys, xs = np.mgrid[0:scene.height, 0:scene.width]
    out = np.full((scene.height, scene.width), -1, dtype=np.int64)
    vis = np.flatnonzero(scene.visible)
    if len(vis) == 0:
        return out
    p = scene.positions[vis]
    d2 = (xs[..., None] - p[:, 0]) ** 2 + (ys[..., None] - p[:, 1]) ** 2
    nearest = np.argmin(d2, axis=-1)
    inside = np.min(d2, axis=-1) <= scene.radius ** 2
    out[inside] = vis[nearest[inside]]
    return out


def render(scene: SyntheticScene) -> np.ndarray:
    """Render the scene as an H x W x 3 float32 image in [0, 1]."""
    ids = identity_map(scene)
    pal = palette(scene.n_landmarks)
    return pal[ids + 1]


def scene_roi(scene: SyntheticScene, pad: float | None = None) -> tuple[float, float, float, float]:
    """Bounding box of the visible landmarks, padded by half the blob radius."""
    pad = scene.radius / 2.0 if pad is None else pad
    p = scene.positions[scene.visible] if scene.visible.any() else scene.positions
    x0 = max(0.0, float(np.floor(p[:, 0].min() - pad)))
    y0 = max(0.0, float(np.floor(p[:, 1].min() - pad)))
    x1 = min(scene.width - 1.0, float(np.ceil(p[:, 0].max() + pad)))
    y1 = min(scene.height - 1.0, float(np.ceil(p[:, 1].max() + pad)))
    return (x0, y0, x1, y1)


def sample_poses(n: int, distribution: str | tuple, rng: np.random.Generator,
                 side_range: tuple[float, float] = (45.0, 75.0)) -> np.ndarray:
    """Draw ``n`` poses.

    ``distribution`` is one of ``"frontal"`` (all zero), ``"uniform"``
    ([-90, 90]), ``"bimodal"`` (half |pose| < 30, half |pose| in
    ``side_range`` with a random sign), ``"bimodal_right"`` (side half
    positive only), or ``("fixed", value)``.
    """
    if isinstance(distribution, (tuple, list)):
        kind, value = distribution
        if kind != "fixed":
            raise ValueError(f"unknown pose distribution {distribution!r}")
        return np.full(n, float(value))
    if distribution == "frontal":
        return np.zeros(n)
    if distribution == "uniform":
        return rng.uniform(-90.0, 90.0, size=n)
    if distribution in ("bimodal", "bimodal_right"):
        side = np.arange(n) % 2 == 1
        out = rng.uniform(-30.0, 30.0, size=n)
        lo, hi = side_range
        if not 30.0 <= lo <= hi <= 90.0:
            raise ValueError(f"side range must lie in [30, 90], got {side_range}")
        mag = rng.uniform(lo, hi, size=n)
        sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
        if distribution == "bimodal_right":
            sign = np.ones(n)
        out[side] = (mag * sign)[side]
        return out
    raise ValueError(f"unknown pose distribution {distribution!r}")
