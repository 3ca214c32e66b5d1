"""Dataset manifests, ingestion, synthetic dataset generation and the image bank."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import BackboneAdapter, RoI, roi_from_box, stack_to_tensors
from .synthetic import SceneTemplate, render, sample_poses

log = logging.getLogger(__name__)

ANNOTATIONS = "annotations.jsonl"
FORMATS = ("generic_json_lines", "synthetic")


class ManifestError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


@dataclass
class ManifestEntry:
    image_id: str
    path: str
    landmarks: list[float] | None = None  # flattened x0, y0, x1, y1, ...
    yaw: float | None = None
    box: list[float] | None = None  # x_min, y_min, x_max, y_max (half-open)
    d_iod: float | None = None
    split: str | None = None
    visible: list[bool] | None = None

    def landmark_array(self) -> np.ndarray | None:
        if self.landmarks is None:
            return None
        return np.asarray(self.landmarks, dtype=np.float64).reshape(-1, 2)

    def to_json(self) -> str:
        rec = {k: v for k, v in asdict(self).items() if v is not None}
        return json.dumps(rec, sort_keys=True)


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    root: str = ""
    missing: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def split(self, name: str) -> "DatasetManifest":
        return DatasetManifest([e for e in self.entries if e.split == name], self.root)

    @property
    def n_landmarks(self) -> int | None:
        for e in self.entries:
            if e.landmarks is not None:
                return len(e.landmarks) // 2
        return None

    def image_path(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else Path(self.root) / p


def write_manifest(manifest: DatasetManifest, root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    path = root / ANNOTATIONS
    path.write_text("".join(e.to_json() + "\n" for e in manifest.entries))
    return path


_FIELDS = {"image_id", "path", "image", "landmarks", "yaw", "box", "d_iod", "split", "visible"}


def _parse_entry(rec: dict, lineno: int) -> ManifestEntry:
    if not isinstance(rec, dict):
        raise ManifestError("record is not an object", lineno)
    unknown = set(rec) - _FIELDS
    if unknown:
        raise ManifestError(f"unknown keys {sorted(unknown)}", lineno)
    path = rec.get("path", rec.get("image"))
    if not isinstance(path, str) or not path:
        raise ManifestError("missing image path", lineno)
    lms = rec.get("landmarks")
    if lms is not None:
        if not isinstance(lms, list) or len(lms) % 2 or not all(
                isinstance(v, (int, float)) and math.isfinite(v) for v in lms):
            raise ManifestError("landmarks must be a flat list of finite x, y pairs", lineno)
    box = rec.get("box")
    if box is not None:
        if not isinstance(box, list) or len(box) != 4 or not (box[0] < box[2] and box[1] < box[3]):
            raise ManifestError(f"invalid box {box!r}", lineno)
    d_iod = rec.get("d_iod")
    if d_iod is not None and not (isinstance(d_iod, (int, float)) and d_iod > 0):
        raise ManifestError(f"d_iod must be positive, got {d_iod!r}", lineno)
    yaw = rec.get("yaw")
    if yaw is not None and not isinstance(yaw, (int, float)):
        raise ManifestError(f"yaw must be a number, got {yaw!r}", lineno)
    return ManifestEntry(image_id=str(rec.get("image_id", Path(path).stem)), path=path,
                         landmarks=lms, yaw=yaw, box=box, d_iod=d_iod,
                         split=rec.get("split"), visible=rec.get("visible"))


def ingest_dataset(root, format_id: str = "generic_json_lines") -> DatasetManifest:
    """Read and validate ``root/annotations.jsonl``; images are not loaded."""
    if format_id not in FORMATS:
        raise ManifestError(f"unrecognised format {format_id!r}; expected one of {FORMATS}")
    root = Path(root)
    path = root / ANNOTATIONS
    if not path.exists():
        raise ManifestError(f"no {ANNOTATIONS} under {root}")
    manifest = DatasetManifest(root=str(root))
    seen: set[str] = set()
    n_ref = None
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"malformed JSON: {exc.msg}", lineno) from exc
        entry = _parse_entry(rec, lineno)
        if entry.image_id in seen:
            raise ManifestError(f"duplicate image id {entry.image_id!r}", lineno)
        seen.add(entry.image_id)
        if entry.landmarks is not None:
            n = len(entry.landmarks) // 2
            if n_ref is None:
                n_ref = n
            elif n != n_ref:
                raise ManifestError(f"{n} landmarks, dataset has {n_ref}", lineno)
        if not manifest.image_path(entry).exists():
            log.warning("image %s listed on line %d is missing; excluded", entry.path, lineno)
            manifest.missing.append(entry.path)
            continue
        manifest.entries.append(entry)
    if not manifest.entries and not manifest.missing:
        log.warning("annotation file %s is empty", path)
    return manifest


def load_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path).astype(np.float32)
    from PIL import Image

    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def generate_synthetic_dataset(n_images: int, n_landmarks: int, pose_distribution="frontal",
                               seed: int = 0, n_test: int = 0, template: SceneTemplate | None = None,
                               root=None, side_range=(45.0, 75.0)) -> tuple[list[np.ndarray], DatasetManifest]:
    """Render ``n_images + n_test`` blob scenes with ground truth.

    The first ``n_images`` entries are tagged ``train``; the rest ``test``.
    When ``root`` is given, images are written as ``.npy`` files next to the
    annotation file.
    """
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    template = template or SceneTemplate(n_landmarks=n_landmarks)
    if template.n_landmarks != n_landmarks:
        template = SceneTemplate(**{**asdict(template), "n_landmarks": n_landmarks})
    total = n_images + n_test
    rng = np.random.default_rng(seed)
    poses = sample_poses(total, pose_distribution, rng, tuple(side_range))
    appearance = rng.integers(0, 2 ** 31, size=total)
    images, entries = [], []
    for i in range(total):
        scene = template.scene(float(poses[i]), int(appearance[i]))
        img = render(scene)
        image_id = f"synth_{i:05d}"
        p = scene.positions[scene.visible] if scene.visible.any() else scene.positions
        pad = scene.radius / 2.0
        box = [max(0.0, math.floor(p[:, 0].min() - pad)), max(0.0, math.floor(p[:, 1].min() - pad)),
               min(float(scene.width), math.ceil(p[:, 0].max() + pad) + 1.0),
               min(float(scene.height), math.ceil(p[:, 1].max() + pad) + 1.0)]
        entries.append(ManifestEntry(
            image_id=image_id, path=f"{image_id}.npy",
            landmarks=[round(float(v), 6) for v in scene.positions.reshape(-1)],
            yaw=round(float(poses[i]), 6), box=box,
            split="train" if i < n_images else "test",
            visible=[bool(v) for v in scene.visible]))
        images.append(img)
    manifest = DatasetManifest(entries, root=str(root) if root is not None else "")
    if root is not None:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        for entry, img in zip(entries, images):
            np.save(root / entry.path, img)
        write_manifest(manifest, root)
    return images, manifest


class ImageBank:
    """Images, annotations and cached backbone features for one split."""

    def __init__(self, images: list[np.ndarray], entries: list[ManifestEntry],
                 adapter: BackboneAdapter, dtype=torch.float32):
        if len(images) != len(entries):
            raise ValueError("images and entries differ in length")
        self.images = images
        self.entries = entries
        self.adapter = adapter
        self.height, self.width = adapter.input_size
        stacks = [adapter.extract(img) for img in images]
        self._raw = stack_to_tensors(stacks, dtype) if stacks else {}
        self._rois = [roi_from_box(e.box, self.height, self.width) for e in entries]

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, adapter: BackboneAdapter) -> "ImageBank":
        images = [load_image(manifest.image_path(e)) for e in manifest.entries]
        return cls(images, list(manifest.entries), adapter)

    def __len__(self) -> int:
        return len(self.images)

    def raw(self, indices) -> dict:
        idx = torch.as_tensor(list(indices), dtype=torch.long)
        return {k: v.index_select(0, idx) for k, v in self._raw.items()}

    def roi(self, i: int) -> RoI:
        return self._rois[i]

    def roi_mask(self, i: int) -> np.ndarray:
        xs, ys = self._rois[i].pixel_ranges()
        m = np.zeros((self.height, self.width))
        m[ys.start:ys.stop, xs.start:xs.stop] = 1.0
        return m

    @property
    def landmarks(self) -> np.ndarray:
        return np.stack([e.landmark_array() for e in self.entries])

    @property
    def yaw(self) -> np.ndarray:
        return np.array([np.nan if e.yaw is None else e.yaw for e in self.entries])

    def normalizers(self, kind: str = "bbox_diagonal", iod_pair: tuple[int, int] | None = None) -> np.ndarray:
        """Per-image NME normaliser: ``d_iod``, ``bbox_diagonal`` or ``canvas_diagonal``."""
        if kind == "canvas_diagonal":
            return np.full(len(self), math.hypot(self.height, self.width))
        if kind == "bbox_diagonal":
            lm = self.landmarks
            ext = lm.max(axis=1) - lm.min(axis=1)
            return np.hypot(ext[:, 0], ext[:, 1])
        if kind == "d_iod":
            out = []
            for e in self.entries:
                if e.d_iod is not None:
                    out.append(e.d_iod)
                elif iod_pair is not None:
                    lm = e.landmark_array()
                    out.append(float(np.linalg.norm(lm[iod_pair[0]] - lm[iod_pair[1]])))
                else:
                    raise ValueError(f"{e.image_id}: no d_iod and no iod landmark pair given")
            return np.asarray(out, dtype=np.float64)
        raise ValueError(f"unknown normaliser {kind!r}")
