"""Full-image and face-only preprocessing pipelines.

Stage order is fixed: face extraction (face mode only) -> resize -> scale to
[0, 1] -> per-channel normalization. Output tensors are float32, 3xHxW.
No augmentation is applied anywhere.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, NamedTuple, Protocol, Sequence, runtime_checkable

import numpy as np
import torch
import torch.nn.functional as F

from .data_model import Dataset, Sample, TaskKind

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class Detection(NamedTuple):
    x: int
    y: int
    w: int
    h: int
    confidence: float = 1.0


@runtime_checkable
class FaceDetector(Protocol):
    def detect(self, image: np.ndarray) -> Sequence[Detection]: ...


@dataclass(frozen=True)
class StubDetector:
    """Returns the configured box (clipped to the image) or nothing."""

    box: tuple[int, int, int, int] | None = None
    confidence: float = 1.0

    def detect(self, image: np.ndarray) -> list[Detection]:
        if self.box is None:
            return []
        return [Detection(*self.box, self.confidence)]


@dataclass(frozen=True)
class ThresholdDetector:
    """Bounding box of the pixels whose channel mean exceeds ``threshold``."""

    threshold: float = 200.0

    def detect(self, image: np.ndarray) -> list[Detection]:
        bright = np.asarray(image, dtype=np.float64).mean(axis=2) > self.threshold
        if not bright.any():
            return []
        rows = np.flatnonzero(bright.any(axis=1))
        cols = np.flatnonzero(bright.any(axis=0))
        y0, y1, x0, x1 = rows[0], rows[-1], cols[0], cols[-1]
        return [Detection(int(x0), int(y0), int(x1 - x0 + 1), int(y1 - y0 + 1),
                          float(bright.mean()))]


class HaarCascadeDetector:
    """OpenCV frontal-face Haar cascade. Optional: needs ``opencv-python``."""

    def __init__(self, scale_factor: float = 1.1, min_neighbors: int = 5) -> None:
        import cv2

        self._cv2 = cv2
        self._cascade = cv2.CascadeClassifier(
            cv2.data.haarcascades + "haarcascade_frontalface_default.xml")
        self.scale_factor = scale_factor
        self.min_neighbors = min_neighbors

    def detect(self, image: np.ndarray) -> list[Detection]:
        gray = self._cv2.cvtColor(np.ascontiguousarray(image, dtype=np.uint8),
                                  self._cv2.COLOR_RGB2GRAY)
        boxes, _, weights = self._cascade.detectMultiScale3(
            gray, scaleFactor=self.scale_factor, minNeighbors=self.min_neighbors,
            outputRejectLevels=True)
        return [Detection(int(x), int(y), int(w), int(h), float(c))
                for (x, y, w, h), c in zip(boxes, np.ravel(weights))]


_DETECTORS = {
    "stub": StubDetector,
    "threshold": ThresholdDetector,
    "haar": HaarCascadeDetector,
}


def get_detector(name: str, **kwargs: Any) -> FaceDetector:
    try:
        factory = _DETECTORS[name]
    except KeyError:
        raise ValueError(f"unknown detector {name!r}; known: {sorted(_DETECTORS)}") from None
    return factory(**kwargs)


def register_detector(name: str, factory: Any) -> None:
    _DETECTORS[name] = factory


@dataclass(frozen=True)
class PipelineConfig:
    target_size: tuple[int, int] = (224, 224)
    channel_means: tuple[float, float, float] = IMAGENET_MEAN
    channel_stds: tuple[float, float, float] = IMAGENET_STD
    face_mode: bool = False
    detector: FaceDetector | None = field(default=None, compare=False)
    detector_name: str = "stub"

    def __post_init__(self) -> None:
        h, w = self.target_size
        if h <= 0 or w <= 0:
            raise ValueError("target_size must be positive")
        if len(self.channel_means) != 3 or len(self.channel_stds) != 3:
            raise ValueError("channel stats must be 3-vectors")
        if any(s <= 0 for s in self.channel_stds):
            raise ValueError("channel stds must be strictly positive")
        object.__setattr__(self, "target_size", (int(h), int(w)))

    def to_dict(self) -> dict[str, Any]:
        return {
            "target_size": list(self.target_size),
            "channel_means": list(self.channel_means),
            "channel_stds": list(self.channel_stds),
            "face_mode": self.face_mode,
            "detector": self.detector_name,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "PipelineConfig":
        detector_cfg = data.get("detector", "stub")
        if isinstance(detector_cfg, dict):
            detector_cfg = dict(detector_cfg)
            det_name = detector_cfg.pop("name")
            det_kwargs = detector_cfg
        else:
            det_name, det_kwargs = detector_cfg, {}
        face_mode = bool(data.get("face_mode", False))
        return cls(
            target_size=tuple(data.get("target_size", (224, 224))),
            channel_means=tuple(data.get("channel_means", IMAGENET_MEAN)),
            channel_stds=tuple(data.get("channel_stds", IMAGENET_STD)),
            face_mode=face_mode,
            detector=get_detector(det_name, **det_kwargs) if face_mode else None,
            detector_name=det_name,
        )


class FaceCrop(NamedTuple):
    image: np.ndarray
    face_found: bool


def extract_face(img: np.ndarray, det: FaceDetector) -> FaceCrop:
    """Crop the highest-confidence detection; fall back to the full image."""
    img = np.asarray(img)
    h, w = img.shape[:2]
    detections = list(det.detect(img))
    if not detections:
        return FaceCrop(img, False)
    # max() keeps the first of equal-confidence boxes
    best = max(detections, key=lambda d: d.confidence)
    x0, y0 = max(0, best.x), max(0, best.y)
    x1, y1 = min(w, best.x + best.w), min(h, best.y + best.h)
    if x1 <= x0 or y1 <= y0:
        return FaceCrop(img, False)
    return FaceCrop(img[y0:y1, x0:x1], True)


def resize_image(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an HxWxC array to ``size`` (H, W), float64 out."""
    h, w = size
    if h <= 0 or w <= 0:
        raise ValueError("size must be positive")
    arr = np.asarray(img, dtype=np.float64)
    if arr.shape[:2] == (h, w):
        return arr.copy()
    t = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]
    out = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
    out = out[0].numpy().transpose(1, 2, 0)
    # outputs are convex combinations; clip the rounding that leaks past the input range
    return np.clip(out, arr.min(), arr.max())


def scale_pixels(img: np.ndarray) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise ValueError(f"pixel values outside [0, 255]: [{arr.min()}, {arr.max()}]")
    return arr / 255.0


def unscale_pixels(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) * 255.0


def normalize_channels(img: np.ndarray, means: Sequence[float], stds: Sequence[float]) -> np.ndarray:
    """Per-channel ``(x - mean) / std`` on an HxWx3 array."""
    means = np.asarray(means, dtype=np.float64)
    stds = np.asarray(stds, dtype=np.float64)
    return (np.asarray(img, dtype=np.float64) - means) / stds


class Processed(NamedTuple):
    tensor: np.ndarray  # float32, 3xHxW
    no_face: bool


def run_pipeline(s: Sample | np.ndarray, cfg: PipelineConfig) -> Processed:
    img = s.image if isinstance(s, Sample) else np.asarray(s)
    no_face = False
    if cfg.face_mode:
        detector = cfg.detector if cfg.detector is not None else StubDetector()
        img, found = extract_face(img, detector)
        no_face = not found
    out = resize_image(img, cfg.target_size)
    out = scale_pixels(out)
    out = normalize_channels(out, cfg.channel_means, cfg.channel_stds)
    return Processed(np.ascontiguousarray(out.transpose(2, 0, 1), dtype=np.float32), no_face)


@dataclass
class PreparedData:
    """Stacked pipeline output for a dataset, with integer targets (-1 = absent)."""

    x: np.ndarray
    targets: dict[TaskKind, np.ndarray]
    image_ids: list[str]
    no_face: np.ndarray

    def __len__(self) -> int:
        return len(self.image_ids)

    def subset(self, idx: np.ndarray) -> "PreparedData":
        return PreparedData(self.x[idx], {t: v[idx] for t, v in self.targets.items()},
                            [self.image_ids[i] for i in idx], self.no_face[idx])


def encode_targets(d: Dataset, tasks: Sequence[TaskKind] | None = None) -> dict[TaskKind, np.ndarray]:
    tasks = d.schema.tasks if tasks is None else tasks
    targets = {}
    for task in tasks:
        col = np.full(len(d), -1, dtype=np.int64)
        if d.schema.constrains(task):
            lookup = {c: i for i, c in enumerate(d.schema.categories[task])}
            for i, s in enumerate(d.samples):
                if task in s.labels:
                    col[i] = lookup[s.labels[task]]
        targets[task] = col
    return targets


def preprocess_dataset(d: Dataset, cfg: PipelineConfig) -> PreparedData:
    h, w = cfg.target_size
    x = np.empty((len(d), 3, h, w), dtype=np.float32)
    no_face = np.zeros(len(d), dtype=bool)
    for i, s in enumerate(d.samples):
        x[i], no_face[i] = run_pipeline(s, cfg)
    return PreparedData(x, encode_targets(d), d.image_ids, no_face)
