"""Procedural toy datasets with controllable cluster tightness, diversity and
label balance, plus distribution-shifted out-of-distribution variants.

Every (task, class) pair owns a colored geometric component; an image is the
sum of one component per task on a gray canvas:

* gaze       - low-frequency gray grating, class sets the orientation
* age        - centered soft disc, class sets the hue
* expression - gray high-frequency diagonal grating, class sets the frequency

Cluster tightness is i.i.d. Gaussian pixel noise (std in 0-1 units).
Diversity adds per-sample nuisance variation that never changes the label:
random translation, hue jitter and brightness jitter. The OOD shift applies a
fixed hue rotation, spatial offset and brightness offset to every prototype.

Randomness comes from ``numpy.random.Generator(PCG64)`` seeded per sample
with ``SeedSequence((seed, stream, index))``, so outputs are platform independent and
any single sample can be regenerated on its own.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Any, Mapping, Sequence

import numpy as np

from .data_model import ALL_TASKS, Dataset, LabelSchema, Sample, TaskKind, as_task

UNIFIED_CATEGORIES: dict[TaskKind, tuple[str, ...]] = {
    TaskKind.GAZE: ("infotainment", "ext_mirror", "int_mirror", "rear", "road", "passenger"),
    TaskKind.AGE: ("teen", "adult", "elderly"),
    TaskKind.EXPRESSION: ("happy", "surprised", "frown", "neutral", "sad"),
}

# magnitude of each OOD perturbation per unit of shift_magnitude
SHIFT_HUE_DEGREES = 90.0
SHIFT_OFFSET_FRACTION = 0.25  # of the image side
SHIFT_BRIGHTNESS = 0.2

# nuisance ranges per unit of diversity
DIVERSITY_HUE_DEGREES = 40.0
DIVERSITY_OFFSET_FRACTION = 0.25
DIVERSITY_BRIGHTNESS = 0.15

GAZE_AMPLITUDE = 0.18
GAZE_CYCLES = 2.0
AGE_AMPLITUDE = 0.22
EXPR_AMPLITUDE = 0.3


@dataclass(frozen=True)
class GenSpec:
    n_samples: int = 1500
    image_size: int = 16
    class_counts: Mapping[TaskKind, int] = field(
        default_factory=lambda: {t: len(c) for t, c in UNIFIED_CATEGORIES.items()})
    cluster_tightness: float = 0.05
    label_balance: Mapping[TaskKind, tuple[float, ...] | None] = field(default_factory=dict)
    shift_magnitude: float = 0.5
    diversity: float = 0.0
    seed: int = 0
    name: str = "toy"

    def __post_init__(self) -> None:
        counts = {as_task(k): int(v) for k, v in self.class_counts.items()}
        balance = {as_task(k): (None if v is None else tuple(float(x) for x in v))
                   for k, v in self.label_balance.items()}
        object.__setattr__(self, "class_counts", counts)
        object.__setattr__(self, "label_balance", balance)
        if self.n_samples < 1 or self.image_size < 4:
            raise ValueError("need n_samples >= 1 and image_size >= 4")
        if any(c < 2 for c in counts.values()):
            raise ValueError("every task needs at least 2 classes")
        if self.cluster_tightness < 0 or self.diversity < 0 or self.shift_magnitude < 0:
            raise ValueError("tightness, diversity and shift must be non-negative")
        for task, weights in balance.items():
            if weights is None:
                continue
            if len(weights) != counts[task]:
                raise ValueError(f"{task}: {len(weights)} balance weights for {counts[task]} classes")
            if min(weights) < 0 or abs(sum(weights) - 1.0) > 1e-9:
                raise ValueError(f"{task}: balance weights must be non-negative and sum to 1")

    @property
    def tasks(self) -> tuple[TaskKind, ...]:
        return tuple(t for t in ALL_TASKS if t in self.class_counts)

    def weights(self, task: TaskKind) -> np.ndarray:
        w = self.label_balance.get(task)
        c = self.class_counts[task]
        return np.full(c, 1.0 / c) if w is None else np.asarray(w)

    def category_names(self, task: TaskKind) -> tuple[str, ...]:
        unified = UNIFIED_CATEGORIES[task]
        c = self.class_counts[task]
        return unified if c == len(unified) else tuple(f"{task.value}_{k}" for k in range(c))

    def schema(self) -> LabelSchema:
        return LabelSchema({t: self.category_names(t) for t in self.tasks})

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["class_counts"] = {t.value: c for t, c in self.class_counts.items()}
        d["label_balance"] = {t.value: (None if w is None else list(w))
                              for t, w in self.label_balance.items()}
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "GenSpec":
        return cls(**dict(data))


PRESETS: dict[str, GenSpec] = {
    # clustered, imbalanced labels: two tasks with a > 50% majority class
    "tight-narrow": GenSpec(
        n_samples=1500, cluster_tightness=0.01, diversity=0.0, name="tight-narrow",
        label_balance={
            TaskKind.GAZE: (0.55, 0.17, 0.1, 0.08, 0.05, 0.05),
            TaskKind.AGE: (0.2, 0.6, 0.2),
            TaskKind.EXPRESSION: (0.4, 0.2, 0.15, 0.15, 0.1),
        }),
    # dispersed and small, with one dominant age bucket
    "wide-sparse": GenSpec(
        n_samples=400, cluster_tightness=0.2, diversity=1.0, name="wide-sparse",
        label_balance={TaskKind.AGE: (0.16, 0.68, 0.16)}),
    # uniform labels, moderate spread and diversity
    "balanced": GenSpec(n_samples=1500, cluster_tightness=0.05, diversity=0.6, name="balanced"),
}


def preset(key: str, /, **overrides: Any) -> GenSpec:
    try:
        base = PRESETS[key]
    except KeyError:
        raise ValueError(f"unknown preset {key!r}; known: {sorted(PRESETS)}") from None
    return replace(base, **overrides)


# ---------------------------------------------------------------------------
# prototypes

def _hue_matrix(degrees: float) -> np.ndarray:
    """Rotation about the gray axis of RGB space."""
    theta = np.deg2rad(degrees)
    c, s = np.cos(theta), np.sin(theta)
    k = np.ones(3) / np.sqrt(3.0)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return c * np.eye(3) + s * kx + (1 - c) * np.outer(k, k)


def _hue_vector(degrees: float) -> np.ndarray:
    """Zero-mean RGB direction (unit max-abs) for a hue angle."""
    v = _hue_matrix(degrees) @ np.array([1.0, -0.5, -0.5])
    return v / np.abs(v).max()


@dataclass(frozen=True)
class Nuisance:
    dx: float = 0.0
    dy: float = 0.0
    hue: float = 0.0
    brightness: float = 0.0


def render_prototype(spec: GenSpec, labels: Mapping[TaskKind, int],
                     nuisance: Nuisance = Nuisance()) -> np.ndarray:
    """Noise-free HxWx3 image in [0, 1] for one label combination."""
    s = spec.image_size
    coords = (np.arange(s) + 0.5) / s
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    xx = xx - nuisance.dx / s
    yy = yy - nuisance.dy / s
    img = np.full((s, s, 3), 0.5)
    if TaskKind.GAZE in labels:
        c = spec.class_counts[TaskKind.GAZE]
        theta = np.pi * labels[TaskKind.GAZE] / c
        wave = np.sin(2 * np.pi * GAZE_CYCLES * (xx * np.cos(theta) + yy * np.sin(theta)))
        img += GAZE_AMPLITUDE * wave[..., None]
    if TaskKind.AGE in labels:
        c = spec.class_counts[TaskKind.AGE]
        disc = np.exp(-(((xx - 0.5) ** 2 + (yy - 0.5) ** 2) / (2 * 0.2 ** 2)))
        img += AGE_AMPLITUDE * disc[..., None] * _hue_vector(360.0 * labels[TaskKind.AGE] / c)
    if TaskKind.EXPRESSION in labels:
        c = spec.class_counts[TaskKind.EXPRESSION]
        k = labels[TaskKind.EXPRESSION]
        cycles = s * (0.2 + 0.22 * k / max(c - 1, 1))
        wave = np.sin(2 * np.pi * cycles * (xx - yy) / np.sqrt(2))
        img += EXPR_AMPLITUDE * wave[..., None]
    if nuisance.hue:
        img = 0.5 + (img - 0.5) @ _hue_matrix(nuisance.hue).T
    return img + nuisance.brightness


def _shift_nuisance(spec: GenSpec, magnitude: float) -> Nuisance:
    off = magnitude * SHIFT_OFFSET_FRACTION * spec.image_size
    return Nuisance(dx=off, dy=off, hue=magnitude * SHIFT_HUE_DEGREES,
                    brightness=magnitude * SHIFT_BRIGHTNESS)


def _sample_nuisance(spec: GenSpec, rng: np.random.Generator) -> Nuisance:
    d = spec.diversity
    if d == 0:
        return Nuisance()
    off = d * DIVERSITY_OFFSET_FRACTION * spec.image_size
    return Nuisance(dx=rng.uniform(-off, off), dy=rng.uniform(-off, off),
                    hue=rng.uniform(-1, 1) * d * DIVERSITY_HUE_DEGREES,
                    brightness=rng.uniform(-1, 1) * d * DIVERSITY_BRIGHTNESS)


def _combine(a: Nuisance, b: Nuisance) -> Nuisance:
    return Nuisance(a.dx + b.dx, a.dy + b.dy, a.hue + b.hue, a.brightness + b.brightness)


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# generation

def draw_labels(spec: GenSpec) -> dict[TaskKind, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 0x1abe1)))
    return {t: rng.choice(spec.class_counts[t], size=spec.n_samples, p=spec.weights(t))
            for t in spec.tasks}


def _render_sample(spec: GenSpec, labels: Mapping[TaskKind, int], index: int,
                   shift: Nuisance, stream: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, stream, index)))
    nuisance = _combine(_sample_nuisance(spec, rng), shift)
    img = render_prototype(spec, labels, nuisance)
    if spec.cluster_tightness > 0:
        img = img + rng.normal(0.0, spec.cluster_tightness, img.shape)
    return _to_uint8(img)


def _build(spec: GenSpec, shift: Nuisance, stream: int, name: str, tag: str) -> Dataset:
    labels = draw_labels(spec)
    schema = spec.schema()
    samples = []
    for i in range(spec.n_samples):
        idx = {t: int(labels[t][i]) for t in spec.tasks}
        img = _render_sample(spec, idx, i, shift, stream)
        samples.append(Sample(
            f"{tag}{i:06d}", img,
            {t: schema.categories[t][k] for t, k in idx.items()}, name))
    return Dataset(tuple(samples), schema, name)


def generate_dataset(spec: GenSpec) -> Dataset:
    return _build(spec, Nuisance(), 1, spec.name, f"{spec.name}-")


def generate_ood_shifted(spec: GenSpec, base: Dataset | None = None) -> Dataset:
    """Same label draw as ``generate_dataset(spec)``, prototypes shifted by
    ``spec.shift_magnitude``, fresh per-sample noise."""
    if base is not None and len(base) != spec.n_samples:
        raise ValueError("base dataset was not generated from this spec")
    name = f"{spec.name}-ood"
    return _build(spec, _shift_nuisance(spec, spec.shift_magnitude), 2, name, f"{name}-")


def prototype_distance(spec: GenSpec, labels: Mapping[TaskKind, int], magnitude: float) -> float:
    """L2 distance between a class prototype and its shifted version."""
    a = render_prototype(spec, labels)
    b = render_prototype(spec, labels, _shift_nuisance(spec, magnitude))
    return float(np.linalg.norm(a - b))
