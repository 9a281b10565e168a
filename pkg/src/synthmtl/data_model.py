"""Samples, label schemas and datasets, plus the pure operations that clean,
re-annotate, merge, shuffle and split them.

Every operation returns a new :class:`Dataset`; inputs are never mutated.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence

import numpy as np


class TaskKind(str, Enum):
    GAZE = "gaze"
    AGE = "age"
    EXPRESSION = "expression"

    def __str__(self) -> str:
        return self.value


ALL_TASKS: tuple[TaskKind, ...] = (TaskKind.GAZE, TaskKind.AGE, TaskKind.EXPRESSION)


class ConfigurationError(ValueError):
    """Raised when a remap table or schema cannot be applied to a dataset."""


def as_task(value: TaskKind | str) -> TaskKind:
    return value if isinstance(value, TaskKind) else TaskKind(str(value).strip().lower())


@dataclass(frozen=True)
class LabelSchema:
    """Ordered category names per task.

    Tasks missing from ``categories`` are unconstrained; this is how raw numeric
    ages are carried before :func:`bucketize_age` turns them into buckets.
    """

    categories: Mapping[TaskKind, tuple[str, ...]]

    def __post_init__(self) -> None:
        normalized: dict[TaskKind, tuple[str, ...]] = {}
        for task, names in self.categories.items():
            names = tuple(str(n) for n in names)
            if not names:
                raise ValueError(f"empty category list for task {task}")
            if len(set(names)) != len(names):
                raise ValueError(f"duplicate category names for task {task}: {names}")
            normalized[as_task(task)] = names
        object.__setattr__(self, "categories", normalized)

    @property
    def tasks(self) -> tuple[TaskKind, ...]:
        return tuple(t for t in ALL_TASKS if t in self.categories)

    def num_classes(self, task: TaskKind) -> int:
        return len(self.categories[task])

    def index(self, task: TaskKind, name: str) -> int:
        return self.categories[task].index(name)

    def constrains(self, task: TaskKind) -> bool:
        return task in self.categories

    def with_task(self, task: TaskKind, names: Sequence[str]) -> "LabelSchema":
        cats = dict(self.categories)
        cats[task] = tuple(names)
        return LabelSchema(cats)

    def to_dict(self) -> dict[str, list[str]]:
        return {t.value: list(self.categories[t]) for t in self.tasks}

    @classmethod
    def from_dict(cls, data: Mapping[str, Sequence[str]]) -> "LabelSchema":
        return cls({as_task(k): tuple(v) for k, v in data.items()})


@dataclass(frozen=True)
class Sample:
    image_id: str
    image: np.ndarray
    labels: Mapping[TaskKind, str] = field(default_factory=dict)
    source: str = ""
    meta: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        img = np.asarray(self.image)
        if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] <= 0 or img.shape[1] <= 0:
            raise ValueError(f"sample {self.image_id!r}: expected HxWx3 image, got {img.shape}")
        object.__setattr__(self, "image", img)
        object.__setattr__(self, "labels", {as_task(k): str(v) for k, v in self.labels.items()})

    def with_labels(self, labels: Mapping[TaskKind, str], **meta: Any) -> "Sample":
        new_meta = dict(self.meta)
        new_meta.update(meta)
        return replace(self, labels=dict(labels), meta=new_meta)


@dataclass(frozen=True)
class LoadReport:
    rows_total: int = 0
    rows_loaded: int = 0
    missing_images: tuple[str, ...] = ()
    # (row number, task, raw value)
    unparseable: tuple[tuple[int, str, str], ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "rows_total": self.rows_total,
            "rows_loaded": self.rows_loaded,
            "missing_images": list(self.missing_images),
            "unparseable": [list(u) for u in self.unparseable],
        }


@dataclass(frozen=True)
class Dataset:
    samples: tuple[Sample, ...]
    schema: LabelSchema
    name: str = ""
    load_report: LoadReport | None = None

    def __post_init__(self) -> None:
        samples = tuple(self.samples)
        object.__setattr__(self, "samples", samples)
        for s in samples:
            for task, label in s.labels.items():
                if self.schema.constrains(task) and label not in self.schema.categories[task]:
                    raise ValueError(
                        f"sample {s.image_id!r}: label {label!r} not in schema for {task}"
                    )

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    @property
    def size(self) -> int:
        return len(self.samples)

    @property
    def image_ids(self) -> list[str]:
        return [s.image_id for s in self.samples]

    def derive(self, samples: Iterable[Sample], schema: LabelSchema | None = None,
               name: str | None = None) -> "Dataset":
        return Dataset(tuple(samples), schema or self.schema,
                       self.name if name is None else name, self.load_report)

    def label_counts(self, task: TaskKind) -> dict[str, int]:
        counts: dict[str, int] = {}
        for s in self.samples:
            if task in s.labels:
                counts[s.labels[task]] = counts.get(s.labels[task], 0) + 1
        return counts


@dataclass(frozen=True)
class RemapTable:
    """Source label → target category for one task.

    ``mapping`` covers categorical source labels. ``ranges`` holds
    ``(low, high, target)`` triples matched in order against numeric labels,
    both ends inclusive; use ``math.inf`` for an open upper end.
    """

    task: TaskKind
    mapping: Mapping[str, str]
    target_categories: tuple[str, ...]
    ranges: tuple[tuple[float, float, str], ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "task", as_task(self.task))
        object.__setattr__(self, "mapping", {str(k): str(v) for k, v in self.mapping.items()})
        object.__setattr__(self, "target_categories", tuple(self.target_categories))
        object.__setattr__(self, "ranges",
                           tuple((float(lo), float(hi), str(t)) for lo, hi, t in self.ranges))
        targets = set(self.target_categories)
        stray = sorted({t for t in self.mapping.values() if t not in targets}
                       | {t for _, _, t in self.ranges if t not in targets})
        if stray:
            raise ConfigurationError(f"{self.task}: targets {stray} not in target_categories")

    def lookup(self, label: str) -> str | None:
        if label in self.mapping:
            return self.mapping[label]
        if self.ranges:
            try:
                value = float(label)
            except ValueError:
                return None
            for lo, hi, target in self.ranges:
                if lo <= value <= hi:
                    return target
        return None

    @classmethod
    def identity(cls, task: TaskKind, categories: Sequence[str]) -> "RemapTable":
        return cls(task, {c: c for c in categories}, tuple(categories))

    @classmethod
    def from_dict(cls, task: TaskKind | str, data: Mapping[str, Any],
                  target_categories: Sequence[str]) -> "RemapTable":
        ranges = []
        for entry in data.get("ranges", ()):
            lo, hi, target = entry
            ranges.append((float(lo), math.inf if hi in (None, "inf") else float(hi), target))
        return cls(as_task(task), dict(data.get("mapping", {})), tuple(target_categories),
                   tuple(ranges))


# ---------------------------------------------------------------------------
# manifest ingestion

def _read_rows(path: Path) -> list[dict[str, Any]]:
    if path.suffix.lower() == ".csv":
        with path.open(newline="") as fh:
            return list(csv.DictReader(fh))
    rows = []
    with path.open() as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def read_image(path: Path) -> np.ndarray:
    """Decode an RGB image file (or a ``.npy`` HxWx3 array)."""
    if path.suffix.lower() == ".npy":
        return np.load(path)
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def _is_number(text: str) -> bool:
    try:
        return math.isfinite(float(text))
    except ValueError:
        return False


def load_manifest(path: str | Path, schema: LabelSchema, name: str | None = None) -> Dataset:
    """Read a CSV or JSON-lines manifest into a :class:`Dataset`.

    Rows whose image file is missing are skipped; label values outside the
    schema are dropped from the sample. Both are tallied in ``load_report``.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    rows = _read_rows(path)
    name = name or path.stem
    samples: list[Sample] = []
    missing: list[str] = []
    bad: list[tuple[int, str, str]] = []
    for row_no, row in enumerate(rows, start=1):
        image_path = Path(str(row["image_path"]))
        if not image_path.is_absolute():
            image_path = path.parent / image_path
        if not image_path.is_file():
            missing.append(str(row["image_path"]))
            continue
        labels: dict[TaskKind, str] = {}
        for task in ALL_TASKS:
            raw = row.get(task.value)
            if raw is None:
                continue
            raw = str(raw).strip()
            if not raw:
                continue
            if schema.constrains(task):
                ok = raw in schema.categories[task]
            else:
                ok = task is not TaskKind.AGE or _is_number(raw)
            if ok:
                labels[task] = raw
            else:
                bad.append((row_no, task.value, raw))
        image_id = str(row.get("image_id") or Path(str(row["image_path"])).stem)
        source = str(row.get("source") or name)
        samples.append(Sample(image_id, read_image(image_path), labels, source))
    report = LoadReport(len(rows), len(samples), tuple(missing), tuple(bad))
    return Dataset(tuple(samples), schema, name, report)


def write_manifest(d: Dataset, directory: str | Path, fmt: str = "csv") -> Path:
    """Write images as PNG files plus a manifest that :func:`load_manifest` reads back."""
    from PIL import Image

    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for s in d.samples:
        rel = Path("images") / f"{s.image_id}.png"
        img = s.image
        if img.dtype != np.uint8:
            img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        Image.fromarray(img, "RGB").save(directory / rel)
        row = {"image_id": s.image_id, "image_path": rel.as_posix(), "source": s.source}
        for task in ALL_TASKS:
            row[task.value] = s.labels.get(task, "")
        rows.append(row)
    if fmt == "csv":
        out = directory / "manifest.csv"
        with out.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, ["image_id", "image_path", "source",
                                         *[t.value for t in ALL_TASKS]])
            writer.writeheader()
            writer.writerows(rows)
    else:
        out = directory / "manifest.jsonl"
        with out.open("w") as fh:
            for row in rows:
                fh.write(json.dumps(row) + "\n")
    (directory / "schema.json").write_text(json.dumps(d.schema.to_dict(), indent=2))
    return out


# ---------------------------------------------------------------------------
# cleaning and re-annotation

def clean_dataset(d: Dataset, required_tasks: Iterable[TaskKind]) -> Dataset:
    required = {as_task(t) for t in required_tasks}
    return d.derive(s for s in d.samples if required.issubset(s.labels))


def bucketize_age(d: Dataset, edges: Sequence[float], targets: Sequence[str]) -> Dataset:
    """Replace numeric ages by bucket names.

    ``targets[i]`` covers ages in ``(edges[i-1], edges[i]]``; the last target is
    open-ended. Negative ages are dropped and the sample gets ``age_invalid``.
    """
    edges = [float(e) for e in edges]
    if len(targets) != len(edges) + 1:
        raise ValueError("need exactly len(edges) + 1 target buckets")
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("edges must be strictly increasing")
    out = []
    for s in d.samples:
        if TaskKind.AGE not in s.labels:
            out.append(s)
            continue
        raw = s.labels[TaskKind.AGE]
        try:
            age = float(raw)
        except ValueError:
            raise ValueError(f"sample {s.image_id!r}: age {raw!r} is not numeric") from None
        labels = dict(s.labels)
        if age < 0 or not math.isfinite(age):
            del labels[TaskKind.AGE]
            out.append(s.with_labels(labels, age_invalid=True))
            continue
        labels[TaskKind.AGE] = targets[int(np.searchsorted(edges, age, side="left"))]
        out.append(s.with_labels(labels))
    return d.derive(out, d.schema.with_task(TaskKind.AGE, targets))


def remap_labels(d: Dataset, t: RemapTable) -> Dataset:
    unmapped = sorted({s.labels[t.task] for s in d.samples
                       if t.task in s.labels and t.lookup(s.labels[t.task]) is None})
    if unmapped:
        raise ConfigurationError(
            f"{d.name or 'dataset'}: no {t.task} mapping for categories {unmapped}")
    out = []
    for s in d.samples:
        if t.task in s.labels:
            labels = dict(s.labels)
            labels[t.task] = t.lookup(labels[t.task])
            s = s.with_labels(labels)
        out.append(s)
    return d.derive(out, d.schema.with_task(t.task, t.target_categories))


def merge_datasets(ds: Sequence[Dataset],
                   tables: Mapping[str, Mapping[TaskKind, RemapTable]],
                   unified: LabelSchema, name: str = "combined") -> Dataset:
    """Re-annotate each dataset into ``unified`` and concatenate.

    ``tables`` is keyed by dataset name and must hold one table per unified task.
    Image ids are prefixed with the source tag only when they would collide.
    """
    remapped: list[Dataset] = []
    for d in ds:
        per_task = tables.get(d.name)
        if per_task is None:
            raise ConfigurationError(f"no remap tables for dataset {d.name!r}")
        for task in unified.tasks:
            table = per_task.get(task)
            if table is None:
                raise ConfigurationError(f"dataset {d.name!r} has no {task} table")
            if tuple(table.target_categories) != unified.categories[task]:
                raise ConfigurationError(
                    f"dataset {d.name!r}: {task} targets differ from unified schema")
            d = remap_labels(d, table)
        # labels for tasks outside the unified schema are discarded
        keep = set(unified.tasks)
        d = d.derive(s.with_labels({k: v for k, v in s.labels.items() if k in keep})
                     for s in d.samples)
        remapped.append(d)
    ids = [s.image_id for d in remapped for s in d.samples]
    collide = len(set(ids)) != len(ids)
    samples = []
    for d in remapped:
        for s in d.samples:
            if collide:
                s = replace(s, image_id=f"{s.source}:{s.image_id}")
            samples.append(s)
    return Dataset(tuple(samples), unified, name)


# ---------------------------------------------------------------------------
# ordering

def shuffle_dataset(d: Dataset, seed: int) -> Dataset:
    order = np.random.default_rng(seed).permutation(len(d))
    return d.derive(d.samples[i] for i in order)


def split_dataset(d: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Shuffle with ``seed`` and cut at ``floor(train_fraction * N)``."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    if len(d) < 2:
        raise ValueError("cannot split a dataset with fewer than 2 samples")
    # Fraction(str(...)) keeps 0.7 * 100 from landing on 69.999...
    n_train = math.floor(Fraction(str(train_fraction)) * len(d))
    shuffled = shuffle_dataset(d, seed)
    return (shuffled.derive(shuffled.samples[:n_train], name=f"{d.name}-train"),
            shuffled.derive(shuffled.samples[n_train:], name=f"{d.name}-test"))


# ---------------------------------------------------------------------------
# declarative remap config

def load_remap_config(path: str | Path) -> tuple[LabelSchema, dict[str, dict[TaskKind, RemapTable]]]:
    """Read ``{"unified": {...}, "tables": {dataset: {task: {...}}}}`` from JSON or YAML."""
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() in (".yaml", ".yml"):
        import yaml

        data = yaml.safe_load(text)
    else:
        data = json.loads(text)
    unified = LabelSchema.from_dict(data["unified"])
    tables: dict[str, dict[TaskKind, RemapTable]] = {}
    for ds_name, per_task in data.get("tables", {}).items():
        tables[ds_name] = {}
        for task_name, entry in per_task.items():
            task = as_task(task_name)
            targets = entry.get("targets", unified.categories.get(task))
            if targets is None:
                raise ConfigurationError(f"{ds_name}/{task}: no target categories")
            tables[ds_name][task] = RemapTable.from_dict(task, entry, targets)
    return unified, tables
