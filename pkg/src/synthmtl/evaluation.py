"""Held-out metrics and the out-of-distribution inference protocol."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data_model import Dataset, RemapTable, TaskKind, as_task
from .heads import MultiTaskModel, predict
from .preprocess import PipelineConfig, encode_targets, preprocess_dataset


class SchemaMismatchError(ValueError):
    pass


def per_task_accuracy(preds: Sequence[int], targets: Sequence[int]) -> float | None:
    """Fraction of matches; ``None`` for empty input (undefined, not zero)."""
    preds = np.asarray(preds)
    targets = np.asarray(targets)
    if preds.shape != targets.shape:
        raise ValueError("preds and targets must have equal length")
    if targets.size == 0:
        return None
    return float((preds == targets).mean())


def confusion_matrix(preds: Sequence[int], targets: Sequence[int], num_classes: int) -> np.ndarray:
    """Rows are ground truth, columns are predictions."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(targets, dtype=np.int64), np.asarray(preds, dtype=np.int64)), 1)
    return cm


@dataclass
class TaskMetrics:
    accuracy: float | None
    loss: float | None
    confusion: np.ndarray
    n: int
    categories: tuple[str, ...]

    def to_dict(self) -> dict[str, Any]:
        return {"accuracy": self.accuracy, "loss": self.loss, "n": self.n,
                "categories": list(self.categories), "confusion": self.confusion.tolist()}


@dataclass
class EvalReport:
    dataset: str
    metrics: dict[TaskKind, TaskMetrics]
    # prediction histograms for tasks without ground truth
    predictions_only: dict[TaskKind, dict[str, int]] = field(default_factory=dict)
    excluded: dict[TaskKind, int] = field(default_factory=dict)
    n_samples: int = 0

    @property
    def mean_accuracy(self) -> float | None:
        accs = [m.accuracy for m in self.metrics.values() if m.accuracy is not None]
        return float(np.mean(accs)) if accs else None

    def accuracy(self, task: TaskKind) -> float | None:
        m = self.metrics.get(as_task(task))
        return None if m is None else m.accuracy

    def to_dict(self) -> dict[str, Any]:
        return {
            "dataset": self.dataset,
            "n_samples": self.n_samples,
            "mean_accuracy": self.mean_accuracy,
            "tasks": {t.value: m.to_dict() for t, m in self.metrics.items()},
            "predictions_only": {t.value: h for t, h in self.predictions_only.items()},
            "excluded": {t.value: n for t, n in self.excluded.items()},
        }

    def write(self, directory: str | Path, extra: Mapping[str, Any] | None = None) -> Path:
        """``report.json`` plus one ``confusion_<task>.csv`` per scored task."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        payload = self.to_dict()
        if extra:
            payload.update(extra)
        out = directory / "report.json"
        out.write_text(json.dumps(payload, indent=2))
        for task, m in self.metrics.items():
            with (directory / f"confusion_{task.value}.csv").open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["truth\\pred", *m.categories])
                for name, row in zip(m.categories, m.confusion):
                    w.writerow([name, *row.tolist()])
        return out


@torch.no_grad()
def predict_logits(model: MultiTaskModel, x: np.ndarray, batch_size: int = 256
                   ) -> dict[TaskKind, torch.Tensor]:
    model.eval()
    chunks: dict[TaskKind, list[torch.Tensor]] = {t: [] for t in model.tasks}
    for start in range(0, len(x), batch_size):
        out = model(torch.from_numpy(x[start:start + batch_size]))
        for t in model.tasks:
            chunks[t].append(out[t])
    return {t: torch.cat(v) if v else torch.zeros((0, model.schema.num_classes(t)))
            for t, v in chunks.items()}


def _check_schema(model: MultiTaskModel, dataset: Dataset) -> None:
    for task in model.tasks:
        if dataset.schema.constrains(task) and \
                dataset.schema.categories[task] != model.schema.categories[task]:
            raise SchemaMismatchError(
                f"task {task}: dataset categories {dataset.schema.categories[task]} != "
                f"model categories {model.schema.categories[task]}")


def evaluate(model: MultiTaskModel, dataset: Dataset, pipeline: PipelineConfig,
             batch_size: int = 256) -> EvalReport:
    _check_schema(model, dataset)
    prepared = preprocess_dataset(dataset, pipeline)
    logits = predict_logits(model, prepared.x, batch_size)
    targets = encode_targets(dataset, model.tasks)
    metrics: dict[TaskKind, TaskMetrics] = {}
    pred_only: dict[TaskKind, dict[str, int]] = {}
    for task in model.tasks:
        cats = model.schema.categories[task]
        preds = predict(logits[task])
        y = targets[task]
        keep = y >= 0
        if keep.any():
            loss = float(F.cross_entropy(logits[task][torch.from_numpy(keep)],
                                         torch.from_numpy(y[keep])))
            metrics[task] = TaskMetrics(
                per_task_accuracy(preds[keep], y[keep]), loss,
                confusion_matrix(preds[keep], y[keep], len(cats)), int(keep.sum()), cats)
        else:
            counts = np.bincount(preds, minlength=len(cats))
            pred_only[task] = {c: int(n) for c, n in zip(cats, counts)}
    return EvalReport(dataset.name, metrics, pred_only, {}, len(dataset))


def ood_inference(model: MultiTaskModel, external: Dataset,
                  label_remap: Mapping[TaskKind, RemapTable], pipeline: PipelineConfig,
                  batch_size: int = 256) -> EvalReport:
    """Score a model on external data after mapping its labels into the model schema.

    Labels without a mapping (or outside the model schema when no table is
    given) are dropped and counted in ``excluded``.
    """
    tables = {as_task(k): v for k, v in label_remap.items()}
    excluded = {t: 0 for t in model.tasks}
    samples = []
    for s in external.samples:
        labels: dict[TaskKind, str] = {}
        for task, raw in s.labels.items():
            if task not in excluded:
                continue
            table = tables.get(task)
            target = table.lookup(raw) if table is not None else raw
            if target is None or target not in model.schema.categories[task]:
                excluded[task] += 1
            else:
                labels[task] = target
        samples.append(s.with_labels(labels))
    remapped = Dataset(tuple(samples), model.schema, external.name)
    report = evaluate(model, remapped, pipeline, batch_size)
    report.excluded = {t: n for t, n in excluded.items() if n}
    return report
