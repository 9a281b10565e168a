"""Shared-trunk multi-task model: one backbone, one structurally identical head per task."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .backbone import (
    AdaptationPolicy,
    Backbone,
    BackboneSpec,
    TrainabilityMask,
    apply_adaptation_policy,
    apply_mask,
    build_backbone,
    check_finite,
)
from .data_model import LabelSchema, TaskKind, as_task


@dataclass(frozen=True)
class HeadSpec:
    task: TaskKind
    num_classes: int
    hidden_sizes: tuple[int, ...] = (256, 128)
    dropout_rate: float = 0.3

    def __post_init__(self) -> None:
        object.__setattr__(self, "task", as_task(self.task))
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")

    def to_dict(self) -> dict[str, Any]:
        return {"task": self.task.value, "num_classes": self.num_classes,
                "hidden_sizes": list(self.hidden_sizes), "dropout_rate": self.dropout_rate}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "HeadSpec":
        return cls(as_task(data["task"]), int(data["num_classes"]),
                   tuple(data.get("hidden_sizes", (256, 128))),
                   float(data.get("dropout_rate", 0.3)))


class TaskHead(nn.Module):
    """``[Linear -> ReLU -> Dropout] * len(hidden_sizes) -> Linear(num_classes)``."""

    def __init__(self, spec: HeadSpec, feature_dim: int) -> None:
        super().__init__()
        self.spec = spec
        layers: list[nn.Module] = []
        width = feature_dim
        for h in spec.hidden_sizes:
            layers += [nn.Linear(width, h), nn.ReLU(), nn.Dropout(spec.dropout_rate)]
            width = h
        layers.append(nn.Linear(width, spec.num_classes))
        self.net = nn.Sequential(*layers)
        self.feature_dim = feature_dim

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.net(features)

    def weight_matrices(self) -> list[torch.Tensor]:
        return [m.weight for m in self.net if isinstance(m, nn.Linear)]


def head_forward(features: torch.Tensor, head: TaskHead, training: bool = False) -> torch.Tensor:
    if features.shape[-1] != head.feature_dim:
        raise ValueError(f"head expects feature_dim {head.feature_dim}, got {features.shape[-1]}")
    head.train(training)
    return check_finite(head(features), f"{head.spec.task} logits")


class MultiTaskModel(nn.Module):
    def __init__(self, backbone: Backbone, head_specs: Sequence[HeadSpec], schema: LabelSchema,
                 mask: TrainabilityMask | None = None) -> None:
        super().__init__()
        if len({tuple(h.hidden_sizes) for h in head_specs}) > 1 or \
                len({h.dropout_rate for h in head_specs}) > 1:
            raise ValueError("task heads must be structurally identical")
        for h in head_specs:
            if schema.num_classes(h.task) != h.num_classes:
                raise ValueError(f"{h.task}: head has {h.num_classes} classes, schema has "
                                 f"{schema.num_classes(h.task)}")
        self.backbone = backbone
        self.heads = nn.ModuleDict(
            {h.task.value: TaskHead(h, backbone.spec.feature_dim) for h in head_specs})
        self.schema = schema
        self.mask = mask or apply_adaptation_policy(backbone.spec, AdaptationPolicy.FFT)
        apply_mask(backbone, self.mask)

    @property
    def tasks(self) -> list[TaskKind]:
        return [TaskKind(k) for k in self.heads.keys()]

    @property
    def head_specs(self) -> list[HeadSpec]:
        return [h.spec for h in self.heads.values()]

    def head(self, task: TaskKind) -> TaskHead:
        return self.heads[as_task(task).value]

    def set_mask(self, mask: TrainabilityMask) -> None:
        self.mask = mask
        apply_mask(self.backbone, mask)

    def train(self, mode: bool = True) -> "MultiTaskModel":
        super().train(mode)
        # frozen blocks stay in eval mode so normalization buffers never move
        for name, block in self.backbone.blocks.items():
            if not self.mask.blocks[name]:
                block.eval()
        return self

    def forward(self, x: torch.Tensor) -> dict[TaskKind, torch.Tensor]:
        features = check_finite(self.backbone(x), "backbone features")
        return {TaskKind(name): check_finite(head(features), f"{name} logits")
                for name, head in self.heads.items()}


def build_model(backbone_spec: BackboneSpec, schema: LabelSchema,
                policy: AdaptationPolicy | str = AdaptationPolicy.FFT,
                hidden_sizes: Sequence[int] = (256, 128), dropout_rate: float = 0.3,
                tasks: Sequence[TaskKind] | None = None) -> MultiTaskModel:
    tasks = list(schema.tasks if tasks is None else tasks)
    heads = [HeadSpec(t, schema.num_classes(t), tuple(hidden_sizes), dropout_rate) for t in tasks]
    backbone = build_backbone(backbone_spec)
    return MultiTaskModel(backbone, heads, schema, apply_adaptation_policy(backbone_spec, policy))


def model_forward(batch: torch.Tensor, m: MultiTaskModel, training: bool = False) -> dict[TaskKind, torch.Tensor]:
    m.train(training)
    return m(batch)


def predict(logits: torch.Tensor | np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest index."""
    if isinstance(logits, torch.Tensor):
        logits = logits.detach().cpu().numpy()
    logits = np.asarray(logits)
    if logits.ndim != 2 or logits.shape[1] < 1:
        raise ValueError("logits must be a batch x C matrix with C >= 1")
    return np.argmax(logits, axis=1)


def softmax(logits: torch.Tensor) -> torch.Tensor:
    return torch.softmax(logits, dim=-1)
