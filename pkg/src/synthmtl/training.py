"""Composite multi-task loss, plateau LR schedule, curriculum controller, epoch
loop and best-checkpoint selection."""
from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import BackboneSpec, NonFiniteError, TrainabilityMask
from .data_model import ALL_TASKS, LabelSchema, TaskKind, as_task
from .heads import HeadSpec, MultiTaskModel, TaskHead
from .preprocess import PreparedData

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "synthmtl-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LossSpec:
    task_weights: Mapping[TaskKind, float] = field(
        default_factory=lambda: {t: 1.0 for t in ALL_TASKS})
    l2_coefficients: Mapping[TaskKind, float] = field(
        default_factory=lambda: {t: 1e-4 for t in ALL_TASKS})
    active_tasks: tuple[TaskKind, ...] = ALL_TASKS

    def __post_init__(self) -> None:
        weights = {as_task(k): float(v) for k, v in self.task_weights.items()}
        l2 = {as_task(k): float(v) for k, v in self.l2_coefficients.items()}
        active = tuple(as_task(t) for t in self.active_tasks)
        if any(w < 0 for w in weights.values()) or any(c < 0 for c in l2.values()):
            raise ValueError("task weights and L2 coefficients must be non-negative")
        if not active:
            raise ValueError("active_tasks must be non-empty")
        object.__setattr__(self, "task_weights", weights)
        object.__setattr__(self, "l2_coefficients", l2)
        object.__setattr__(self, "active_tasks", active)

    def weight(self, task: TaskKind) -> float:
        return self.task_weights.get(task, 1.0)

    def l2(self, task: TaskKind) -> float:
        return self.l2_coefficients.get(task, 0.0)

    def with_active(self, tasks: Sequence[TaskKind]) -> "LossSpec":
        return LossSpec(self.task_weights, self.l2_coefficients, tuple(tasks))

    def to_dict(self) -> dict[str, Any]:
        return {"task_weights": {t.value: w for t, w in self.task_weights.items()},
                "l2_coefficients": {t.value: c for t, c in self.l2_coefficients.items()},
                "active_tasks": [t.value for t in self.active_tasks]}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "LossSpec":
        kwargs: dict[str, Any] = {}
        if "task_weights" in data:
            kwargs["task_weights"] = data["task_weights"]
        if "l2_coefficients" in data:
            kwargs["l2_coefficients"] = data["l2_coefficients"]
        if "active_tasks" in data:
            kwargs["active_tasks"] = tuple(data["active_tasks"])
        return cls(**kwargs)


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 1e-3
    lr_decay_factor: float = 0.5
    lr_min: float = 1e-6
    lr_patience: int = 3
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    curriculum_enabled: bool = False
    curriculum_threshold: float = 0.5
    curriculum_order: tuple[TaskKind, ...] = ALL_TASKS
    weight_decay: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "curriculum_order", tuple(as_task(t) for t in self.curriculum_order))
        if not 0 < self.lr_min <= self.initial_lr:
            raise ValueError("need 0 < lr_min <= initial_lr")
        if not 0 < self.lr_decay_factor < 1:
            raise ValueError("lr_decay_factor must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.lr_patience < 1:
            raise ValueError("batch_size, epochs and lr_patience must be positive")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["curriculum_order"] = [t.value for t in self.curriculum_order]
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TrainConfig":
        data = dict(data)
        if "curriculum_order" in data:
            data["curriculum_order"] = tuple(data["curriculum_order"])
        return cls(**data)


# ---------------------------------------------------------------------------
# loss

@dataclass
class LossBreakdown:
    total: torch.Tensor
    per_task: dict[TaskKind, torch.Tensor]  # mean CE over labeled samples
    l2: dict[TaskKind, torch.Tensor]  # squared norm of head weight matrices
    counts: dict[TaskKind, int]
    empty_tasks: set[TaskKind]


def head_l2(head: TaskHead) -> torch.Tensor:
    """Sum of squared head weights. Biases are excluded."""
    return sum((w.pow(2).sum() for w in head.weight_matrices()), torch.zeros(()))


def composite_loss(logits: Mapping[TaskKind, torch.Tensor], targets: Mapping[TaskKind, torch.Tensor],
                   spec: LossSpec, heads: Mapping[TaskKind, TaskHead] | MultiTaskModel) -> LossBreakdown:
    """``sum over active tasks of w_i * (CE_i + lambda_i * ||head_i weights||^2)``.

    Targets of -1 mark a missing label and are masked out of that task's CE.
    A task with no labeled sample in the batch contributes CE 0 and is listed
    in ``empty_tasks``.
    """
    if isinstance(heads, MultiTaskModel):
        heads = {t: heads.head(t) for t in heads.tasks}
    total = torch.zeros(())
    per_task: dict[TaskKind, torch.Tensor] = {}
    l2: dict[TaskKind, torch.Tensor] = {}
    counts: dict[TaskKind, int] = {}
    empty: set[TaskKind] = set()
    for task in spec.active_tasks:
        z = logits[task]
        y = torch.as_tensor(targets[task], dtype=torch.long)
        n = int((y >= 0).sum())
        counts[task] = n
        if n == 0:
            ce = z.sum() * 0.0
            empty.add(task)
        else:
            ce = F.cross_entropy(z, y, ignore_index=-1, reduction="sum") / n
        reg = head_l2(heads[task]).to(z.dtype)
        per_task[task] = ce
        l2[task] = reg
        total = total + spec.weight(task) * (ce + spec.l2(task) * reg)
    return LossBreakdown(total, per_task, l2, counts, empty)


# ---------------------------------------------------------------------------
# schedule and curriculum

def epochs_since_best(history: Sequence[float]) -> int:
    """Epochs elapsed since the strict minimum of ``history`` (first occurrence)."""
    if not history:
        return 0
    return len(history) - 1 - int(np.argmin(history))


def lr_step(current_lr: float, eval_history: Sequence[float], cfg: TrainConfig) -> float:
    """Halve (by ``lr_decay_factor``) after every ``lr_patience`` epochs without a new best.

    The trigger repeats every ``lr_patience`` further epochs of plateau; the
    result never drops below ``lr_min``.
    """
    stale = epochs_since_best(eval_history)
    if stale > 0 and stale % cfg.lr_patience == 0:
        return max(current_lr * cfg.lr_decay_factor, cfg.lr_min)
    return current_lr


def curriculum_update(active: Sequence[TaskKind], eval_losses: Mapping[TaskKind, float],
                      order: Sequence[TaskKind], threshold: float) -> tuple[TaskKind, ...]:
    """Add the next task in ``order`` once the newest active task's eval loss < threshold."""
    active = tuple(as_task(t) for t in active)
    order = tuple(as_task(t) for t in order)
    if not active:
        raise ValueError("active task set must be non-empty")
    pending = [t for t in order if t not in active]
    if not pending:
        return active
    newest = [t for t in order if t in active][-1]
    loss = eval_losses.get(newest)
    if loss is not None and loss < threshold:
        return active + (pending[0],)
    return active


# ---------------------------------------------------------------------------
# epoch loop

@dataclass
class TrainData:
    train: PreparedData
    test: PreparedData


@dataclass
class MetricsRecord:
    epoch: int
    lr: float
    active_tasks: list[str]
    train_loss: dict[str, float]
    eval_loss: dict[str, float]
    train_accuracy: dict[str, float | None]
    eval_accuracy: dict[str, float | None]
    l2: dict[str, float]
    train_total: float
    eval_total: float
    # full objective over every task; drives LR decay and checkpoint choice
    selection_loss: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def write_metrics_csv(records: Sequence[MetricsRecord], path: str | Path) -> Path:
    """Flat per-epoch summary: one row per record, per-task columns suffixed by task."""
    path = Path(path)
    tasks = sorted({k for r in records for k in r.eval_loss})
    cols = ["epoch", "lr", "active_tasks", "train_total", "eval_total", "selection_loss"]
    for t in tasks:
        cols += [f"train_loss_{t}", f"eval_loss_{t}", f"train_acc_{t}", f"eval_acc_{t}"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in records:
            row = [r.epoch, r.lr, "+".join(r.active_tasks), r.train_total, r.eval_total,
                   r.selection_loss]
            for t in tasks:
                row += [r.train_loss.get(t), r.eval_loss.get(t), r.train_accuracy.get(t),
                        r.eval_accuracy.get(t)]
            w.writerow(["" if v is None else v for v in row])
    return path


def _weighted_total(ce: Mapping[str, float], l2: Mapping[str, float], spec: LossSpec,
                    tasks: Sequence[TaskKind]) -> float:
    return float(sum(spec.weight(t) * (ce[t.value] + spec.l2(t) * l2[t.value]) for t in tasks))


@torch.no_grad()
def _eval_pass(model: MultiTaskModel, data: PreparedData, batch_size: int
               ) -> tuple[dict[TaskKind, float], dict[TaskKind, float | None]]:
    model.eval()
    ce_sum = {t: 0.0 for t in model.tasks}
    correct = {t: 0 for t in model.tasks}
    count = {t: 0 for t in model.tasks}
    for start in range(0, len(data), batch_size):
        x = torch.from_numpy(data.x[start:start + batch_size])
        out = model(x)
        for t in model.tasks:
            y = torch.from_numpy(data.targets[t][start:start + batch_size])
            keep = y >= 0
            if keep.any():
                ce_sum[t] += float(F.cross_entropy(out[t][keep], y[keep], reduction="sum"))
                correct[t] += int((out[t][keep].argmax(1) == y[keep]).sum())
                count[t] += int(keep.sum())
    ce = {t: ce_sum[t] / count[t] if count[t] else 0.0 for t in model.tasks}
    acc = {t: correct[t] / count[t] if count[t] else None for t in model.tasks}
    return ce, acc


def make_optimizer(model: MultiTaskModel, cfg: TrainConfig) -> torch.optim.Optimizer:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.Adam(params, lr=cfg.initial_lr, weight_decay=cfg.weight_decay)


def train_epoch(model: MultiTaskModel, data: TrainData, cfg: TrainConfig, spec: LossSpec,
                optimizer: torch.optim.Optimizer | None = None, epoch: int = 1) -> MetricsRecord:
    """One optimizer pass over ``data.train`` followed by one eval pass over ``data.test``."""
    if optimizer is None:
        optimizer = make_optimizer(model, cfg)
    lr = float(optimizer.param_groups[0]["lr"]) if optimizer.param_groups else cfg.initial_lr
    gen = torch.Generator().manual_seed(cfg.seed * 100_003 + epoch)
    order = torch.randperm(len(data.train), generator=gen).numpy()
    tasks = model.tasks
    ce_sum = {t: 0.0 for t in tasks}
    count = {t: 0 for t in tasks}
    correct = {t: 0 for t in tasks}
    model.train(True)
    for b, start in enumerate(range(0, len(order), cfg.batch_size)):
        idx = order[start:start + cfg.batch_size]
        x = torch.from_numpy(data.train.x[idx])
        targets = {t: torch.from_numpy(data.train.targets[t][idx]) for t in tasks}
        out = model(x)
        loss = composite_loss(out, targets, spec, model)
        if not torch.isfinite(loss.total):
            detail = {t.value: float(v) for t, v in loss.per_task.items()}
            raise NonFiniteError(f"non-finite loss at epoch {epoch}, batch {b}: {detail}")
        optimizer.zero_grad(set_to_none=True)
        loss.total.backward()
        optimizer.step()
        with torch.no_grad():
            for t in tasks:
                y = targets[t]
                keep = y >= 0
                n = int(keep.sum())
                if n:
                    ce_sum[t] += float(F.cross_entropy(out[t][keep], y[keep], reduction="sum"))
                    correct[t] += int((out[t][keep].argmax(1) == y[keep]).sum())
                    count[t] += n
    train_ce = {t.value: ce_sum[t] / count[t] if count[t] else 0.0 for t in tasks}
    train_acc = {t.value: correct[t] / count[t] if count[t] else None for t in tasks}
    eval_ce, eval_acc = _eval_pass(model, data.test, cfg.batch_size)
    with torch.no_grad():
        l2 = {t.value: float(head_l2(model.head(t))) for t in tasks}
    eval_ce_s = {t.value: v for t, v in eval_ce.items()}
    active = [t for t in spec.active_tasks if t in tasks]
    return MetricsRecord(
        epoch=epoch, lr=lr, active_tasks=[t.value for t in active],
        train_loss=train_ce, eval_loss=eval_ce_s,
        train_accuracy=train_acc, eval_accuracy={t.value: a for t, a in eval_acc.items()},
        l2=l2,
        train_total=_weighted_total(train_ce, l2, spec, active),
        eval_total=_weighted_total(eval_ce_s, l2, spec, active),
        selection_loss=_weighted_total(eval_ce_s, l2, spec, tasks),
    )


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    epoch: int
    eval_loss: float
    state_dict: dict[str, torch.Tensor]
    backbone_spec: BackboneSpec
    head_specs: list[HeadSpec]
    mask: TrainabilityMask
    schema: LabelSchema
    metadata: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def capture(cls, model: MultiTaskModel, epoch: int, eval_loss: float,
                **metadata: Any) -> "Checkpoint":
        state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        return cls(epoch, float(eval_loss), state, model.backbone.spec,
                   list(model.head_specs), model.mask, model.schema, dict(metadata))

    def to_model(self) -> MultiTaskModel:
        from .backbone import build_backbone

        model = MultiTaskModel(build_backbone(self.backbone_spec), self.head_specs,
                               self.schema, self.mask)
        model.load_state_dict(self.state_dict)
        model.eval()
        return model


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    """Versioned ``torch.save`` payload; specs are stored as plain dicts."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "epoch": ckpt.epoch,
        "eval_loss": ckpt.eval_loss,
        "state_dict": ckpt.state_dict,
        "backbone_spec": ckpt.backbone_spec.to_dict(),
        "head_specs": [h.to_dict() for h in ckpt.head_specs],
        "mask": ckpt.mask.to_dict(),
        "schema": ckpt.schema.to_dict(),
        "metadata": ckpt.metadata,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if payload["version"] > CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {payload['version']} is newer than supported")
    return Checkpoint(
        epoch=payload["epoch"], eval_loss=payload["eval_loss"], state_dict=payload["state_dict"],
        backbone_spec=BackboneSpec.from_dict(payload["backbone_spec"]),
        head_specs=[HeadSpec.from_dict(h) for h in payload["head_specs"]],
        mask=TrainabilityMask.from_dict(payload["mask"]),
        schema=LabelSchema.from_dict(payload["schema"]),
        metadata=payload.get("metadata", {}),
    )


# ---------------------------------------------------------------------------
# fit

@dataclass
class FitResult:
    best: Checkpoint
    records: list[MetricsRecord]
    activation_epochs: dict[str, int]


EpochRunner = Callable[..., MetricsRecord]


def fit(model: MultiTaskModel, data: TrainData, cfg: TrainConfig, spec: LossSpec,
        checkpoint_path: str | Path | None = None, metrics_path: str | Path | None = None,
        epoch_runner: EpochRunner = train_epoch) -> FitResult:
    """Run ``cfg.epochs`` epochs; keep the state with the lowest eval loss.

    Between epochs the LR follows :func:`lr_step` and, if enabled, the active
    task set follows :func:`curriculum_update`. No early stopping.
    """
    torch.manual_seed(cfg.seed)
    optimizer = make_optimizer(model, cfg)
    tasks = model.tasks
    if cfg.curriculum_enabled:
        order = [t for t in cfg.curriculum_order if t in tasks]
        order += [t for t in tasks if t not in order]
        active: tuple[TaskKind, ...] = (order[0],)
    else:
        order = list(tasks)
        active = tuple(t for t in spec.active_tasks if t in tasks)
    activation = {t.value: 1 for t in active}
    lr = cfg.initial_lr
    history: list[float] = []
    records: list[MetricsRecord] = []
    best: Checkpoint | None = None
    sink = None
    if metrics_path is not None:
        Path(metrics_path).parent.mkdir(parents=True, exist_ok=True)
        sink = open(metrics_path, "w")
    try:
        for epoch in range(1, cfg.epochs + 1):
            for group in optimizer.param_groups:
                group["lr"] = lr
            rec = epoch_runner(model, data, cfg, spec.with_active(active), optimizer, epoch=epoch)
            records.append(rec)
            if sink is not None:
                sink.write(rec.to_json() + "\n")
                sink.flush()
            history.append(rec.selection_loss)
            if best is None or rec.selection_loss < best.eval_loss:
                best = Checkpoint.capture(model, epoch, rec.selection_loss)
                if checkpoint_path is not None:
                    save_checkpoint(best, checkpoint_path)
            lr = lr_step(lr, history, cfg)
            if cfg.curriculum_enabled:
                eval_losses = {as_task(k): v for k, v in rec.eval_loss.items()}
                new_active = curriculum_update(active, eval_losses, order, cfg.curriculum_threshold)
                for t in new_active:
                    activation.setdefault(t.value, epoch + 1)
                active = new_active
            log.info("epoch %d lr=%.2e train=%.4f eval=%.4f active=%s", epoch, rec.lr,
                     rec.train_total, rec.eval_total, rec.active_tasks)
    finally:
        if sink is not None:
            sink.close()
    if best is None:
        best = Checkpoint.capture(model, 0, float("inf"))
    return FitResult(best, records, activation)


def load_state(model: MultiTaskModel, ckpt: Checkpoint) -> MultiTaskModel:
    model.load_state_dict(copy.deepcopy(ckpt.state_dict))
    return model
