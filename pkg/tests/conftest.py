from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from synthmtl.data_model import Dataset, LabelSchema, Sample, TaskKind

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

GAZE, AGE, EXPR = TaskKind.GAZE, TaskKind.AGE, TaskKind.EXPRESSION


def tiny_image(value: int = 0, size: int = 4) -> np.ndarray:
    return np.full((size, size, 3), value, dtype=np.uint8)


def make_dataset(label_rows, schema: LabelSchema | None = None, name: str = "d",
                 source: str | None = None, size: int = 4) -> Dataset:
    """``label_rows`` is a list of {task: label} dicts; images encode the row index."""
    samples = [Sample(f"{name}{i}", tiny_image(i % 256, size), labels, source or name)
               for i, labels in enumerate(label_rows)]
    if schema is None:
        cats: dict[TaskKind, list[str]] = {}
        for row in label_rows:
            for t, v in row.items():
                cats.setdefault(t, [])
                if v not in cats[t]:
                    cats[t].append(v)
        schema = LabelSchema(cats)
    return Dataset(tuple(samples), schema, name)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def toy_train_data(n: int = 48, seed: int = 0, preset_name: str = "balanced", **overrides):
    """Small preprocessed toy split for fast training tests."""
    from synthmtl.data_model import split_dataset
    from synthmtl.preprocess import PipelineConfig, preprocess_dataset
    from synthmtl.toygen import generate_dataset, preset
    from synthmtl.training import TrainData

    d = generate_dataset(preset(preset_name, n_samples=n, seed=seed, **overrides))
    train, test = split_dataset(d, 0.7, seed)
    cfg = PipelineConfig(target_size=(16, 16))
    return TrainData(preprocess_dataset(train, cfg), preprocess_dataset(test, cfg)), d.schema


# acceptance criteria register one line each here; echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
