"""Declarative experiment config: one JSON/YAML file drives every CLI subcommand.

Layout::

    seed: 0                      # mandatory
    output_dir: runs/exp
    data:
      sources:                   # each: manifest path or toy preset
        - {name: synth_a, manifest: data/a/manifest.csv}
        - {name: toy, toy: {preset: balanced, n_samples: 600}}
      remap: remaps/combined.yaml   # optional label harmonization
      train_fraction: 0.7
    ood:                         # optional external sets
      - {name: external, manifest: data/ext/manifest.csv}
    pipeline: {...}   backbone: {...}   heads: {...}
    policy: FFT       loss: {...}       train: {...}   analysis: {...}

Relative paths resolve against the config file's directory.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from .analysis import AnalysisConfig
from .backbone import AdaptationPolicy, BackboneSpec
from .data_model import ConfigurationError, LabelSchema
from .preprocess import PipelineConfig
from .training import LossSpec, TrainConfig


def read_structured(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() in (".yaml", ".yml"):
        import yaml

        data = yaml.safe_load(text)
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return data


def canonical_hash(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _parse_scalar(text: str) -> Any:
    import yaml

    return yaml.safe_load(text)


def apply_overrides(raw: Mapping[str, Any], overrides: Sequence[str]) -> dict[str, Any]:
    """Apply ``dotted.key=value`` overrides; values are parsed as YAML scalars.

    Integer path parts index into lists, e.g. ``data.sources.0.toy.seed=3``.
    """
    out = copy.deepcopy(dict(raw))
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        node: Any = out
        parts = key.strip().split(".")
        for i, part in enumerate(parts):
            last = i == len(parts) - 1
            if isinstance(node, list):
                try:
                    idx = int(part)
                    node[idx]
                except (ValueError, IndexError):
                    raise ConfigurationError(f"override {key!r}: bad list index {part!r}") from None
                if last:
                    node[idx] = _parse_scalar(value)
                else:
                    node = node[idx]
            elif isinstance(node, dict):
                if last:
                    node[part] = _parse_scalar(value)
                else:
                    node = node.setdefault(part, {})
            else:
                raise ConfigurationError(f"override {key!r}: cannot descend into {part!r}")
    return out


@dataclass(frozen=True)
class SourceConfig:
    name: str
    manifest: Path | None = None
    toy: Mapping[str, Any] | None = None

    def __post_init__(self) -> None:
        if (self.manifest is None) == (self.toy is None):
            raise ConfigurationError(f"source {self.name!r}: give exactly one of manifest, toy")


@dataclass(frozen=True)
class HeadConfig:
    hidden_sizes: tuple[int, ...] = (256, 128)
    dropout_rate: float = 0.3


@dataclass
class ExperimentConfig:
    seed: int
    output_dir: Path
    sources: list[SourceConfig]
    remap: Path | None = None
    train_fraction: float = 0.7
    ood: list[SourceConfig] = field(default_factory=list)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    heads: HeadConfig = field(default_factory=HeadConfig)
    policy: AdaptationPolicy = AdaptationPolicy.FFT
    loss: LossSpec = field(default_factory=LossSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    raw: dict[str, Any] = field(default_factory=dict, repr=False)

    @property
    def config_hash(self) -> str:
        return canonical_hash(self.raw)

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any], base_dir: str | Path = ".") -> "ExperimentConfig":
        raw = copy.deepcopy(dict(raw))
        base = Path(base_dir)
        if raw.get("seed") is None:
            raise ConfigurationError("config must set 'seed'")
        seed = int(raw["seed"])

        def resolve(p: str | None) -> Path | None:
            if p is None:
                return None
            p = Path(p)
            return p if p.is_absolute() else base / p

        def sources(entries: Sequence[Mapping[str, Any]], what: str) -> list[SourceConfig]:
            out = []
            for i, e in enumerate(entries):
                name = e.get("name") or (Path(e["manifest"]).parent.name if "manifest" in e
                                         else f"{what}{i}")
                src = SourceConfig(name, resolve(e.get("manifest")), e.get("toy"))
                if src.manifest is not None and not src.manifest.is_file():
                    raise ConfigurationError(f"{what} {name!r}: manifest {src.manifest} not found")
                out.append(src)
            return out

        data = raw.get("data", {})
        srcs = sources(data.get("sources", []), "source")
        if not srcs:
            raise ConfigurationError("config needs at least one data source")
        remap = resolve(data.get("remap"))
        if remap is not None and not remap.is_file():
            raise ConfigurationError(f"remap config {remap} not found")
        try:
            policy = AdaptationPolicy(str(raw.get("policy", "FFT")).upper())
        except ValueError:
            raise ConfigurationError(f"policy must be one of LP, PT, FFT, got {raw.get('policy')!r}") from None
        train = dict(raw.get("train", {}))
        train.setdefault("seed", seed)
        analysis = dict(raw.get("analysis", {}))
        analysis.setdefault("seed", seed)
        heads = raw.get("heads", {})
        return cls(
            seed=seed,
            output_dir=resolve(raw.get("output_dir", "runs/default")),
            sources=srcs,
            remap=remap,
            train_fraction=float(data.get("train_fraction", 0.7)),
            ood=sources(raw.get("ood", []), "ood"),
            pipeline=PipelineConfig.from_dict(raw.get("pipeline", {})),
            backbone=BackboneSpec.from_dict(raw.get("backbone", {})),
            heads=HeadConfig(tuple(heads.get("hidden_sizes", (256, 128))),
                             float(heads.get("dropout_rate", 0.3))),
            policy=policy,
            loss=LossSpec.from_dict(raw.get("loss", {})),
            train=TrainConfig.from_dict(train),
            analysis=AnalysisConfig.from_dict(analysis),
            raw=raw,
        )

    @classmethod
    def load(cls, path: str | Path, overrides: Sequence[str] = ()) -> "ExperimentConfig":
        path = Path(path)
        raw = apply_overrides(read_structured(path), overrides)
        return cls.from_dict(raw, path.parent)


def schema_for_manifest(manifest: Path) -> LabelSchema:
    """``schema.json`` beside the manifest, else an unconstrained schema."""
    p = manifest.parent / "schema.json"
    if p.is_file():
        return LabelSchema.from_dict(json.loads(p.read_text()))
    return LabelSchema({})
