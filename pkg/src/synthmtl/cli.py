"""``synthmtl`` command line: gen, preprocess, train, eval, ood, analyze, report.

Every subcommand except ``gen`` takes one experiment config file; ``--set
key.path=value`` overrides individual fields. Outputs go under the config's
``output_dir`` and each artifact records the config hash.
"""
from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Iterator

import click
import numpy as np

from . import __version__
from .analysis import build_report, write_report
from .backbone import count_trainable
from .config import ExperimentConfig, apply_overrides, canonical_hash, schema_for_manifest
from .data_model import (
    ConfigurationError,
    Dataset,
    RemapTable,
    TaskKind,
    load_manifest,
    load_remap_config,
    merge_datasets,
    split_dataset,
    write_manifest,
)
from .evaluation import evaluate, ood_inference
from .heads import build_model
from .preprocess import PreparedData, preprocess_dataset
from .toygen import GenSpec, generate_dataset, generate_ood_shifted, preset
from .training import TrainData, fit, load_checkpoint

log = logging.getLogger("synthmtl")

CACHE_ENV = "SYNTHMTL_CACHE"


# ---------------------------------------------------------------------------
# plumbing

class OutputLocked(click.ClickException):
    pass


@contextlib.contextmanager
def output_lock(directory: Path) -> Iterator[None]:
    """Fail fast if another process holds ``directory``."""
    from filelock import FileLock, Timeout

    directory.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(directory / ".synthmtl.lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise OutputLocked(f"{directory} is in use by another synthmtl process") from None
    try:
        yield
    finally:
        lock.release()


def write_json(path: Path, payload: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str))
    tmp.replace(path)


def provenance(cfg: ExperimentConfig, command: str) -> dict[str, Any]:
    return {"config_hash": cfg.config_hash, "command": command, "version": __version__}


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def toy_spec(entry: dict[str, Any], name: str, seed: int) -> GenSpec:
    entry = dict(entry)
    base = entry.pop("preset", None)
    entry.setdefault("seed", seed)
    entry.setdefault("name", name)
    return preset(base, **entry) if base else GenSpec.from_dict(entry)


def source_key(cfg: ExperimentConfig, sources) -> dict[str, Any]:
    key: dict[str, Any] = {}
    for src in sources:
        if src.manifest is not None:
            key[src.name] = {"manifest": _file_digest(src.manifest)}
            schema = src.manifest.parent / "schema.json"
            if schema.is_file():
                key[src.name]["schema"] = _file_digest(schema)
        else:
            key[src.name] = {"toy": toy_spec(dict(src.toy), src.name, cfg.seed).to_dict()}
    if cfg.remap is not None:
        key["__remap__"] = _file_digest(cfg.remap)
    return key


def load_source(cfg: ExperimentConfig, src) -> Dataset:
    if src.manifest is not None:
        d = load_manifest(src.manifest, schema_for_manifest(src.manifest), src.name)
        r = d.load_report
        if r is not None and (r.missing_images or r.unparseable):
            log.warning("%s: %d missing images, %d unparseable labels", src.name,
                        len(r.missing_images), len(r.unparseable))
        return d
    return generate_dataset(toy_spec(dict(src.toy), src.name, cfg.seed))


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    parts = [load_source(cfg, s) for s in cfg.sources]
    if cfg.remap is not None:
        unified, tables = load_remap_config(cfg.remap)
        return merge_datasets(parts, tables, unified)
    if len(parts) == 1:
        return parts[0]
    schema = parts[0].schema
    if any(p.schema != schema for p in parts) or not schema.tasks:
        raise ConfigurationError("sources with different schemas need a remap config")
    tables = {p.name: {t: RemapTable.identity(t, schema.categories[t]) for t in schema.tasks}
              for p in parts}
    return merge_datasets(parts, tables, schema)


def cache_root(cfg: ExperimentConfig) -> Path:
    env = os.environ.get(CACHE_ENV)
    return Path(env) if env else cfg.output_dir / "cache"


def cache_key(cfg: ExperimentConfig) -> str:
    return canonical_hash({"sources": source_key(cfg, cfg.sources),
                           "pipeline": cfg.pipeline.to_dict()})


def _save_prepared(path: Path, p: PreparedData) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {"x": p.x, "image_ids": np.asarray(p.image_ids), "no_face": p.no_face}
    arrays.update({f"y_{t.value}": y for t, y in p.targets.items()})
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)


def _load_prepared(path: Path) -> PreparedData:
    with np.load(path) as z:
        targets = {TaskKind(k[2:]): z[k] for k in z.files if k.startswith("y_")}
        return PreparedData(z["x"], targets, [str(i) for i in z["image_ids"]], z["no_face"])


def prepared_data(cfg: ExperimentConfig, d: Dataset) -> tuple[PreparedData, bool, str]:
    """Preprocessed tensors for ``d``, reusing the cache when the key matches."""
    key = cache_key(cfg)
    path = cache_root(cfg) / f"{key}.npz"
    if path.is_file():
        p = _load_prepared(path)
        if p.image_ids == d.image_ids:
            return p, True, key
        log.warning("cache entry %s does not match the dataset; rebuilding", key)
    p = preprocess_dataset(d, cfg.pipeline)
    _save_prepared(path, p)
    return p, False, key


def _index(p: PreparedData, ids: list[str]) -> PreparedData:
    pos = {i: k for k, i in enumerate(p.image_ids)}
    return p.subset(np.asarray([pos[i] for i in ids], dtype=np.int64))


def split_prepared(cfg: ExperimentConfig, d: Dataset, p: PreparedData
                   ) -> tuple[Dataset, Dataset, TrainData]:
    train_d, test_d = split_dataset(d, cfg.train_fraction, cfg.seed)
    return train_d, test_d, TrainData(_index(p, train_d.image_ids), _index(p, test_d.image_ids))


def _checkpoint_path(cfg: ExperimentConfig, given: str | None) -> Path:
    path = Path(given) if given else cfg.output_dir / "checkpoint.pt"
    if not path.is_file():
        raise click.ClickException(f"checkpoint {path} not found; run `synthmtl train` first")
    return path


def _load_cfg(config: str, overrides: tuple[str, ...]) -> ExperimentConfig:
    try:
        return ExperimentConfig.load(config, overrides)
    except (ConfigurationError, FileNotFoundError, ValueError) as exc:
        raise click.ClickException(f"invalid config: {exc}") from None


config_arg = click.argument("config", type=click.Path(exists=True, dir_okay=False))
set_opt = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                       help="Override a config field, e.g. train.epochs=5.")


@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", is_flag=True)
def main(verbose: bool) -> None:
    """Multi-task gaze/age/expression pipeline."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


# ---------------------------------------------------------------------------
# subcommands

@main.command()
@click.option("--preset", "preset_name", default="balanced", show_default=True)
@click.option("--spec", "spec_file", type=click.Path(exists=True, dir_okay=False),
              help="JSON/YAML GenSpec; replaces --preset.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=None)
@click.option("--ood/--no-ood", default=False, help="Also write the shifted OOD variant.")
@click.option("--format", "fmt", type=click.Choice(["csv", "jsonl"]), default="csv")
@set_opt
def gen(preset_name: str, spec_file: str | None, out_dir: str, seed: int | None, ood: bool,
        fmt: str, overrides: tuple[str, ...]) -> None:
    """Generate a toy dataset as manifest + PNG files."""
    from .config import read_structured

    raw: dict[str, Any] = read_structured(spec_file) if spec_file else {"preset": preset_name}
    raw = apply_overrides(raw, overrides)
    if seed is not None:
        raw["seed"] = seed
    name = raw.get("name") or raw.get("preset") or "toy"
    spec = toy_spec(raw, name, int(raw.get("seed", 0)))
    out = Path(out_dir)
    with output_lock(out):
        d = generate_dataset(spec)
        manifest = write_manifest(d, out / "data", fmt)
        info = {"spec": spec.to_dict(), "n": len(d), "manifest": str(manifest),
                "spec_hash": canonical_hash(spec.to_dict())}
        if ood:
            o = generate_ood_shifted(spec, d)
            info["ood_manifest"] = str(write_manifest(o, out / "ood", fmt))
        write_json(out / "gen.json", info)
    click.echo(f"wrote {len(d)} samples to {manifest}")


@main.command("preprocess")
@config_arg
@set_opt
def preprocess_cmd(config: str, overrides: tuple[str, ...]) -> None:
    """Build (or reuse) the cached tensor store for the configured data."""
    cfg = _load_cfg(config, overrides)
    with output_lock(cfg.output_dir):
        d = build_dataset(cfg)
        p, hit, key = prepared_data(cfg, d)
        write_json(cfg.output_dir / "preprocess.json", {
            **provenance(cfg, "preprocess"), "cache_key": key, "cache_hit": hit,
            "n_samples": len(p), "no_face": int(p.no_face.sum()),
            "cache_dir": str(cache_root(cfg))})
    click.echo(f"cache {'hit' if hit else 'miss'} {key}: {len(p)} samples")


@main.command()
@config_arg
@set_opt
def train(config: str, overrides: tuple[str, ...]) -> None:
    """Fit the multi-task model; writes checkpoint.pt, metrics.jsonl and metrics.csv."""
    import torch

    cfg = _load_cfg(config, overrides)
    with output_lock(cfg.output_dir):
        d = build_dataset(cfg)
        p, hit, _ = prepared_data(cfg, d)
        _, _, data = split_prepared(cfg, d, p)
        torch.manual_seed(cfg.seed)
        model = build_model(cfg.backbone, d.schema, cfg.policy, cfg.heads.hidden_sizes,
                            cfg.heads.dropout_rate)
        n_train = count_trainable(model.mask, model)
        n_heads = sum(q.numel() for q in model.heads.parameters())
        log.info("policy %s: trainable parameters %d (heads %d, backbone blocks %s)",
                 cfg.policy.value, n_train, n_heads, model.mask.trainable_blocks)
        ckpt_path = cfg.output_dir / "checkpoint.pt"
        res = fit(model, data, cfg.train, cfg.loss, ckpt_path, cfg.output_dir / "metrics.jsonl")
        # re-save with provenance attached
        res.best.metadata.update(provenance(cfg, "train"))
        from .training import save_checkpoint, write_metrics_csv

        save_checkpoint(res.best, ckpt_path)
        write_metrics_csv(res.records, cfg.output_dir / "metrics.csv")
        last = res.records[-1] if res.records else None
        write_json(cfg.output_dir / "train.json", {
            **provenance(cfg, "train"), "policy": cfg.policy.value,
            "trainable_parameters": n_train, "head_parameters": n_heads,
            "best_epoch": res.best.epoch, "best_selection_loss": res.best.eval_loss,
            "activation_epochs": res.activation_epochs, "epochs": len(res.records),
            "final_eval_accuracy": last.eval_accuracy if last else None,
            "n_train": len(data.train), "n_test": len(data.test)})
    click.echo(f"best epoch {res.best.epoch} (selection loss {res.best.eval_loss:.4f})")


@main.command("eval")
@config_arg
@click.option("--checkpoint", default=None)
@click.option("--split", type=click.Choice(["test", "train", "all"]), default="test",
              show_default=True)
@set_opt
def eval_cmd(config: str, checkpoint: str | None, split: str, overrides: tuple[str, ...]) -> None:
    """Score the best checkpoint on the held-out split."""
    cfg = _load_cfg(config, overrides)
    ckpt_path = _checkpoint_path(cfg, checkpoint)
    with output_lock(cfg.output_dir):
        model = load_checkpoint(ckpt_path).to_model()
        d = build_dataset(cfg)
        train_d, test_d = split_dataset(d, cfg.train_fraction, cfg.seed)
        target = {"test": test_d, "train": train_d, "all": d}[split]
        report = evaluate(model, target, cfg.pipeline)
        report.write(cfg.output_dir / "eval" / split,
                     {**provenance(cfg, "eval"), "checkpoint": str(ckpt_path)})
    click.echo(json.dumps({t.value: m.accuracy for t, m in report.metrics.items()}))


@main.command()
@config_arg
@click.option("--checkpoint", default=None)
@set_opt
def ood(config: str, checkpoint: str | None, overrides: tuple[str, ...]) -> None:
    """Run OOD inference on every configured external set."""
    cfg = _load_cfg(config, overrides)
    if not cfg.ood:
        raise click.ClickException("config has no 'ood' entries")
    ckpt_path = _checkpoint_path(cfg, checkpoint)
    tables: dict[str, dict[TaskKind, RemapTable]] = {}
    if cfg.remap is not None:
        _, tables = load_remap_config(cfg.remap)
    with output_lock(cfg.output_dir):
        model = load_checkpoint(ckpt_path).to_model()
        summary = {}
        for src in cfg.ood:
            if src.toy is not None:
                # toy external sets are the shifted variant of the given spec
                ext = generate_ood_shifted(toy_spec(dict(src.toy), src.name, cfg.seed))
            else:
                ext = load_source(cfg, src)
            report = ood_inference(model, ext, tables.get(src.name, {}), cfg.pipeline)
            report.write(cfg.output_dir / "ood" / src.name,
                         {**provenance(cfg, "ood"), "checkpoint": str(ckpt_path)})
            summary[src.name] = {t.value: m.accuracy for t, m in report.metrics.items()}
    click.echo(json.dumps(summary))


@main.command()
@config_arg
@click.option("--source", default=None, help="Analyze one source instead of the merged set.")
@set_opt
def analyze(config: str, source: str | None, overrides: tuple[str, ...]) -> None:
    """Similarity matrices, t-SNE plot data and label distributions."""
    cfg = _load_cfg(config, overrides)
    with output_lock(cfg.output_dir):
        if source is None:
            d = build_dataset(cfg)
        else:
            match = [s for s in (*cfg.sources, *cfg.ood) if s.name == source]
            if not match:
                raise click.ClickException(f"no source named {source!r}")
            d = load_source(cfg, match[0])
        report = build_report(d, cfg.pipeline, cfg.analysis)
        out = cfg.output_dir / "analysis" / (source or "combined")
        write_report(report, out, provenance(cfg, "analyze"))
    for note in report.notices:
        click.echo(note)
    flagged = [t.value for t in report.labels.counts if report.labels.dominated(t)]
    click.echo(f"analysis written to {out}; dominated tasks: {flagged or 'none'}")


@main.command()
@config_arg
@set_opt
def report(config: str, overrides: tuple[str, ...]) -> None:
    """Collect every artifact in output_dir into summary.json."""
    cfg = _load_cfg(config, overrides)
    out = cfg.output_dir
    summary: dict[str, Any] = provenance(cfg, "report")
    for name in ("preprocess.json", "train.json"):
        if (out / name).is_file():
            summary[name[:-5]] = json.loads((out / name).read_text())
    for group in ("eval", "ood"):
        for rep in sorted((out / group).glob("*/report.json")) if (out / group).is_dir() else ():
            data = json.loads(rep.read_text())
            summary.setdefault(group, {})[rep.parent.name] = {
                "mean_accuracy": data["mean_accuracy"],
                "accuracy": {t: m["accuracy"] for t, m in data["tasks"].items()},
                "config_hash": data.get("config_hash")}
    if (out / "analysis").is_dir():
        for lab in sorted((out / "analysis").glob("*/labels.json")):
            summary.setdefault("analysis", {})[lab.parent.name] = json.loads(lab.read_text())
    stale = sorted({k for g in ("eval", "ood") for k, v in summary.get(g, {}).items()
                    if v.get("config_hash") not in (None, cfg.config_hash)})
    if stale:
        summary["stale"] = stale
    with output_lock(out):
        write_json(out / "summary.json", summary)
    click.echo(f"summary written to {out / 'summary.json'}")


if __name__ == "__main__":  # pragma: no cover
    main()
