"""Data-distribution audit: pairwise similarity over flattened images, t-SNE
embeddings colored by per-point similarity, and label-share statistics."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.spatial.distance import pdist, squareform

from .data_model import ALL_TASKS, Dataset, TaskKind
from .preprocess import PipelineConfig, preprocess_dataset

log = logging.getLogger(__name__)


def flatten_tensors(x: np.ndarray) -> np.ndarray:
    """``N x C x H x W`` -> ``N x (C*H*W)``, C-order (channel-major per row)."""
    x = np.asarray(x)
    return x.reshape(len(x), -1)


def flatten_images(d: Dataset, pipeline: PipelineConfig) -> np.ndarray:
    return flatten_tensors(preprocess_dataset(d, pipeline).x).astype(np.float64)


# ---------------------------------------------------------------------------
# similarity

@dataclass
class Similarity:
    raw: np.ndarray
    normalized: np.ndarray
    degenerate: bool = False
    # row indices left out (zero-norm rows for cosine)
    excluded: list[int] = field(default_factory=list)


def _symmetrize(m: np.ndarray) -> np.ndarray:
    upper = np.triu(m, 1)
    return upper + upper.T + np.diag(np.diag(m))


def _offdiag(m: np.ndarray) -> np.ndarray:
    return m[~np.eye(len(m), dtype=bool)]


def euclidean_similarity(M: np.ndarray, normalization: str = "minmax") -> Similarity:
    """Pairwise L2 distances, then rescaled over the off-diagonal entries.

    ``minmax`` maps the off-diagonal range onto [0, 1] with the diagonal pinned
    to 0; ``zscore`` standardizes off-diagonal entries instead.
    """
    M = np.asarray(M, dtype=np.float64)
    if len(M) < 2:
        raise ValueError("need at least 2 rows")
    raw = squareform(pdist(M, "euclidean"))
    off = _offdiag(raw)
    lo, hi = off.min(), off.max()
    if hi == lo:
        degenerate = bool(hi == 0)
        if degenerate:
            log.warning("all rows identical; euclidean similarity is degenerate")
        return Similarity(raw, np.zeros_like(raw), degenerate)
    if normalization == "minmax":
        norm = (raw - lo) / (hi - lo)
    elif normalization == "zscore":
        norm = (raw - off.mean()) / off.std()
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    np.fill_diagonal(norm, 0.0)
    return Similarity(raw, norm)


def cosine_similarity(M: np.ndarray) -> Similarity:
    """Cosine of the angle between rows; ``normalized = (cos + 1) / 2``.

    Zero rows are dropped and listed in ``excluded`` (the matrices then cover
    the remaining rows only).
    """
    M = np.asarray(M, dtype=np.float64)
    norms = np.linalg.norm(M, axis=1)
    excluded = [int(i) for i in np.flatnonzero(norms == 0)]
    if excluded:
        log.warning("cosine similarity: excluding zero rows %s", excluded)
    keep = norms > 0
    U = M[keep] / norms[keep, None]
    raw = np.clip(_symmetrize(U @ U.T), -1.0, 1.0)
    np.fill_diagonal(raw, 1.0)
    return Similarity(raw, (raw + 1.0) / 2.0, excluded=excluded)


# ---------------------------------------------------------------------------
# embedding

def tsne_embed(M: np.ndarray, dims: int = 2, perplexity: float = 30.0, seed: int = 0) -> np.ndarray:
    """Column-standardize, then sklearn t-SNE with PCA init."""
    from sklearn.manifold import TSNE
    from sklearn.preprocessing import StandardScaler

    M = np.asarray(M, dtype=np.float64)
    if dims not in (2, 3):
        raise ValueError("dims must be 2 or 3")
    if len(M) <= 3 * perplexity:
        raise ValueError(f"t-SNE needs N > 3 * perplexity (N={len(M)}, perplexity={perplexity})")
    X = StandardScaler().fit_transform(M)
    coords = TSNE(n_components=dims, perplexity=perplexity, random_state=seed,
                  init="pca", learning_rate="auto").fit_transform(X)
    if not np.isfinite(coords).all():
        raise FloatingPointError("t-SNE produced non-finite coordinates")
    return coords


# ---------------------------------------------------------------------------
# labels

@dataclass
class LabelDistribution:
    counts: dict[TaskKind, dict[str, int]]
    labeled: dict[TaskKind, int]
    dominance_threshold: float = 0.5

    def fractions(self, task: TaskKind) -> dict[str, float]:
        n = self.labeled[task]
        return {c: (k / n if n else 0.0) for c, k in self.counts[task].items()}

    def dominant(self, task: TaskKind) -> tuple[str, float] | None:
        if not self.labeled.get(task):
            return None
        fr = self.fractions(task)
        name = max(fr, key=fr.get)
        return name, fr[name]

    def dominated(self, task: TaskKind) -> bool:
        """True when one category holds more than ``dominance_threshold`` of the labels."""
        top = self.dominant(task)
        return top is not None and top[1] > self.dominance_threshold

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for task in self.counts:
            top = self.dominant(task)
            out[task.value] = {
                "counts": self.counts[task],
                "fractions": self.fractions(task),
                "labeled": self.labeled[task],
                "dominant": None if top is None else {"category": top[0], "fraction": top[1]},
                "dominated": self.dominated(task),
            }
        return out


def label_distribution(d: Dataset, dominance_threshold: float = 0.5) -> LabelDistribution:
    counts: dict[TaskKind, dict[str, int]] = {}
    labeled: dict[TaskKind, int] = {}
    seen = {t for s in d.samples for t in s.labels}
    tasks = d.schema.tasks or tuple(t for t in ALL_TASKS if t in seen)
    for task in tasks:
        cats = d.schema.categories.get(task, ())
        c = {name: 0 for name in cats}
        for s in d.samples:
            if task in s.labels:
                c[s.labels[task]] = c.get(s.labels[task], 0) + 1
        counts[task] = c
        labeled[task] = sum(c.values())
    return LabelDistribution(counts, labeled, dominance_threshold)


# ---------------------------------------------------------------------------
# report

@dataclass(frozen=True)
class AnalysisConfig:
    perplexity: float = 30.0
    seed: int = 0
    subsample_cap: int = 1000
    normalization: str = "minmax"
    dims: tuple[int, ...] = (2, 3)
    dominance_threshold: float = 0.5

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "AnalysisConfig":
        data = dict(data)
        if "dims" in data:
            data["dims"] = tuple(data["dims"])
        return cls(**data)


@dataclass
class SimilarityReport:
    sample_ids: list[str]
    euclidean: np.ndarray
    cosine: np.ndarray
    euclidean_color: np.ndarray
    cosine_color: np.ndarray
    embeddings: dict[int, np.ndarray]
    degenerate: bool = False
    excluded: list[str] = field(default_factory=list)


@dataclass
class AnalysisReport:
    similarity: SimilarityReport
    labels: LabelDistribution
    notices: list[str] = field(default_factory=list)


def equal_portion_subsample(d: Dataset, cap: int, seed: int = 0) -> Dataset:
    """Take the same number of samples from every source tag, at most ``cap`` each."""
    groups: dict[str, list[int]] = {}
    for i, s in enumerate(d.samples):
        groups.setdefault(s.source, []).append(i)
    k = min(cap, *(len(v) for v in groups.values())) if groups else 0
    rng = np.random.default_rng(seed)
    keep: list[int] = []
    for source in sorted(groups):
        idx = groups[source]
        keep.extend(sorted(rng.choice(idx, size=k, replace=False).tolist()) if len(idx) > k else idx)
    return d.derive(d.samples[i] for i in sorted(keep))


def row_mean_color(S: np.ndarray) -> np.ndarray:
    """Per-point color scalar: mean of the point's off-diagonal similarity row."""
    n = len(S)
    if n < 2:
        return np.zeros(n)
    return (S.sum(axis=1) - np.diag(S)) / (n - 1)


def build_report(d: Dataset, pipeline: PipelineConfig, cfg: AnalysisConfig = AnalysisConfig(),
                 out_dir: str | Path | None = None) -> AnalysisReport:
    notices: list[str] = []
    sub = equal_portion_subsample(d, cfg.subsample_cap, cfg.seed)
    if len(sub) < len(d):
        notices.append(f"subsampled {len(d)} -> {len(sub)} samples (equal portions per source)")
    M = flatten_images(sub, pipeline)
    ids = sub.image_ids
    euc = euclidean_similarity(M, cfg.normalization)
    cos = cosine_similarity(M)
    if cos.excluded:
        notices.append(f"cosine: excluded zero-norm samples {[ids[i] for i in cos.excluded]}")
    cos_color = np.full(len(ids), np.nan)
    kept = [i for i in range(len(ids)) if i not in set(cos.excluded)]
    cos_color[kept] = row_mean_color(cos.normalized)
    embeddings: dict[int, np.ndarray] = {}
    for dims in cfg.dims:
        try:
            embeddings[dims] = tsne_embed(M, dims, cfg.perplexity, cfg.seed)
        except ValueError as exc:
            notices.append(f"t-SNE {dims}D skipped: {exc}")
    sim = SimilarityReport(ids, euc.normalized, cos.normalized, row_mean_color(euc.normalized),
                           cos_color, embeddings, euc.degenerate,
                           [ids[i] for i in cos.excluded])
    report = AnalysisReport(sim, label_distribution(sub, cfg.dominance_threshold), notices)
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def write_report(report: AnalysisReport, out_dir: str | Path,
                 extra: Mapping[str, Any] | None = None) -> None:
    """Similarity matrices (.npy + .csv), embedding CSVs and label JSON."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sim = report.similarity
    for name, mat in (("euclidean", sim.euclidean), ("cosine", sim.cosine)):
        np.save(out / f"{name}.npy", mat)
        np.savetxt(out / f"{name}.csv", mat, delimiter=",", fmt="%.10g")
    for dims, coords in sim.embeddings.items():
        axes = ["x", "y", "z"][:dims]
        with (out / f"embedding_{dims}d.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", *axes, "euclid_color", "cosine_color"])
            for i, sid in enumerate(sim.sample_ids):
                w.writerow([sid, *coords[i].tolist(), sim.euclidean_color[i], sim.cosine_color[i]])
    meta = {"n": len(sim.sample_ids), "degenerate": sim.degenerate, "excluded": sim.excluded,
            "notices": report.notices}
    if extra:
        meta.update(extra)
    (out / "labels.json").write_text(json.dumps(report.labels.to_dict(), indent=2))
    (out / "analysis.json").write_text(json.dumps(meta, indent=2))
