"""Caption quality scoring, selection strategies, caption statistics,
and the nearest-neighbor caption retrieval baseline.

Scores and Top-K sets are static per dataset (the scorer is frozen);
only the rand-of-top-K draw happens per training step, inside the
trainer, from its seeded generator.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .embstore import CaptionRecord, Dataset, EmbeddingTable
from .errors import (ConfigError, DataError, IoError, MissingCaptionerError,
                     ShapeError, TruncatedResultWarning)

CLIPSCORE_SCALE = 2.5

STRATEGY_KINDS = ("all", "middle_one", "top_k_per_captioner",
                  "top_k_combined", "rand_of_top_k")


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"vector shapes differ: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DataError("cosine similarity undefined for zero-norm vector")
    return float(np.dot(a, b) / (na * nb))


def compute_clipscore(image_emb, text_emb) -> float:
    """Cross-modal caption quality: 2.5 * max(cos(image, text), 0), in [0, 2.5]."""
    return CLIPSCORE_SCALE * max(_cosine(image_emb, text_emb), 0.0)


def text_clipscore(text_emb_a, text_emb_b) -> float:
    """Same functional form applied to two text embeddings."""
    return CLIPSCORE_SCALE * max(_cosine(text_emb_a, text_emb_b), 0.0)


@dataclass
class SelectionStrategy:
    """Which captions of a video's pool feed training.

    kind:
      all                  -> every caption of the included captioners
      middle_one           -> per captioner, the caption at frame floor(M/2)
      top_k_per_captioner  -> per captioner, K highest-clipscore captions
      top_k_combined       -> K highest-clipscore captions across captioners
      rand_of_top_k        -> top_k_per_captioner set, one drawn per step
    """

    kind: str
    captioners: list[str] = field(default_factory=list)
    k: int = 1

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ConfigError(f"unknown strategy kind {self.kind!r}")
        if not self.captioners:
            raise ConfigError("strategy needs at least one captioner label")
        if self.kind in ("top_k_per_captioner", "top_k_combined", "rand_of_top_k"):
            if self.k < 1:
                raise ConfigError("K must be >= 1")

    @property
    def sample_one_per_step(self) -> bool:
        return self.kind == "rand_of_top_k"

    def label(self) -> str:
        if self.kind in ("top_k_per_captioner", "top_k_combined", "rand_of_top_k"):
            return f"{self.kind}:{self.k}"
        return self.kind


@dataclass
class CaptionPool:
    """Selection result for one video."""

    video_id: str
    selected: list[CaptionRecord]
    strategy: SelectionStrategy

    @property
    def sample_one_per_step(self) -> bool:
        return self.strategy.sample_one_per_step


def _sort_key(record: CaptionRecord):
    # total order: clipscore desc, frame_index asc, caption_id asc
    return (-record.clipscore, record.frame_index, record.caption_id)


def _stable_order(records: list[CaptionRecord]) -> list[CaptionRecord]:
    return sorted(records, key=lambda c: (c.captioner, c.frame_index, c.caption_id))


def select(pool: list[CaptionRecord], strategy: SelectionStrategy) -> CaptionPool:
    """Apply a selection strategy to one video's caption records.

    Deterministic given its inputs; rand-of-top-K returns the frozen
    top-K set and defers the single-caption draw to the trainer.
    Captioners with fewer than K captions contribute everything they
    have, with a warning.
    """
    if not pool:
        raise DataError("empty caption pool")
    video_id = pool[0].video_id
    by_captioner: dict[str, list[CaptionRecord]] = {}
    for rec in pool:
        by_captioner.setdefault(rec.captioner, []).append(rec)
    for name in strategy.captioners:
        if name not in by_captioner:
            raise MissingCaptionerError(
                f"captioner {name!r} absent from pool of video {video_id}")

    selected: list[CaptionRecord] = []
    if strategy.kind == "all":
        for name in strategy.captioners:
            selected.extend(_stable_order(by_captioner[name]))
    elif strategy.kind == "middle_one":
        for name in strategy.captioners:
            recs = by_captioner[name]
            target = len(recs) // 2
            selected.append(min(recs, key=lambda c: (abs(c.frame_index - target),
                                                     c.frame_index, c.caption_id)))
    elif strategy.kind in ("top_k_per_captioner", "rand_of_top_k"):
        for name in strategy.captioners:
            recs = sorted(by_captioner[name], key=_sort_key)
            if len(recs) < strategy.k:
                warnings.warn(
                    f"captioner {name!r} has only {len(recs)} captions for "
                    f"{video_id}, requested top {strategy.k}")
            selected.extend(recs[:strategy.k])
    elif strategy.kind == "top_k_combined":
        recs = sorted(
            [r for name in strategy.captioners for r in by_captioner[name]],
            key=_sort_key)
        if len(recs) < strategy.k:
            warnings.warn(
                f"pool of {video_id} has only {len(recs)} captions, "
                f"requested top {strategy.k}")
        selected = recs[:strategy.k]
    return CaptionPool(video_id, selected, strategy)


def select_dataset(dataset: Dataset,
                   strategy: SelectionStrategy) -> dict[str, CaptionPool]:
    """Selection for every video of a dataset, computed once."""
    return {vid: select(records, strategy)
            for vid, records in dataset.captions_by_video.items()}


def write_selection(pools: dict[str, CaptionPool], path) -> None:
    """Persist a selection as JSONL, one object per video, so training
    runs are reproducible from a frozen selection file."""
    try:
        with open(path, "w") as fh:
            for vid in sorted(pools):
                pool = pools[vid]
                fh.write(json.dumps({
                    "video_id": vid,
                    "caption_ids": [c.caption_id for c in pool.selected],
                    "strategy": pool.strategy.label(),
                    "sample_one_per_step": pool.sample_one_per_step,
                }, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_selection(dataset: Dataset, path) -> dict[str, CaptionPool]:
    """Rebuild caption pools from a frozen selection file."""
    by_id = {c.caption_id: c for c in dataset.manifest.captions}
    pools: dict[str, CaptionPool] = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    for line in lines:
        if not line.strip():
            continue
        obj = json.loads(line)
        records = []
        for cid in obj["caption_ids"]:
            if cid not in by_id:
                raise ConfigError(f"selection references unknown caption {cid}")
            records.append(by_id[cid])
        strategy = SelectionStrategy(
            kind="rand_of_top_k" if obj.get("sample_one_per_step") else "all",
            captioners=sorted({c.captioner for c in records}) or ["unknown"],
            k=max(1, len(records)))
        pools[obj["video_id"]] = CaptionPool(obj["video_id"], records, strategy)
    return pools


@dataclass
class StatsReport:
    """Caption statistics per dataset (Appendix-style summaries)."""

    dataset: str
    unique_before_pct: Optional[float]
    unique_after_pct: Optional[float]
    shared_across_captioners_pct: Optional[float]
    frame_overlap_pct: dict[int, float]
    text_stats_available: bool

    def to_json_obj(self) -> dict:
        return {
            "dataset": self.dataset,
            "unique_before_pct": self.unique_before_pct,
            "unique_after_pct": self.unique_after_pct,
            "shared_across_captioners_pct": self.shared_across_captioners_pct,
            "frame_overlap_pct": {str(k): v for k, v in self.frame_overlap_pct.items()},
            "text_stats_available": self.text_stats_available,
        }

    def to_table(self) -> str:
        rows = [("dataset", self.dataset)]
        if self.text_stats_available:
            rows += [
                ("unique captions (before)", f"{self.unique_before_pct:.1f}%"),
                ("unique captions (after)", f"{self.unique_after_pct:.1f}%"),
                ("shared across captioners", f"{self.shared_across_captioners_pct:.1f}%"),
            ]
        else:
            rows.append(("text statistics", "unavailable (no text_hash)"))
        for n in sorted(self.frame_overlap_pct, reverse=True):
            rows.append((f"{n} distinct frames", f"{self.frame_overlap_pct[n]:.1f}%"))
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def caption_stats(dataset: Dataset, strategy: SelectionStrategy) -> StatsReport:
    """Per-video uniqueness, cross-captioner sharing, and the
    distinct-source-frame distribution of the selected captions."""
    pools = select_dataset(dataset, strategy)
    have_hashes = all(c.text_hash for c in dataset.manifest.captions)

    unique_before = unique_after = shared = None
    if have_hashes:
        before, after = [], []
        for vid, records in dataset.captions_by_video.items():
            if records:
                before.append(len({c.text_hash for c in records}) / len(records))
            sel = pools[vid].selected
            if sel:
                after.append(len({c.text_hash for c in sel}) / len(sel))
        unique_before = 100.0 * float(np.mean(before)) if before else None
        unique_after = 100.0 * float(np.mean(after)) if after else None
        hashes_by_captioner: dict[str, set] = {}
        for c in dataset.manifest.captions:
            hashes_by_captioner.setdefault(c.captioner, set()).add(c.text_hash)
        all_hashes = set().union(*hashes_by_captioner.values())
        multi = {h for h in all_hashes
                 if sum(h in s for s in hashes_by_captioner.values()) > 1}
        shared = 100.0 * len(multi) / len(all_hashes) if all_hashes else 0.0

    counts: dict[int, int] = {}
    for pool in pools.values():
        distinct = len({c.frame_index for c in pool.selected})
        counts[distinct] = counts.get(distinct, 0) + 1
    total = sum(counts.values())
    overlap = {n: 100.0 * c / total for n, c in counts.items()} if total else {}

    return StatsReport(
        dataset=dataset.name,
        unique_before_pct=unique_before,
        unique_after_pct=unique_after,
        shared_across_captioners_pct=shared,
        frame_overlap_pct=overlap,
        text_stats_available=have_hashes,
    )


def nn_caption_retrieve(frame_emb, gallery: EmbeddingTable, k: int) -> list[int]:
    """Rows of the k most cosine-similar gallery entries, descending,
    ties broken by ascending row index.

    Asking for more rows than the gallery holds returns every row and
    emits a TruncatedResultWarning.
    """
    if gallery.row_count == 0:
        raise DataError("empty gallery")
    if k < 1:
        raise ConfigError("k must be >= 1")
    frame = np.asarray(frame_emb, dtype=np.float64)
    if frame.shape != (gallery.dim,):
        raise ShapeError(f"query shape {frame.shape} vs gallery dim {gallery.dim}")
    fnorm = np.linalg.norm(frame)
    if fnorm == 0.0:
        raise DataError("zero-norm query")
    rows = gallery.data.astype(np.float64)
    sims = rows @ frame / (np.linalg.norm(rows, axis=1) * fnorm)
    if k > gallery.row_count:
        warnings.warn(
            f"requested {k} neighbors from a gallery of {gallery.row_count}",
            TruncatedResultWarning)
        k = gallery.row_count
    # argsort on (-sim, row) gives the documented tie-break
    order = np.lexsort((np.arange(len(sims)), -sims))
    return [int(i) for i in order[:k]]
