"""Retrieval evaluation: similarity matrices under mean-pool /
query-scoring / multi-caption query-scoring, recall@k in both
directions, the caption-bottleneck baseline, and cross-dataset grids.

The frozen baseline is evaluation with an identity projection model,
so "no training" and "baseline" are literally the same code path.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .embstore import Dataset, EmbeddingTable
from .errors import ConfigError, EvalError, ShapeError
from .poolcore import PoolingConfig
from .trainer import ProjectionModel

EVAL_KS = (1, 5, 10)


@dataclass
class SimilarityMatrix:
    """Query-by-gallery similarity values with their id labels."""

    values: np.ndarray
    row_ids: list[str]
    col_ids: list[str]

    def __post_init__(self):
        q, g = self.values.shape
        if q != len(self.row_ids) or g != len(self.col_ids):
            raise ShapeError("similarity matrix ids do not match its shape")
        if len(set(self.row_ids)) != q or len(set(self.col_ids)) != g:
            raise EvalError("duplicate ids in similarity matrix")
        if not np.all(np.isfinite(self.values)):
            raise EvalError("non-finite similarity value")


@dataclass
class EvalReport:
    """Recall@k per direction plus median ranks."""

    dataset: str
    fingerprint: str
    t2v: dict[int, float] = field(default_factory=dict)
    v2t: dict[int, float] = field(default_factory=dict)
    t2v_median_rank: int = 0
    v2t_median_rank: int = 0

    def to_json_obj(self) -> dict:
        return {
            "dataset": self.dataset,
            "fingerprint": self.fingerprint,
            "t2v": {f"r@{k}": v for k, v in sorted(self.t2v.items())},
            "v2t": {f"r@{k}": v for k, v in sorted(self.v2t.items())},
            "t2v_median_rank": self.t2v_median_rank,
            "v2t_median_rank": self.v2t_median_rank,
        }

    def csv_rows(self) -> list[dict]:
        rows = []
        for direction, metrics, median in (("t2v", self.t2v, self.t2v_median_rank),
                                           ("v2t", self.v2t, self.v2t_median_rank)):
            for k in sorted(metrics):
                rows.append({"dataset": self.dataset, "direction": direction,
                             "k": k, "recall": f"{metrics[k]:.6f}",
                             "median_rank": median})
        return rows

    def to_table(self) -> str:
        lines = [f"dataset: {self.dataset}"]
        for direction, metrics, median in (("t2v", self.t2v, self.t2v_median_rank),
                                           ("v2t", self.v2t, self.v2t_median_rank)):
            parts = "  ".join(f"R@{k}={metrics[k]:.3f}" for k in sorted(metrics))
            lines.append(f"{direction:>4}  {parts}  MdR={median}")
        return "\n".join(lines)


def _gallery(dataset: Dataset, video_ids: Optional[list[str]]) -> list[str]:
    if video_ids is None:
        return [v.video_id for v in dataset.manifest.videos]
    known = dataset.video_by_id
    for vid in video_ids:
        if vid not in known:
            raise EvalError(f"unknown gallery video {vid}")
    return list(video_ids)


def build_similarity(model: ProjectionModel, dataset: Dataset, mode: str,
                     pooling: PoolingConfig,
                     video_ids: Optional[list[str]] = None) -> SimilarityMatrix:
    """Similarity of every evaluation query (row) against every gallery
    video (column) under the requested pooling mode.

    mean_pool collapses each video to its projected-frame mean before
    the shared scoring kernel, which makes single-frame QS and mean-pool
    evaluation identical by construction. mcqs scores each video's
    ground-truth caption group jointly and uses the group as the row.
    """
    if model.dim != dataset.dim:
        raise ShapeError(f"model dim {model.dim} != dataset dim {dataset.dim}")
    gallery = _gallery(dataset, video_ids)
    gallery_set = set(gallery)
    frame_groups = []
    for vid in gallery:
        projected = model.project(dataset.frame_matrix(vid), "visual")
        if mode == "mean_pool":
            projected = projected.mean(axis=0, keepdims=True)
        frame_groups.append(projected)
    vis, vis_off = kernels.pack_groups(frame_groups)

    if mode in ("mean_pool", "qs"):
        queries = [q for q in dataset.manifest.queries if q.video_id in gallery_set]
        row_ids = [q.query_id for q in queries]
        text = model.project(dataset.queries64[[q.embedding_row for q in queries]],
                             "text")
        cap_off = np.arange(len(queries) + 1, dtype=np.int64)
        capw = np.ones(len(queries))
    elif mode == "mcqs":
        groups = dataset.manifest.gt_caption_groups
        if not groups:
            raise ConfigError(
                f"mcqs evaluation needs gt_caption_groups in {dataset.name}")
        row_ids = [vid for vid in gallery if groups.get(vid)]
        group_mats = []
        capw_parts = []
        for vid in row_ids:
            rows = groups[vid]
            group_mats.append(model.project(dataset.queries64[rows], "text"))
            capw_parts.append(np.full(len(rows), 1.0 / len(rows)))
        text, cap_off = kernels.pack_groups(group_mats)
        capw = np.concatenate(capw_parts) if capw_parts else np.ones(0)
    else:
        raise ConfigError(f"unknown evaluation mode {mode!r}")

    if not row_ids:
        raise EvalError(f"no evaluation queries for gallery of {dataset.name}")
    phi = kernels.phi_matrix(vis, vis_off, text, cap_off, capw, pooling.tau)
    # cosine rounding can exceed |1| by a few ulp; clamp to the contract range
    values = np.clip(phi.T, -1.0, 1.0)
    return SimilarityMatrix(values, row_ids, gallery)


def _rank_of(sims: np.ndarray, ids: list[str], target: int) -> int:
    t = sims[target]
    tid = ids[target]
    higher = int(np.sum(sims > t))
    ties = sum(1 for i in np.flatnonzero(sims == t) if ids[int(i)] < tid)
    return 1 + higher + ties


def _median_low(ranks: list[int]) -> int:
    ordered = sorted(ranks)
    return ordered[(len(ordered) - 1) // 2]


def recall_at_k(sim: SimilarityMatrix, gt: dict[str, str],
                ks=EVAL_KS, dataset: str = "",
                fingerprint: str = "") -> EvalReport:
    """Recall@k and median rank for both retrieval directions.

    Gallery ranking is by descending similarity with ties broken by
    ascending id. For video-to-text, a video with several ground-truth
    queries scores by its best-ranked one; videos with no ground-truth
    query are skipped in that direction.
    """
    col_index = {cid: i for i, cid in enumerate(sim.col_ids)}
    t2v_ranks = []
    for r, rid in enumerate(sim.row_ids):
        if rid not in gt:
            raise EvalError(f"no ground truth for query {rid}")
        target = gt[rid]
        if target not in col_index:
            raise EvalError(f"ground-truth video {target} for query {rid} "
                            "missing from gallery")
        t2v_ranks.append(_rank_of(sim.values[r], sim.col_ids, col_index[target]))

    row_index = {rid: i for i, rid in enumerate(sim.row_ids)}
    gt_rows_by_video: dict[str, list[int]] = {}
    for rid, vid in gt.items():
        if rid in row_index:
            gt_rows_by_video.setdefault(vid, []).append(row_index[rid])
    v2t_ranks = []
    for c, cid in enumerate(sim.col_ids):
        rows = gt_rows_by_video.get(cid)
        if not rows:
            continue
        col = sim.values[:, c]
        v2t_ranks.append(min(_rank_of(col, sim.row_ids, r) for r in rows))

    report = EvalReport(dataset=dataset, fingerprint=fingerprint)
    n_q = len(t2v_ranks)
    for k in ks:
        report.t2v[k] = sum(1 for r in t2v_ranks if r <= k) / n_q
    report.t2v_median_rank = _median_low(t2v_ranks)
    if v2t_ranks:
        for k in ks:
            report.v2t[k] = sum(1 for r in v2t_ranks if r <= k) / len(v2t_ranks)
        report.v2t_median_rank = _median_low(v2t_ranks)
    return report


def evaluate(model: ProjectionModel, dataset: Dataset, mode: str,
             pooling: PoolingConfig, ks=EVAL_KS,
             video_ids: Optional[list[str]] = None,
             fingerprint: str = "") -> EvalReport:
    """build_similarity + recall_at_k under one roof."""
    sim = build_similarity(model, dataset, mode, pooling, video_ids)
    if mode == "mcqs":
        gt = {vid: vid for vid in sim.row_ids}
    else:
        gt = {q.query_id: q.video_id for q in dataset.manifest.queries}
    return recall_at_k(sim, gt, ks, dataset=dataset.name, fingerprint=fingerprint)


def caption_bottleneck_eval(dataset: Dataset, text_table: EmbeddingTable,
                            k_select: int, ks=EVAL_KS,
                            video_ids: Optional[list[str]] = None,
                            fingerprint: str = "caption-bottleneck") -> EvalReport:
    """Text-only retrieval baseline: each video is represented by the
    mean text embedding of its k_select highest-clipscore captions, and
    queries are compared to that representation by cosine.
    """
    if text_table is None:
        raise ConfigError("caption bottleneck needs a text-space caption table")
    if text_table.row_count < dataset.captions.row_count:
        raise ConfigError("text-space caption table is smaller than the "
                          "caption table it mirrors")
    if text_table.dim != dataset.dim:
        raise ShapeError(f"text table dim {text_table.dim} != dataset dim "
                         f"{dataset.dim}")
    if k_select < 1:
        raise ConfigError("k_select must be >= 1")
    text64 = text_table.data.astype(np.float64)
    gallery = _gallery(dataset, video_ids)
    gallery_set = set(gallery)
    reps = []
    for vid in gallery:
        records = sorted(dataset.captions_by_video[vid],
                         key=lambda c: (-c.clipscore, c.frame_index, c.caption_id))
        top = records[:k_select]
        if not top:
            raise EvalError(f"video {vid} has no captions")
        reps.append(text64[[c.embedding_row for c in top]].mean(axis=0, keepdims=True))
    vis, vis_off = kernels.pack_groups(reps)
    queries = [q for q in dataset.manifest.queries if q.video_id in gallery_set]
    text = text64[[q.embedding_row for q in queries]]
    cap_off = np.arange(len(queries) + 1, dtype=np.int64)
    phi = kernels.phi_matrix(vis, vis_off, text, cap_off, np.ones(len(queries)), 1.0)
    sim = SimilarityMatrix(np.clip(phi.T, -1.0, 1.0),
                           [q.query_id for q in queries], gallery)
    gt = {q.query_id: q.video_id for q in queries}
    return recall_at_k(sim, gt, ks, dataset=dataset.name, fingerprint=fingerprint)


def cross_eval(models: dict[str, ProjectionModel], datasets: dict[str, Dataset],
               mode: str, pooling: PoolingConfig, ks=EVAL_KS,
               split: Optional[str] = None,
               include_baseline: bool = True) -> dict[tuple[str, str], EvalReport]:
    """Evaluate every (model, dataset) pair plus a frozen-baseline row."""
    grid: dict[tuple[str, str], EvalReport] = {}
    names = sorted(datasets)
    for ds_name in names:
        ds = datasets[ds_name]
        video_ids = None
        if split is not None and split in ds.manifest.splits:
            video_ids = ds.video_ids(split)
        if include_baseline:
            grid[("frozen", ds_name)] = evaluate(
                ProjectionModel.identity(ds.dim), ds, mode, pooling, ks,
                video_ids, fingerprint="frozen")
        for m_name in sorted(models):
            model = models[m_name]
            if model.dim != ds.dim:
                raise ShapeError(f"model {m_name} dim {model.dim} != dataset "
                                 f"{ds_name} dim {ds.dim}")
            grid[(m_name, ds_name)] = evaluate(
                model, ds, mode, pooling, ks, video_ids, fingerprint=m_name)
    return grid
