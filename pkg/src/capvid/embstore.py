"""Embedding dataset storage: the EMB1 table format, JSONL sidecars,
dataset manifests, and the synthetic dataset generator.

EMB1 layout (little-endian, bit-exact):

    bytes 0-3    magic ASCII "EMB1"
    bytes 4-7    u32 version (= 1)
    bytes 8-11   u32 row_count
    bytes 12-15  u32 dim
    then         row_count * dim IEEE-754 float32, row-major

Tables are immutable after load and safe to share across threads.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataError, FormatError, IoError, SpecError
from .seeding import rng_for

MAGIC = b"EMB1"
VERSION = 1
HEADER = struct.Struct("<4sIII")

PRNG_NAME = "pcg64"


class EmbeddingTable:
    """A contiguous store of fixed-dimension float32 vectors.

    The float32 payload is the on-disk truth; numeric consumers promote
    to float64 at use sites (float32 -> float64 is exact).
    """

    def __init__(self, data: np.ndarray):
        data = np.ascontiguousarray(data, dtype=np.float32)
        if data.ndim != 2:
            raise DataError(f"table data must be 2-D, got shape {data.shape}")
        if data.shape[1] < 1:
            raise DataError("table dim must be positive")
        bad = np.flatnonzero(~np.all(np.isfinite(data), axis=1))
        if bad.size:
            raise DataError(f"non-finite value in row {int(bad[0])}")
        self.data = data
        self.data.setflags(write=False)

    @property
    def row_count(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def row(self, index: int) -> np.ndarray:
        return self.data[index]

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingTable):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(
            np.all(self.data.view(np.uint32) == other.data.view(np.uint32))
        )


def load_table(path) -> EmbeddingTable:
    """Load an EMB1 file, validating header, payload size, and rows.

    Loading is bit-exact; no re-normalization is applied. Rows containing
    NaN/Inf or with zero norm are rejected (cosine similarity downstream
    would be undefined).
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if len(raw) < HEADER.size:
        raise FormatError(f"{path}: file too short for EMB1 header ({len(raw)} bytes)")
    magic, version, row_count, dim = HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dim == 0:
        raise FormatError(f"{path}: dim must be positive")
    expected = HEADER.size + 4 * row_count * dim
    if len(raw) != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes for {row_count}x{dim}, got {len(raw)}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=HEADER.size).reshape(row_count, dim)
    bad = np.flatnonzero(~np.all(np.isfinite(data), axis=1))
    if bad.size:
        raise DataError(f"{path}: non-finite value in row {int(bad[0])}")
    if row_count:
        zero = np.flatnonzero(np.linalg.norm(data.astype(np.float64), axis=1) == 0.0)
        if zero.size:
            raise DataError(f"{path}: zero-norm vector in row {int(zero[0])}")
    return EmbeddingTable(data.copy())


def write_table(table: EmbeddingTable, path) -> None:
    """Write a table in EMB1 format; load_table(write_table(t)) == t bit-exactly."""
    path = Path(path)
    header = HEADER.pack(MAGIC, VERSION, table.row_count, table.dim)
    payload = np.ascontiguousarray(table.data, dtype="<f4").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


@dataclass
class VideoEntry:
    video_id: str
    frame_rows: list[int]
    dataset_tag: str = ""


@dataclass
class CaptionRecord:
    caption_id: str
    video_id: str
    captioner: str
    frame_index: int
    embedding_row: int
    clipscore: float
    text_hash: Optional[str] = None


@dataclass
class QueryRecord:
    query_id: str
    video_id: str
    embedding_row: int


@dataclass
class DatasetManifest:
    """Binds embedding tables, caption pools, queries, and ground truth
    for one dataset. Table paths are relative to the manifest file."""

    name: str
    dim: int
    frame_table: str
    caption_table: str
    query_table: str
    videos: list[VideoEntry] = field(default_factory=list)
    captions: list[CaptionRecord] = field(default_factory=list)
    queries: list[QueryRecord] = field(default_factory=list)
    gt_caption_groups: dict[str, list[int]] = field(default_factory=dict)
    splits: dict[str, list[str]] = field(default_factory=dict)
    prng: dict = field(default_factory=dict)

    def to_json_obj(self) -> dict:
        return {
            "name": self.name,
            "dim": self.dim,
            "frame_table": self.frame_table,
            "caption_table": self.caption_table,
            "query_table": self.query_table,
            "videos": [
                {"video_id": v.video_id, "frame_rows": list(v.frame_rows),
                 "dataset_tag": v.dataset_tag}
                for v in self.videos
            ],
            "captions": [
                {"caption_id": c.caption_id, "video_id": c.video_id,
                 "captioner": c.captioner, "frame_index": c.frame_index,
                 "embedding_row": c.embedding_row, "clipscore": c.clipscore,
                 "text_hash": c.text_hash}
                for c in self.captions
            ],
            "queries": [
                {"query_id": q.query_id, "video_id": q.video_id,
                 "embedding_row": q.embedding_row}
                for q in self.queries
            ],
            "gt_caption_groups": {k: list(v) for k, v in self.gt_caption_groups.items()},
            "splits": {k: list(v) for k, v in self.splits.items()},
            "prng": dict(self.prng),
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "DatasetManifest":
        try:
            return cls(
                name=obj["name"],
                dim=int(obj["dim"]),
                frame_table=obj["frame_table"],
                caption_table=obj["caption_table"],
                query_table=obj["query_table"],
                videos=[VideoEntry(v["video_id"], [int(r) for r in v["frame_rows"]],
                                   v.get("dataset_tag", ""))
                        for v in obj.get("videos", [])],
                captions=[CaptionRecord(c["caption_id"], c["video_id"], c["captioner"],
                                        int(c["frame_index"]), int(c["embedding_row"]),
                                        float(c["clipscore"]), c.get("text_hash"))
                          for c in obj.get("captions", [])],
                queries=[QueryRecord(q["query_id"], q["video_id"], int(q["embedding_row"]))
                         for q in obj.get("queries", [])],
                gt_caption_groups={k: [int(r) for r in v]
                                   for k, v in obj.get("gt_caption_groups", {}).items()},
                splits={k: list(v) for k, v in obj.get("splits", {}).items()},
                prng=obj.get("prng", {}),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed manifest: {exc}") from exc


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    text = json.dumps(manifest.to_json_obj(), sort_keys=True, separators=(",", ":"))
    try:
        path.write_text(text + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    return DatasetManifest.from_json_obj(obj)


def validate_manifest(manifest: DatasetManifest, frames: EmbeddingTable,
                      captions: EmbeddingTable, queries: EmbeddingTable) -> None:
    """Reject dangling row references and broken invariants."""
    for table, label in ((frames, "frame"), (captions, "caption"), (queries, "query")):
        if table.dim != manifest.dim:
            raise FormatError(
                f"{label} table dim {table.dim} != manifest dim {manifest.dim}")
    video_ids = set()
    for v in manifest.videos:
        if v.video_id in video_ids:
            raise FormatError(f"duplicate video_id {v.video_id}")
        video_ids.add(v.video_id)
        if not v.frame_rows:
            raise FormatError(f"video {v.video_id} has no frames")
        prev = -1
        for r in v.frame_rows:
            if not 0 <= r < frames.row_count:
                raise FormatError(f"video {v.video_id}: frame row {r} out of range")
            if r <= prev:
                raise FormatError(f"video {v.video_id}: frame rows not strictly increasing")
            prev = r
    seen_frames: dict[tuple[str, str], set[int]] = {}
    for c in manifest.captions:
        if c.video_id not in video_ids:
            raise FormatError(f"caption {c.caption_id}: unknown video {c.video_id}")
        if not 0 <= c.embedding_row < captions.row_count:
            raise FormatError(f"caption {c.caption_id}: row {c.embedding_row} out of range")
        if c.clipscore < 0:
            raise FormatError(f"caption {c.caption_id}: negative clipscore")
        if c.frame_index < 0:
            raise FormatError(f"caption {c.caption_id}: negative frame_index")
        key = (c.video_id, c.captioner)
        used = seen_frames.setdefault(key, set())
        if c.frame_index in used:
            raise FormatError(
                f"caption {c.caption_id}: duplicate frame_index {c.frame_index} "
                f"for ({c.video_id}, {c.captioner})")
        used.add(c.frame_index)
    query_video: dict[int, str] = {}
    for q in manifest.queries:
        if q.video_id not in video_ids:
            raise FormatError(f"query {q.query_id}: unknown video {q.video_id}")
        if not 0 <= q.embedding_row < queries.row_count:
            raise FormatError(f"query {q.query_id}: row {q.embedding_row} out of range")
        query_video[q.embedding_row] = q.video_id
    for vid, rows in manifest.gt_caption_groups.items():
        if vid not in video_ids:
            raise FormatError(f"gt group references unknown video {vid}")
        for r in rows:
            if not 0 <= r < queries.row_count:
                raise FormatError(f"gt group for {vid}: query row {r} out of range")
            if query_video.get(r) != vid:
                raise FormatError(f"gt group for {vid}: query row {r} belongs elsewhere")
    for split, vids in manifest.splits.items():
        for vid in vids:
            if vid not in video_ids:
                raise FormatError(f"split {split} references unknown video {vid}")


class Dataset:
    """A manifest with its three tables loaded and indexed."""

    def __init__(self, manifest: DatasetManifest, frames: EmbeddingTable,
                 captions: EmbeddingTable, queries: EmbeddingTable):
        validate_manifest(manifest, frames, captions, queries)
        self.manifest = manifest
        self.frames = frames
        self.captions = captions
        self.queries = queries
        # float64 working copies for all numeric consumers
        self.frames64 = frames.data.astype(np.float64)
        self.captions64 = captions.data.astype(np.float64)
        self.queries64 = queries.data.astype(np.float64)
        self.video_by_id = {v.video_id: v for v in manifest.videos}
        self.captions_by_video: dict[str, list[CaptionRecord]] = {
            v.video_id: [] for v in manifest.videos}
        for c in manifest.captions:
            self.captions_by_video[c.video_id].append(c)

    @property
    def name(self) -> str:
        return self.manifest.name

    @property
    def dim(self) -> int:
        return self.manifest.dim

    def video_ids(self, split: Optional[str] = None) -> list[str]:
        if split is None:
            return [v.video_id for v in self.manifest.videos]
        if split not in self.manifest.splits:
            raise SpecError(f"dataset {self.name} has no split {split!r}")
        return list(self.manifest.splits[split])

    def frame_matrix(self, video_id: str) -> np.ndarray:
        return self.frames64[self.video_by_id[video_id].frame_rows]


def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path)
    base = manifest_path.parent
    frames = load_table(base / manifest.frame_table)
    captions = load_table(base / manifest.caption_table)
    queries = load_table(base / manifest.query_table)
    return Dataset(manifest, frames, captions, queries)


@dataclass
class SynthSpec:
    """Parameters of a synthetic embedding dataset.

    Concept vectors live in the leading `signal_dim` coordinates while
    frame/caption/query noise is full-dimension, so a linear projection
    has real structure to learn. Junk captions are drawn around fresh
    in-subspace concepts, modeling captioner output that describes
    something other than the frame.

    `modality_gap` models an imperfectly aligned backbone: text-side
    anchors (captions and queries) are the concept partially rotated
    inside the signal subspace by a fixed map shared by every synthetic
    dataset, so a trained text head can undo it and the correction
    transfers across datasets and held-out videos.
    """

    videos: int
    dim: int
    frames_per_video: int = 5
    captions_per_captioner: int = 10
    captioners: tuple = ("synthcap-a", "synthcap-b")
    sigma_frame: float = 0.2
    sigma_caption: float = 0.3
    p_junk: float = 0.5
    queries_per_video: int = 2
    signal_dim: Optional[int] = None
    eval_fraction: float = 0.25
    modality_gap: float = 0.5
    name: str = "synth"

    def resolved_signal_dim(self) -> int:
        if self.signal_dim is None:
            return max(2, (3 * self.dim) // 8)
        return self.signal_dim

    def validate(self) -> None:
        if self.videos < 1:
            raise SpecError("videos must be >= 1")
        if self.dim < 1:
            raise SpecError("dim must be >= 1")
        if self.frames_per_video < 1:
            raise SpecError("frames_per_video must be >= 1")
        if self.captions_per_captioner < 1:
            raise SpecError("captions_per_captioner must be >= 1")
        if not self.captioners:
            raise SpecError("at least one captioner label required")
        if not 0.0 <= self.p_junk <= 1.0:
            raise SpecError("p_junk must lie in [0, 1]")
        if self.sigma_frame < 0 or self.sigma_caption < 0:
            raise SpecError("noise levels must be non-negative")
        if self.queries_per_video < 1:
            raise SpecError("queries_per_video must be >= 1")
        if not 0.0 <= self.eval_fraction < 1.0:
            raise SpecError("eval_fraction must lie in [0, 1)")
        if not 1 <= self.resolved_signal_dim() <= self.dim:
            raise SpecError("signal_dim must lie in [1, dim]")
        if not 0.0 <= self.modality_gap < 1.0:
            raise SpecError("modality_gap must lie in [0, 1)")


def _unit(vec: np.ndarray) -> np.ndarray:
    return vec / np.linalg.norm(vec)


def _noisy_unit(base: np.ndarray, sigma: float, rng: np.random.Generator,
                dim: int) -> np.ndarray:
    return _unit(base + sigma * rng.standard_normal(dim))


# Fixed seed of the universal text-anchor rotation; independent of the
# dataset seed so every synthetic dataset shares one modality gap.
_TEXT_MAP_SEED = 0x7E57


def text_anchor_map(dim: int, signal_dim: int, modality_gap: float) -> np.ndarray:
    """The (dim, dim) map applied to concepts on the text side.

    An orthogonal partial rotation of the signal subspace: every plane
    of a fixed random basis is rotated by gap * 90 degrees. Orthogonal
    for any gap, so the gap is exactly undoable by a linear head with
    no noise amplification. Identity when gap is 0.
    """
    mat = np.eye(dim)
    if modality_gap == 0.0 or signal_dim < 2:
        return mat
    rng = rng_for(_TEXT_MAP_SEED, f"synth/text-map/{signal_dim}")
    basis, _ = np.linalg.qr(rng.standard_normal((signal_dim, signal_dim)))
    theta = modality_gap * np.pi / 2.0
    rot = np.eye(signal_dim)
    c, s = np.cos(theta), np.sin(theta)
    for j in range(signal_dim // 2):
        rot[2 * j:2 * j + 2, 2 * j:2 * j + 2] = [[c, -s], [s, c]]
    mat[:signal_dim, :signal_dim] = basis @ rot @ basis.T
    return mat


def synthesize(seed: int, spec: SynthSpec, out_dir) -> DatasetManifest:
    """Generate a synthetic dataset on disk, deterministic in (seed, spec).

    Per-caption clipscores are computed with the engine's own scorer
    against the stored frame nearest in time to the captioned frame.
    """
    from .captionsel import compute_clipscore

    spec.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    d = spec.dim
    sd = spec.resolved_signal_dim()
    v_count = spec.videos
    n_frames = spec.frames_per_video
    m = spec.captions_per_captioner

    rng_concept = rng_for(seed, "synth/concepts")
    rng_frame = rng_for(seed, "synth/frames")
    rng_caption = rng_for(seed, "synth/captions")
    rng_query = rng_for(seed, "synth/queries")
    rng_split = rng_for(seed, "synth/split")

    concepts = np.zeros((v_count, d))
    concepts[:, :sd] = rng_concept.standard_normal((v_count, sd))
    concepts /= np.linalg.norm(concepts, axis=1, keepdims=True)
    text_map = text_anchor_map(d, sd, spec.modality_gap)
    text_anchors = concepts @ text_map.T
    text_anchors /= np.linalg.norm(text_anchors, axis=1, keepdims=True)

    frame_rows = np.empty((v_count * n_frames, d))
    videos = []
    for i in range(v_count):
        vid = f"v{i:04d}"
        rows = list(range(i * n_frames, (i + 1) * n_frames))
        for r in rows:
            frame_rows[r] = _noisy_unit(concepts[i], spec.sigma_frame, rng_frame, d)
        videos.append(VideoEntry(vid, rows, dataset_tag=spec.name))
    frames_table = EmbeddingTable(frame_rows.astype(np.float32))
    frames64 = frames_table.data.astype(np.float64)

    caption_rows = []
    caption_records = []
    for i in range(v_count):
        vid = videos[i].video_id
        for captioner in spec.captioners:
            for fi in range(m):
                junk = rng_caption.random() < spec.p_junk
                if junk:
                    stray = np.zeros(d)
                    stray[:sd] = rng_caption.standard_normal(sd)
                    base = _unit(text_map @ _unit(stray))
                    phrase = f"junk-{rng_caption.integers(10_000)}-desc{rng_caption.integers(6)}"
                else:
                    base = text_anchors[i]
                    phrase = f"{vid}-{captioner}-desc{rng_caption.integers(6)}"
                emb = _noisy_unit(base, spec.sigma_caption, rng_caption, d)
                row = len(caption_rows)
                caption_rows.append(emb)
                # caption frame fi (of M) maps onto stored frame floor(fi*N/M)
                frame_row = videos[i].frame_rows[(fi * n_frames) // m]
                emb32 = emb.astype(np.float32).astype(np.float64)
                score = compute_clipscore(frames64[frame_row], emb32)
                caption_records.append(CaptionRecord(
                    caption_id=f"{vid}-{captioner}-f{fi:02d}",
                    video_id=vid,
                    captioner=captioner,
                    frame_index=fi,
                    embedding_row=row,
                    clipscore=score,
                    text_hash=hashlib.sha256(phrase.encode()).hexdigest()[:16],
                ))
    captions_table = EmbeddingTable(np.asarray(caption_rows, dtype=np.float32))

    query_rows = []
    query_records = []
    gt_groups: dict[str, list[int]] = {}
    for i in range(v_count):
        vid = videos[i].video_id
        group = []
        for qi in range(spec.queries_per_video):
            row = len(query_rows)
            query_rows.append(_noisy_unit(text_anchors[i], spec.sigma_caption,
                                          rng_query, d))
            query_records.append(QueryRecord(f"q{row:05d}", vid, row))
            group.append(row)
        gt_groups[vid] = group
    queries_table = EmbeddingTable(np.asarray(query_rows, dtype=np.float32))

    order = rng_split.permutation(v_count)
    n_test = int(round(v_count * spec.eval_fraction))
    test_ids = sorted(videos[int(i)].video_id for i in order[:n_test])
    train_ids = sorted(videos[int(i)].video_id for i in order[n_test:])

    manifest = DatasetManifest(
        name=spec.name,
        dim=d,
        frame_table="frames.emb1",
        caption_table="captions.emb1",
        query_table="queries.emb1",
        videos=videos,
        captions=caption_records,
        queries=query_records,
        gt_caption_groups=gt_groups,
        splits={"train": train_ids, "test": test_ids},
        prng={"algorithm": PRNG_NAME, "seed": int(seed)},
    )
    validate_manifest(manifest, frames_table, captions_table, queries_table)

    write_table(frames_table, out_dir / manifest.frame_table)
    write_table(captions_table, out_dir / manifest.caption_table)
    write_table(queries_table, out_dir / manifest.query_table)
    _write_sidecars(out_dir, manifest)
    write_manifest(manifest, out_dir / "manifest.json")
    return manifest


def _write_sidecars(out_dir: Path, manifest: DatasetManifest) -> None:
    """One JSONL object per table row, so tables are interpretable alone."""
    frame_meta: dict[int, dict] = {}
    for v in manifest.videos:
        for j, r in enumerate(v.frame_rows):
            frame_meta[r] = {"video_id": v.video_id, "frame_index": j}
    _dump_jsonl(out_dir / "frames.jsonl",
                [frame_meta[r] for r in sorted(frame_meta)])
    _dump_jsonl(out_dir / "captions.jsonl", [
        {"caption_id": c.caption_id, "video_id": c.video_id, "captioner": c.captioner,
         "frame_index": c.frame_index, "clipscore": c.clipscore,
         "text_hash": c.text_hash}
        for c in sorted(manifest.captions, key=lambda c: c.embedding_row)
    ])
    _dump_jsonl(out_dir / "queries.jsonl", [
        {"query_id": q.query_id, "video_id": q.video_id}
        for q in sorted(manifest.queries, key=lambda q: q.embedding_row)
    ])


def _dump_jsonl(path: Path, objs: list[dict]) -> None:
    try:
        with open(path, "w") as fh:
            for obj in objs:
                fh.write(json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
