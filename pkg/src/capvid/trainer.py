"""Dual projection-head training with a symmetric InfoNCE objective
over multi-caption query-scoring similarities.

The heads are per-modality affine maps initialized to identity, so the
untrained model reproduces the frozen baseline exactly. All training
math runs in float64; gradients are analytic (see capvid.kernels) and
checked against finite differences in the test suite.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import kernels
from .captionsel import CaptionPool, SelectionStrategy, select_dataset
from .embstore import Dataset
from .errors import (ConfigError, DivergenceError, EmptyBatchError,
                     EmptyDatasetError, FormatError, IoError, ShapeError)
from .poolcore import PoolingConfig, combine_weights
from .seeding import rng_for

CKPT_MAGIC = b"CKPT"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sII")


@dataclass
class ProjectionModel:
    """Trainable affine maps standing in for finetuned encoders on top
    of frozen backbone embeddings."""

    w_visual: np.ndarray
    b_visual: np.ndarray
    w_text: np.ndarray
    b_text: np.ndarray
    dim: int

    @classmethod
    def identity(cls, dim: int) -> "ProjectionModel":
        return cls(np.eye(dim), np.zeros(dim), np.eye(dim), np.zeros(dim), dim)

    def copy(self) -> "ProjectionModel":
        return ProjectionModel(self.w_visual.copy(), self.b_visual.copy(),
                               self.w_text.copy(), self.b_text.copy(), self.dim)

    def params(self) -> dict[str, np.ndarray]:
        return {"w_visual": self.w_visual, "b_visual": self.b_visual,
                "w_text": self.w_text, "b_text": self.b_text}

    def check_finite(self) -> None:
        for name, p in self.params().items():
            if not np.all(np.isfinite(p)):
                raise DivergenceError(-1, f"non-finite parameter {name}")

    def project(self, rows: np.ndarray, modality: str) -> np.ndarray:
        """Affine map of a (n, dim) matrix of raw embeddings."""
        if rows.shape[-1] != self.dim:
            raise ShapeError(f"input dim {rows.shape[-1]} != model dim {self.dim}")
        if modality == "visual":
            return rows @ self.w_visual.T + self.b_visual
        if modality == "text":
            return rows @ self.w_text.T + self.b_text
        raise ConfigError(f"unknown modality {modality!r}")


def forward_embed(model: ProjectionModel, raw, modality: str) -> np.ndarray:
    """Project one raw embedding through the named modality head."""
    vec = np.asarray(raw, dtype=np.float64)
    if vec.shape != (model.dim,):
        raise ShapeError(f"input shape {vec.shape}, expected ({model.dim},)")
    return model.project(vec[None, :], modality)[0]


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 10
    lr0: float = 0.02
    infonce_temperature: float = 0.2
    pooling: PoolingConfig = field(default_factory=PoolingConfig)
    strategy: SelectionStrategy = field(
        default_factory=lambda: SelectionStrategy(
            "top_k_per_captioner", ["synthcap-a", "synthcap-b"], k=2))
    seed: int = 0
    warmup_steps: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.lr0 < 0:
            raise ConfigError("lr0 must be >= 0")
        if self.infonce_temperature <= 0:
            raise ConfigError("infonce_temperature must be positive")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")


@dataclass
class LossBreakdown:
    l_v2c: float
    l_c2v: float

    @property
    def total(self) -> float:
        return self.l_v2c + self.l_c2v


def _logsumexp(row: np.ndarray) -> float:
    hi = np.max(row)
    return float(hi + np.log(np.sum(np.exp(row - hi))))


def infonce_from_phi(phi: np.ndarray, temperature: float) -> LossBreakdown:
    """Symmetric cross-entropy over a square similarity matrix whose
    diagonal holds the positive pairs."""
    if phi.ndim != 2 or phi.shape[0] != phi.shape[1] or phi.shape[0] == 0:
        raise ShapeError(f"expected a square non-empty matrix, got {phi.shape}")
    b = phi.shape[0]
    g = phi / temperature
    l_v2c = sum(_logsumexp(g[i]) - g[i, i] for i in range(b)) / b
    l_c2v = sum(_logsumexp(g[:, j]) - g[j, j] for j in range(b)) / b
    return LossBreakdown(l_v2c, l_c2v)


def infonce_phi_grad(phi: np.ndarray, temperature: float) -> np.ndarray:
    """d(total loss)/dPhi for the symmetric InfoNCE objective."""
    b = phi.shape[0]
    g = phi / temperature
    rows = np.exp(g - g.max(axis=1, keepdims=True))
    rows /= rows.sum(axis=1, keepdims=True)
    cols = np.exp(g - g.max(axis=0, keepdims=True))
    cols /= cols.sum(axis=0, keepdims=True)
    eye = np.eye(b)
    return ((rows - eye) + (cols - eye)) / (b * temperature)


def _unpack_batch(batch) -> list[tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]]:
    if len(batch) == 0:
        raise EmptyBatchError("batch has no samples")
    out = []
    for item in batch:
        if len(item) == 2:
            frames, caps = item
            scores = None
        else:
            frames, caps, scores = item
        frames = np.asarray(frames, dtype=np.float64)
        caps = np.asarray(caps, dtype=np.float64)
        if caps.ndim == 1:
            caps = caps[None, :]
        if scores is not None:
            scores = np.asarray(scores, dtype=np.float64)
        out.append((frames, caps, scores))
    return out


def _project_batch(model: ProjectionModel, samples, pooling: PoolingConfig):
    frames_raw, vis_off = kernels.pack_groups([s[0] for s in samples])
    caps_raw, cap_off = kernels.pack_groups([s[1] for s in samples])
    capw = np.concatenate([
        combine_weights(pooling, s[1].shape[0], s[2]) for s in samples])
    vis = model.project(frames_raw, "visual")
    caps = model.project(caps_raw, "text")
    return frames_raw, caps_raw, vis, vis_off, caps, cap_off, capw


def batch_loss(model: ProjectionModel, batch, config: TrainConfig) -> LossBreakdown:
    """Project a batch and compute the symmetric InfoNCE loss of the
    pairwise multi-caption query-scoring similarity matrix."""
    samples = _unpack_batch(batch)
    _, _, vis, vis_off, caps, cap_off, capw = _project_batch(
        model, samples, config.pooling)
    phi = kernels.phi_matrix(vis, vis_off, caps, cap_off, capw,
                             config.pooling.tau)
    return infonce_from_phi(phi, config.infonce_temperature)


@dataclass
class Gradients:
    w_visual: np.ndarray
    b_visual: np.ndarray
    w_text: np.ndarray
    b_text: np.ndarray


def _loss_and_grad(model, samples, config) -> tuple[LossBreakdown, Gradients]:
    frames_raw, caps_raw, vis, vis_off, caps, cap_off, capw = _project_batch(
        model, samples, config.pooling)
    phi = kernels.phi_matrix(vis, vis_off, caps, cap_off, capw,
                             config.pooling.tau)
    loss = infonce_from_phi(phi, config.infonce_temperature)
    dphi = infonce_phi_grad(phi, config.infonce_temperature)
    dvis, dcaps = kernels.phi_backward(vis, vis_off, caps, cap_off, capw,
                                       config.pooling.tau, dphi)
    grads = Gradients(
        w_visual=dvis.T @ frames_raw,
        b_visual=dvis.sum(axis=0),
        w_text=dcaps.T @ caps_raw,
        b_text=dcaps.sum(axis=0),
    )
    return loss, grads


def batch_gradient(model: ProjectionModel, batch, config: TrainConfig) -> Gradients:
    """Exact gradient of the batch loss w.r.t. every model parameter."""
    samples = _unpack_batch(batch)
    _, grads = _loss_and_grad(model, samples, config)
    return grads


def cosine_lr(step: int, total_steps: int, lr0: float, warmup_steps: int = 0) -> float:
    """Linear warmup for warmup_steps, then cosine decay to zero at
    t = total_steps - warmup_steps."""
    if warmup_steps > 0 and step < warmup_steps:
        return lr0 * (step + 1) / warmup_steps
    horizon = total_steps - warmup_steps
    if horizon <= 0:
        return lr0
    t = min(step - warmup_steps, horizon)
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / horizon))


class AdamState:
    """Per-parameter first/second moment accumulators."""

    def __init__(self, model: ProjectionModel):
        self.m = {k: np.zeros_like(v) for k, v in model.params().items()}
        self.v = {k: np.zeros_like(v) for k, v in model.params().items()}
        self.t = 0

    def step(self, model: ProjectionModel, grads: Gradients, lr: float,
             beta1: float, beta2: float, eps: float) -> None:
        self.t += 1
        gmap = {"w_visual": grads.w_visual, "b_visual": grads.b_visual,
                "w_text": grads.w_text, "b_text": grads.b_text}
        bc1 = 1.0 - beta1 ** self.t
        bc2 = 1.0 - beta2 ** self.t
        for name, param in model.params().items():
            g = gmap[name]
            self.m[name] = beta1 * self.m[name] + (1.0 - beta1) * g
            self.v[name] = beta2 * self.v[name] + (1.0 - beta2) * g * g
            mhat = self.m[name] / bc1
            vhat = self.v[name] / bc2
            param -= lr * mhat / (np.sqrt(vhat) + eps)


@dataclass
class VideoSample:
    """Pre-extracted training arrays for one video."""

    video_id: str
    frames: np.ndarray
    candidates: np.ndarray
    clipscores: Optional[np.ndarray]
    sample_one: bool


def _samples_from_selection(dataset: Dataset, pools: dict[str, CaptionPool],
                            video_ids: list[str]) -> list[VideoSample]:
    out = []
    for vid in video_ids:
        pool = pools[vid]
        if not pool.selected:
            continue
        rows = [c.embedding_row for c in pool.selected]
        out.append(VideoSample(
            video_id=vid,
            frames=dataset.frame_matrix(vid),
            candidates=dataset.captions64[rows],
            clipscores=np.array([c.clipscore for c in pool.selected]),
            sample_one=pool.sample_one_per_step,
        ))
    return out


def _gt_samples(dataset: Dataset, video_ids: list[str],
                sample_one: bool) -> list[VideoSample]:
    out = []
    for vid in video_ids:
        rows = dataset.manifest.gt_caption_groups.get(vid)
        if not rows:
            continue
        out.append(VideoSample(
            video_id=vid,
            frames=dataset.frame_matrix(vid),
            candidates=dataset.queries64[rows],
            clipscores=None,
            sample_one=sample_one,
        ))
    return out


def _materialize(sample: VideoSample, rng: np.random.Generator):
    if sample.sample_one and sample.candidates.shape[0] > 1:
        idx = int(rng.integers(sample.candidates.shape[0]))
        scores = (sample.clipscores[idx:idx + 1]
                  if sample.clipscores is not None else None)
        return (sample.frames, sample.candidates[idx:idx + 1], scores)
    return (sample.frames, sample.candidates, sample.clipscores)


def _run_training(samples: list[VideoSample], config: TrainConfig,
                  model: ProjectionModel,
                  eval_hook: Optional[Callable] = None):
    if not samples:
        raise EmptyDatasetError("no trainable videos")
    if config.pooling.caption_combine == "weighted":
        if any(s.clipscores is None for s in samples):
            raise ConfigError("weighted caption combination requires clipscores")
    n = len(samples)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    order_rng = rng_for(config.seed, "train/batch-order")
    draw_rng = rng_for(config.seed, "train/caption-draw")
    adam = AdamState(model)
    log = []
    step = 0
    for epoch in range(config.epochs):
        perm = order_rng.permutation(n)
        epoch_losses = []
        lr = config.lr0
        for start in range(0, n, config.batch_size):
            batch_ids = perm[start:start + config.batch_size]
            batch = [_materialize(samples[int(i)], draw_rng) for i in batch_ids]
            loss, grads = _loss_and_grad(model, batch, config)
            if not math.isfinite(loss.total):
                raise DivergenceError(step)
            lr = cosine_lr(step, total_steps, config.lr0, config.warmup_steps)
            adam.step(model, grads, lr, config.beta1, config.beta2,
                      config.adam_eps)
            epoch_losses.append(loss.total)
            step += 1
        entry = {"epoch": epoch, "mean_loss": float(np.mean(epoch_losses)),
                 "lr": lr}
        if eval_hook is not None:
            entry.update(eval_hook(model, epoch))
        log.append(entry)
    return model, log


def train(datasets: list[Dataset], config: TrainConfig,
          selections: Optional[dict[str, dict[str, CaptionPool]]] = None,
          eval_hook: Optional[Callable] = None):
    """Train projection heads from identity initialization on the union
    of the datasets' training videos.

    Batches are drawn uniformly without replacement within an epoch over
    the combined video list, so dataset proportions emerge from their
    sizes. Deterministic given (seed, config, data).
    """
    if not datasets:
        raise EmptyDatasetError("no datasets supplied")
    dims = {d.dim for d in datasets}
    if len(dims) != 1:
        raise ShapeError(f"datasets disagree on dim: {sorted(dims)}")
    samples: list[VideoSample] = []
    for ds in datasets:
        if selections is not None and ds.name in selections:
            pools = selections[ds.name]
        else:
            pools = select_dataset(ds, config.strategy)
        split = "train" if "train" in ds.manifest.splits else None
        samples.extend(_samples_from_selection(ds, pools, ds.video_ids(split)))
    model = ProjectionModel.identity(dims.pop())
    return _run_training(samples, config, model, eval_hook)


def finetune_gt(model: ProjectionModel, dataset: Dataset, config: TrainConfig,
                gt_mode: str = "mcqs", eval_hook: Optional[Callable] = None):
    """Continue training from an existing model using ground-truth
    caption groups instead of automatic captions.

    gt_mode "mcqs" uses every ground-truth caption of a video at once;
    "single" draws one per step.
    """
    if gt_mode not in ("mcqs", "single"):
        raise ConfigError(f"unknown gt_mode {gt_mode!r}")
    if not dataset.manifest.gt_caption_groups:
        raise ConfigError(f"dataset {dataset.name} has no gt_caption_groups")
    if config.pooling.caption_combine == "weighted":
        raise ConfigError("ground-truth captions carry no clipscores; "
                          "weighted combination unavailable")
    split = "train" if "train" in dataset.manifest.splits else None
    samples = _gt_samples(dataset, dataset.video_ids(split),
                          sample_one=(gt_mode == "single"))
    return _run_training(samples, config, model.copy(), eval_hook)


def save_checkpoint(model: ProjectionModel, path, config_hash: str = "",
                    steps: int = 0) -> None:
    """EMB1-style container: magic, version, JSON header, then the four
    parameter tensors as little-endian float64."""
    header = json.dumps({"dim": model.dim, "steps": steps,
                         "config_hash": config_hash, "dtype": "<f8"},
                        sort_keys=True).encode()
    try:
        with open(path, "wb") as fh:
            fh.write(_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(header)))
            fh.write(header)
            for name in ("w_visual", "b_visual", "w_text", "b_text"):
                fh.write(np.ascontiguousarray(
                    model.params()[name], dtype="<f8").tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_checkpoint(path) -> tuple[ProjectionModel, dict]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if len(raw) < _CKPT_HEADER.size:
        raise FormatError(f"{path}: too short for a checkpoint header")
    magic, version, hlen = _CKPT_HEADER.unpack_from(raw, 0)
    if magic != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    try:
        header = json.loads(raw[_CKPT_HEADER.size:_CKPT_HEADER.size + hlen])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: bad header JSON: {exc}") from exc
    dim = int(header["dim"])
    offset = _CKPT_HEADER.size + hlen
    expected = offset + 8 * (2 * dim * dim + 2 * dim)
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, got {len(raw)}")
    def take(count, shape):
        nonlocal offset
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        offset += 8 * count
        return arr.reshape(shape).copy()
    model = ProjectionModel(
        w_visual=take(dim * dim, (dim, dim)),
        b_visual=take(dim, (dim,)),
        w_text=take(dim * dim, (dim, dim)),
        b_text=take(dim, (dim,)),
        dim=dim,
    )
    model.check_finite()
    return model, header
