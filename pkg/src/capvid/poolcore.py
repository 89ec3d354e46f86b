"""Query-scoring temporal pooling and multi-caption similarity.

These are the reference (single-pair) implementations; the batch
kernels in capvid.kernels compute the same quantities over many pairs
and are property-tested against this module.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, ShapeError

COMBINE_MODES = ("mean", "weighted")
EVAL_MODES = ("mean_pool", "qs", "mcqs")


@dataclass
class PoolingConfig:
    """Temporal pooling temperature, caption-combination mode, and the
    evaluation pooling mode."""

    tau: float = 0.1
    caption_combine: str = "mean"
    combine_temperature: float = 0.1
    eval_mode: str = "qs"

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.caption_combine not in COMBINE_MODES:
            raise ConfigError(f"unknown caption_combine {self.caption_combine!r}")
        if self.combine_temperature <= 0:
            raise ConfigError("combine temperature must be positive")
        if self.eval_mode not in EVAL_MODES:
            raise ConfigError(f"unknown eval_mode {self.eval_mode!r}")


def _as_matrix(frames) -> np.ndarray:
    mat = np.asarray(frames, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] < 1:
        raise ShapeError(f"expected a (N, d) frame matrix, got shape {mat.shape}")
    return mat


def _check_vector(vec, dim: int, what: str) -> np.ndarray:
    v = np.asarray(vec, dtype=np.float64)
    if v.shape != (dim,):
        raise ShapeError(f"{what} has shape {v.shape}, expected ({dim},)")
    if np.linalg.norm(v) == 0.0:
        raise DataError(f"zero-norm {what}")
    return v


def softmax(logits: np.ndarray) -> np.ndarray:
    """Exact softmax, computed with max-subtraction for stability."""
    shifted = logits - np.max(logits)
    e = np.exp(shifted)
    return e / np.sum(e)


def qs_weights(frames, text, tau: float) -> np.ndarray:
    """Per-frame pooling weights: softmax over cos(frame, text) / tau."""
    mat = _as_matrix(frames)
    txt = _check_vector(text, mat.shape[1], "text vector")
    norms = np.linalg.norm(mat, axis=1)
    if np.any(norms == 0.0):
        raise DataError("zero-norm frame vector")
    if tau <= 0:
        raise ConfigError("tau must be positive")
    cosines = mat @ txt / (norms * np.linalg.norm(txt))
    return softmax(cosines / tau)


def qs_pool(frames, text, tau: float) -> np.ndarray:
    """Text-conditioned temporal pooling: sum_n w_n * frame_n.

    The pooled vector is deliberately not re-normalized; the cosine at
    the next stage normalizes.
    """
    mat = _as_matrix(frames)
    w = qs_weights(mat, text, tau)
    return w @ mat


def _cosine(a: np.ndarray, b: np.ndarray, what: str = "vector") -> float:
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DataError(f"cosine undefined: zero-norm {what}")
    return float(np.dot(a, b) / (na * nb))


def combine_weights(config: PoolingConfig, count: int, clipscores=None) -> np.ndarray:
    """Per-caption combination weights: uniform 1/L, or a softmax over
    raw clipscores at the configured temperature."""
    if config.caption_combine == "weighted":
        if clipscores is None:
            raise ConfigError("weighted caption combination requires clipscores")
        scores = np.asarray(clipscores, dtype=np.float64)
        if scores.shape != (count,):
            raise ShapeError(f"expected {count} clipscores, got shape {scores.shape}")
        return softmax(scores / config.combine_temperature)
    return np.full(count, 1.0 / count)


def mcqs_similarity(frames, captions, config: PoolingConfig, clipscores=None) -> float:
    """Multi-caption query-scoring similarity between one video's frames
    and a set of caption embeddings: each caption pools the frames by
    query-scoring, its cosine is taken, and the L cosines are combined.
    """
    mat = _as_matrix(frames)
    caps = np.asarray(captions, dtype=np.float64)
    if caps.ndim == 1:
        caps = caps[None, :]
    if caps.ndim != 2 or caps.shape[0] < 1:
        raise ShapeError(f"expected a (L, d) caption matrix, got shape {caps.shape}")
    if caps.shape[1] != mat.shape[1]:
        raise ShapeError(f"caption dim {caps.shape[1]} != frame dim {mat.shape[1]}")
    weights = combine_weights(config, caps.shape[0], clipscores)
    total = 0.0
    for l in range(caps.shape[0]):
        pooled = qs_pool(mat, caps[l], config.tau)
        total += weights[l] * _cosine(pooled, caps[l], "pooled vector")
    return float(total)


def mean_pool_similarity(frames, text) -> float:
    """Cosine between the plain frame mean and the text embedding."""
    mat = _as_matrix(frames)
    txt = _check_vector(text, mat.shape[1], "text vector")
    if np.any(np.linalg.norm(mat, axis=1) == 0.0):
        raise DataError("zero-norm frame vector")
    mean = mat.mean(axis=0)
    return _cosine(mean, txt, "frame mean")
