"""Deterministic codebook tokenizer: k-means over 50 Hz log-mel frames of
clean speech, then per-frame nearest-centroid quantization. Stands behind a
small interface so a pretrained tokenizer can replace it without touching
downstream modules.

No robustness to degradation is claimed for these tokens; purifying them
from degraded audio is the job of the language-model stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dsp import AudioBuffer, MelConfig, TOKENIZER_MEL, mel_spectrogram

DEFAULT_K = 512


@dataclass
class Codebook:
    centroids: np.ndarray  # (K, D)
    version: str = "km-1"

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 2:
            raise ValueError("centroids must be (K >= 2, D)")
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("non-finite centroids")

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


@dataclass
class SemanticTokenSeq:
    ids: np.ndarray
    frame_rate: float = 50.0
    source: str = "clean_reference"  # clean_reference | saslm_generated | prompt

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.ids)


def mel_frames(audio: AudioBuffer, cfg: MelConfig = TOKENIZER_MEL) -> np.ndarray:
    """(T, D) log-mel feature matrix at the token frame rate."""
    return mel_spectrogram(audio, cfg).values.T


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        probs = d2 / d2.sum() if d2.sum() > 0 else np.full(n, 1.0 / n)
        centers[i] = x[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, np.sum((x - centers[i]) ** 2, axis=1))
    return centers


def _assign(x: np.ndarray, centers: np.ndarray, chunk: int = 256) -> np.ndarray:
    # exact squared distances, chunked over rows; argmin breaks ties toward the lowest id
    out = np.empty(x.shape[0], dtype=np.int64)
    for i in range(0, x.shape[0], chunk):
        d2 = np.sum((x[i : i + chunk, None, :] - centers[None, :, :]) ** 2, axis=2)
        out[i : i + chunk] = np.argmin(d2, axis=1)
    return out


def kmeans(x: np.ndarray, k: int, rng: np.random.Generator,
           max_iters: int = 50, tol: float = 1e-6) -> np.ndarray:
    """Lloyd iterations with k-means++ seeding; stops at max_iters or when the
    relative centroid shift drops below tol."""
    centers = _kmeans_pp_init(x, k, rng)
    for _ in range(max_iters):
        labels = _assign(x, centers)
        new_centers = centers.copy()
        for j in range(k):
            members = x[labels == j]
            if len(members):
                new_centers[j] = members.mean(axis=0)
        shift = np.linalg.norm(new_centers - centers) / (np.linalg.norm(centers) + 1e-12)
        centers = new_centers
        if shift < tol:
            break
    return centers


def train_codebook(corpus: list[AudioBuffer], k: int, rng: np.random.Generator,
                   cfg: MelConfig = TOKENIZER_MEL) -> Codebook:
    frames = np.concatenate([mel_frames(a, cfg) for a in corpus], axis=0)
    if frames.shape[0] < 10 * k:
        raise ValueError(
            f"too few frames for k={k}: have {frames.shape[0]}, need >= {10 * k}"
        )
    return Codebook(kmeans(frames, k, rng))


def tokenize(audio: AudioBuffer, cb: Codebook, cfg: MelConfig = TOKENIZER_MEL,
             source: str = "clean_reference") -> SemanticTokenSeq:
    """Per-frame nearest centroid in Euclidean distance."""
    if audio.sample_rate != cfg.sample_rate:
        raise ValueError(f"expected {cfg.sample_rate} Hz audio, got {audio.sample_rate}")
    frames = mel_frames(audio, cfg)
    return SemanticTokenSeq(
        _assign(frames, cb.centroids),
        frame_rate=cfg.sample_rate / cfg.hop,
        source=source,
    )


class Tokenizer:
    """Pluggable tokenize interface used by downstream stages."""

    def __init__(self, codebook: Codebook, cfg: MelConfig = TOKENIZER_MEL):
        self.codebook = codebook
        self.cfg = cfg

    @property
    def vocab_size(self) -> int:
        return self.codebook.k

    @property
    def frame_rate(self) -> float:
        return self.cfg.sample_rate / self.cfg.hop

    def __call__(self, audio: AudioBuffer, source: str = "clean_reference") -> SemanticTokenSeq:
        return tokenize(audio, self.codebook, self.cfg, source=source)
