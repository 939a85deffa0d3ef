"""Waveform and spectral primitives: STFT, log-mel analysis, resampling,
WAV I/O and a Griffin-Lim phase-reconstruction vocoder.

Framing convention, fixed repo-wide: periodic Hann window, no center
padding, T = floor((len - win) / hop) + 1. Mel filterbank rows are
L1-normalized; log-mels use the natural log with an amplitude floor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

ALLOWED_RATES = (2000, 4000, 8000, 16000, 22050, 24000)

LOG_FLOOR = 1e-5


@dataclass(frozen=True)
class AudioBuffer:
    """Mono waveform. samples is a float64 array in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64))
        if self.samples.ndim != 1:
            raise ValueError(f"expected mono 1-D samples, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples contain non-finite values")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int
    n_fft: int
    hop: int
    win: int
    n_mels: int
    fmin: float
    fmax: float
    log_floor: float = LOG_FLOOR
    name: str = ""

    def __post_init__(self):
        if not (self.hop <= self.win <= self.n_fft):
            raise ValueError("need hop <= win <= n_fft")
        if not (0 <= self.fmin < self.fmax <= self.sample_rate / 2):
            raise ValueError("need 0 <= fmin < fmax <= nyquist")

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.win:
            raise ValueError("input too short")
        return (n_samples - self.win) // self.hop + 1


# Tokenizer profile: 16 kHz, 50 Hz frame rate (hop 320).
TOKENIZER_MEL = MelConfig(
    sample_rate=16000, n_fft=1024, hop=320, win=640,
    n_mels=80, fmin=0.0, fmax=8000.0, name="tokenizer",
)

# Acoustic profile for the flow-matching path: 24 kHz.
ACOUSTIC_MEL = MelConfig(
    sample_rate=24000, n_fft=1024, hop=256, win=1024,
    n_mels=100, fmin=0.0, fmax=12000.0, name="acoustic",
)

MEL_PROFILES = {"tokenizer": TOKENIZER_MEL, "acoustic": ACOUSTIC_MEL}


@dataclass
class MelSpectrogram:
    """F x T log-amplitude matrix under a named MelConfig."""

    values: np.ndarray
    config: MelConfig

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != self.config.n_mels:
            raise ValueError(
                f"expected shape ({self.config.n_mels}, T), got {self.values.shape}"
            )

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def _hann_periodic(win: int) -> np.ndarray:
    n = np.arange(win)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / win)


def _frame(samples: np.ndarray, cfg: MelConfig) -> np.ndarray:
    """(T, win) view of the signal under the repo framing convention."""
    t = cfg.n_frames(len(samples))
    idx = np.arange(cfg.win)[None, :] + cfg.hop * np.arange(t)[:, None]
    return samples[idx]


def stft(audio: AudioBuffer, cfg: MelConfig) -> np.ndarray:
    """Complex STFT of shape (n_fft/2 + 1, T). Window zero-padded to n_fft."""
    if len(audio) < cfg.win:
        raise ValueError("input too short")
    frames = _frame(audio.samples, cfg) * _hann_periodic(cfg.win)
    spec = np.fft.rfft(frames, n=cfg.n_fft, axis=1)
    return spec.T


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """(n_mels, n_fft/2 + 1) triangular bank on [fmin, fmax], rows L1-normalized."""
    n_freqs = cfg.n_fft // 2 + 1
    freqs = np.linspace(0.0, cfg.sample_rate / 2.0, n_freqs)
    mel_pts = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)

    fb = np.zeros((cfg.n_mels, n_freqs))
    for m in range(cfg.n_mels):
        lo, ctr, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (freqs - lo) / max(ctr - lo, 1e-12)
        down = (hi - freqs) / max(hi - ctr, 1e-12)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
    sums = fb.sum(axis=1, keepdims=True)
    sums[sums == 0] = 1.0
    return fb / sums


def mel_spectrogram(audio: AudioBuffer, cfg: MelConfig) -> MelSpectrogram:
    """log(max(filterbank @ |STFT|, log_floor)). Caller must match sample rates."""
    if audio.sample_rate != cfg.sample_rate:
        raise ValueError(
            f"sample rate mismatch: audio {audio.sample_rate} vs config "
            f"{cfg.sample_rate}; resample explicitly"
        )
    mag = np.abs(stft(audio, cfg))
    mel = mel_filterbank(cfg) @ mag
    return MelSpectrogram(np.log(np.maximum(mel, cfg.log_floor)), cfg)


def _istft(spec: np.ndarray, cfg: MelConfig, n_samples: int) -> np.ndarray:
    """Overlap-add inverse of stft() with window-square normalization."""
    window = _hann_periodic(cfg.win)
    frames = np.fft.irfft(spec.T, n=cfg.n_fft, axis=1)[:, : cfg.win]
    out = np.zeros(n_samples)
    norm = np.zeros(n_samples)
    for i in range(frames.shape[0]):
        start = i * cfg.hop
        out[start : start + cfg.win] += frames[i] * window
        norm[start : start + cfg.win] += window**2
    # Clamp the normalizer: near the edges sum(w^2) -> 0 and dividing would
    # blow up inconsistent (phase-estimated) spectra.
    norm = np.maximum(norm, 1e-2 * norm.max())
    return out / norm


def griffin_lim(
    mel: MelSpectrogram,
    cfg: MelConfig,
    n_iters: int = 32,
    peak_norm: float | None = 0.95,
) -> AudioBuffer:
    """Phase-reconstruction vocoder: pseudo-inverse mel -> magnitude STFT ->
    iterative phase refinement. peak_norm=None returns the raw reconstruction."""
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    if mel.config.n_mels != cfg.n_mels:
        raise ValueError("mel/config shape mismatch")
    fb = mel_filterbank(cfg)
    mag = np.clip(np.linalg.pinv(fb) @ np.exp(mel.values), 0.0, None)

    n_samples = (mel.n_frames - 1) * cfg.hop + cfg.win
    spec = mag.astype(np.complex128)  # zero initial phase
    samples = np.zeros(n_samples)
    for _ in range(n_iters):
        samples = _istft(spec, cfg, n_samples)
        buf = AudioBuffer(np.clip(samples, -1e6, 1e6), cfg.sample_rate)
        rebuilt = stft(buf, cfg)
        phase = np.angle(rebuilt)
        spec = mag * np.exp(1j * phase)
    samples = _istft(spec, cfg, n_samples)

    # Taper the edges: the first/last window has incomplete overlap and the
    # phase estimate there produces spikes that would dominate peak scaling.
    fade = min(cfg.win // 2, n_samples // 4)
    if fade > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade) / fade)
        samples[:fade] *= ramp
        samples[-fade:] *= ramp[::-1]

    if peak_norm is not None:
        peak = np.max(np.abs(samples))
        if peak > 1e-12:
            samples = samples * (peak_norm / peak)
    return AudioBuffer(samples, cfg.sample_rate)


class Vocoder:
    """Mel -> waveform interface; lets a neural vocoder replace Griffin-Lim."""

    def __call__(self, mel: MelSpectrogram) -> AudioBuffer:
        raise NotImplementedError


class GriffinLimVocoder(Vocoder):
    def __init__(self, cfg: MelConfig = ACOUSTIC_MEL, n_iters: int = 32):
        self.cfg = cfg
        self.n_iters = n_iters

    def __call__(self, mel: MelSpectrogram) -> AudioBuffer:
        return griffin_lim(mel, self.cfg, n_iters=self.n_iters)


def resample(audio: AudioBuffer, target_rate: int) -> AudioBuffer:
    """Band-limited polyphase resampling; output length = round(len * target / source)."""
    if target_rate not in ALLOWED_RATES:
        raise ValueError(f"unsupported target rate {target_rate}")
    if target_rate == audio.sample_rate:
        return audio
    g = math.gcd(target_rate, audio.sample_rate)
    out = resample_poly(audio.samples, target_rate // g, audio.sample_rate // g)
    n_out = round(len(audio) * target_rate / audio.sample_rate)
    if len(out) >= n_out:
        out = out[:n_out]
    else:
        out = np.pad(out, (0, n_out - len(out)))
    return AudioBuffer(np.clip(out, -1.0, 1.0), target_rate)


def read_wav(path: str | Path) -> AudioBuffer:
    rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise ValueError(f"{path}: multichannel WAV not supported (got {data.ndim} channels)")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    return AudioBuffer(np.clip(samples, -1.0, 1.0), int(rate))


def write_wav(path: str | Path, audio: AudioBuffer) -> None:
    wavfile.write(str(path), audio.sample_rate, audio.samples.astype(np.float32))
