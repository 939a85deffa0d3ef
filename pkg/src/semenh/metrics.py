"""Signal metrics computable without external pretrained models, plus a
spectrogram visualization helper.

Included: scale-invariant SDR, log-spectral distance over mel frames, an
intelligibility score following the extended short-time objective
intelligibility procedure (10 kHz, one-third-octave bands, 384 ms
segments, spectral correlation), and a token-level edit-distance rate.
Perceptual metrics that require pretrained scorers (PESQ, DNSMOS, NISQA,
SpeechBERTScore, SIM-o) are not computed here; the report schema reserves
their field names so externally computed values can be merged in.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy.signal import resample_poly  # noqa: E402

from .dsp import AudioBuffer, MelConfig, stft  # noqa: E402

SI_SDR_CAP_DB = 60.0

RESERVED_METRICS = ("pesq", "dnsmos", "nisqa", "speech_bert_score", "sim_o")

_EPS = 1e-12


def si_sdr(ref: AudioBuffer, est: AudioBuffer) -> float:
    """Scale-invariant SDR in dB with the optimal scaling projection,
    capped at +60 dB."""
    if len(ref) != len(est) or ref.sample_rate != est.sample_rate:
        raise ValueError("length/rate mismatch between reference and estimate")
    r, e = ref.samples, est.samples
    rr = float(np.dot(r, r))
    if rr <= 0.0:
        raise ValueError("zero reference signal")
    target = (np.dot(e, r) / rr) * r
    noise = e - target
    p_t = float(np.dot(target, target))
    p_n = float(np.dot(noise, noise))
    if p_n <= _EPS * p_t:
        return SI_SDR_CAP_DB
    return min(SI_SDR_CAP_DB, 10.0 * np.log10(p_t / max(p_n, _EPS)))


def lsd(ref_mel: np.ndarray, est_mel: np.ndarray) -> float:
    """Log-spectral distance: mean over frames of the RMS over bins of the
    log-amplitude difference. Inputs are (F, T) log-amplitude matrices."""
    ref_mel = np.asarray(ref_mel, dtype=np.float64)
    est_mel = np.asarray(est_mel, dtype=np.float64)
    if ref_mel.shape != est_mel.shape:
        raise ValueError("mel shape mismatch")
    per_frame = np.sqrt(np.mean((ref_mel - est_mel) ** 2, axis=0))
    return float(np.mean(per_frame))


# --- intelligibility score ------------------------------------------------

_STOI_RATE = 10000
_FRAME = 256
_HOP = 128
_NFFT = 512
_N_BANDS = 15
_LOW_CF = 150.0
_SEG = 30          # frames per segment (384 ms at 10 kHz / hop 128)
_DYN_RANGE = 40.0  # dB for silent-frame removal


def _to_10k(audio: AudioBuffer) -> np.ndarray:
    if audio.sample_rate == _STOI_RATE:
        return audio.samples
    g = np.gcd(_STOI_RATE, audio.sample_rate)
    return resample_poly(audio.samples, _STOI_RATE // g, audio.sample_rate // g)


def _frames(x: np.ndarray) -> np.ndarray:
    n = (len(x) - _FRAME) // _HOP + 1
    idx = np.arange(_FRAME)[None, :] + _HOP * np.arange(n)[:, None]
    return x[idx]


def _remove_silent_frames(r: np.ndarray, e: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Drop frames whose reference energy is more than 40 dB below the
    loudest frame; both signals are rebuilt by overlap-adding the kept
    windowed frames."""
    w = np.hanning(_FRAME + 2)[1:-1]
    rf = _frames(r) * w
    ef = _frames(e) * w
    energy = 20.0 * np.log10(np.linalg.norm(rf, axis=1) + _EPS)
    keep = energy > energy.max() - _DYN_RANGE
    rf, ef = rf[keep], ef[keep]

    n = (len(rf) - 1) * _HOP + _FRAME
    out_r, out_e = np.zeros(n), np.zeros(n)
    for i in range(len(rf)):
        s = i * _HOP
        out_r[s : s + _FRAME] += rf[i]
        out_e[s : s + _FRAME] += ef[i]
    return out_r, out_e


def _third_octave_matrix() -> np.ndarray:
    """(15, n_bins) 0/1 matrix grouping FFT bins into one-third-octave
    bands with center frequencies 150 * 2^(j/3)."""
    n_bins = _NFFT // 2 + 1
    freqs = np.linspace(0.0, _STOI_RATE / 2.0, n_bins)
    mat = np.zeros((_N_BANDS, n_bins))
    for j in range(_N_BANDS):
        cf = _LOW_CF * 2.0 ** (j / 3.0)
        lo, hi = cf / 2.0 ** (1.0 / 6.0), cf * 2.0 ** (1.0 / 6.0)
        mat[j] = (freqs >= lo) & (freqs < hi)
    return mat


def _band_envelopes(x: np.ndarray, octmat: np.ndarray) -> np.ndarray:
    """(J, n_frames) band magnitudes from short-time spectra."""
    w = np.hanning(_FRAME + 2)[1:-1]
    spec = np.fft.rfft(_frames(x) * w, n=_NFFT, axis=1)  # (n_frames, bins)
    power = np.abs(spec) ** 2
    return np.sqrt(octmat @ power.T)


def _row_col_normalize(seg: np.ndarray) -> np.ndarray:
    """Per-band mean/norm normalization over time, then per-frame over bands."""
    s = seg - seg.mean(axis=1, keepdims=True)
    s = s / (np.linalg.norm(s, axis=1, keepdims=True) + _EPS)
    s = s - s.mean(axis=0, keepdims=True)
    return s / (np.linalg.norm(s, axis=0, keepdims=True) + _EPS)


def estoi(ref: AudioBuffer, est: AudioBuffer) -> float:
    """Extended short-time objective intelligibility score in [-1, 1]."""
    if len(ref) != len(est) or ref.sample_rate != est.sample_rate:
        raise ValueError("length/rate mismatch between reference and estimate")
    if ref.duration < 0.5:
        raise ValueError("too short: need at least 0.5 s of audio")
    r, e = _to_10k(ref), _to_10k(est)
    r, e = _remove_silent_frames(r, e)
    if (len(r) - _FRAME) // _HOP + 1 < _SEG:
        raise ValueError("too short: fewer than 384 ms of active speech")
    octmat = _third_octave_matrix()
    rb = _band_envelopes(r, octmat)  # (J, T)
    eb = _band_envelopes(e, octmat)

    n_frames = rb.shape[1]
    scores = []
    for m in range(_SEG, n_frames + 1):
        rs = _row_col_normalize(rb[:, m - _SEG : m])
        es = _row_col_normalize(eb[:, m - _SEG : m])
        scores.append(np.sum(rs * es) / _SEG)
    return float(np.clip(np.mean(scores), -1.0, 1.0))


def token_error_rate(ref_tokens, hyp_tokens) -> float:
    """Levenshtein distance divided by the reference length. Empty
    reference: 0 if the hypothesis is empty too, else len(hyp)."""
    ref = list(np.asarray(ref_tokens).ravel())
    hyp = list(np.asarray(hyp_tokens).ravel())
    if not ref:
        return float(len(hyp))
    prev = list(range(len(hyp) + 1))
    for i, rt in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, ht in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1,
                         prev[j - 1] + (rt != ht))
        prev = cur
    return prev[-1] / len(ref)


def plot_spectrograms(audios: list[tuple[str, AudioBuffer]],
                      out_path: str | Path) -> Path:
    """Stacked log-magnitude spectrogram panels, one per labeled buffer,
    written as a raster image."""
    if not audios:
        raise ValueError("need at least one audio buffer")
    out_path = Path(out_path)
    fig, axes = plt.subplots(len(audios), 1,
                             figsize=(8, 2.2 * len(audios)), squeeze=False)
    for ax, (label, audio) in zip(axes[:, 0], audios):
        cfg = MelConfig(sample_rate=audio.sample_rate, n_fft=512, hop=128,
                        win=512, n_mels=1, fmin=0.0,
                        fmax=audio.sample_rate / 2.0)
        mag = np.abs(stft(audio, cfg))
        ax.imshow(np.log(np.maximum(mag, 1e-5)), origin="lower", aspect="auto",
                  extent=[0, audio.duration, 0, audio.sample_rate / 2.0])
        ax.set_title(label)
        ax.set_ylabel("Hz")
    axes[-1, 0].set_xlabel("s")
    fig.tight_layout()
    try:
        fig.savefig(out_path, dpi=100)
    finally:
        plt.close(fig)
    return out_path


@dataclass
class MetricReport:
    """Per-file metric values plus aggregates and run metadata. Reserved
    metric names stay null unless merged from an external scorer."""

    per_file: dict[str, dict[str, float | None]] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def add(self, file_id: str, metrics: dict[str, float]) -> None:
        row = {k: None for k in RESERVED_METRICS}
        for k, v in metrics.items():
            if v is not None and not np.isfinite(v):
                raise ValueError(f"non-finite metric {k}={v} for {file_id}")
            row[k] = v
        self.per_file[file_id] = row

    def aggregates(self) -> dict[str, float]:
        sums: dict[str, list[float]] = {}
        for row in self.per_file.values():
            for k, v in row.items():
                if v is not None:
                    sums.setdefault(k, []).append(v)
        return {k: float(np.mean(v)) for k, v in sorted(sums.items())}

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({
            "metadata": self.metadata,
            "aggregates": self.aggregates(),
            "per_file": self.per_file,
        }, indent=2, sort_keys=True) + "\n")

    def to_csv(self, path: str | Path) -> None:
        names = sorted({k for row in self.per_file.values() for k in row})
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["file_id"] + names)
            for fid in sorted(self.per_file):
                row = self.per_file[fid]
                w.writerow([fid] + [("" if row.get(n) is None else repr(row[n]))
                                    for n in names])
