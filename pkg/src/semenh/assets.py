"""Seeded synthetic assets: noises, room impulse responses, and a small
speech-like clean corpus. These replace external noise/RIR/speech datasets
so the whole pipeline runs self-contained.
"""

from __future__ import annotations

import numpy as np
from scipy.signal import lfilter

from .dsp import AudioBuffer
from .degrade import AssetBank


def white_noise(n: int, rate: int, rng: np.random.Generator) -> AudioBuffer:
    x = rng.standard_normal(n)
    return AudioBuffer(0.3 * x / np.max(np.abs(x)), rate)


def pink_noise(n: int, rate: int, rng: np.random.Generator) -> AudioBuffer:
    # Kellet's 1/f filter approximation.
    w = rng.standard_normal(n + 2000)
    b = [0.049922035, -0.095993537, 0.050612699, -0.004408786]
    a = [1.0, -2.494956002, 2.017265875, -0.522189400]
    x = lfilter(b, a, w)[2000:]
    return AudioBuffer(0.3 * x / np.max(np.abs(x)), rate)


def babble_noise(n: int, rate: int, rng: np.random.Generator) -> AudioBuffer:
    """Sum of slowly AM-modulated bandpassed noise bursts, speech-band weighted."""
    out = np.zeros(n)
    t = np.arange(n) / rate
    for _ in range(6):
        carrier = rng.standard_normal(n)
        f0 = rng.uniform(300.0, 2500.0)
        bw = rng.uniform(200.0, 600.0)
        # crude bandpass via modulated lowpass noise
        lp = lfilter([1.0], [1.0, -np.exp(-2 * np.pi * bw / rate)], carrier)
        band = lp * np.cos(2 * np.pi * f0 * t + rng.uniform(0, 2 * np.pi))
        env = 0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(2.0, 6.0) * t + rng.uniform(0, 2 * np.pi))
        out += band * env
    return AudioBuffer(0.3 * out / np.max(np.abs(out)), rate)


def synthetic_rir(rate: int, rng: np.random.Generator, rt60: float = 0.3) -> AudioBuffer:
    """Exponentially decaying noise tail after a unit direct path."""
    n = int(rt60 * rate)
    t = np.arange(n) / rate
    tail = rng.standard_normal(n) * np.exp(-6.9 * t / rt60)
    h = np.concatenate([[1.0], 0.3 * tail])
    return AudioBuffer(h / np.max(np.abs(h)), rate)


def make_asset_bank(rate: int, seed: int, n_noises: int = 6, n_rirs: int = 4,
                    noise_dur: float = 3.0) -> AssetBank:
    rng = np.random.default_rng(seed)
    n = int(noise_dur * rate)
    bank = AssetBank()
    makers = [white_noise, pink_noise, babble_noise]
    for i in range(n_noises):
        bank.noises[f"noise{i:02d}"] = makers[i % len(makers)](n, rate, rng)
    for i in range(n_rirs):
        bank.rirs[f"rir{i:02d}"] = synthetic_rir(rate, rng, rt60=0.15 + 0.1 * i)
    return bank


def speech_like_utterance(duration: float, rate: int, rng: np.random.Generator) -> AudioBuffer:
    """Harmonic source with a wandering pitch contour, formant-like resonances
    and syllabic amplitude modulation. Not speech, but structured like it."""
    n = int(duration * rate)
    t = np.arange(n) / rate

    # pitch contour: slow random walk around a base f0
    f0_base = rng.uniform(100.0, 220.0)
    drift = np.cumsum(rng.standard_normal(n)) / rate
    drift = 30.0 * drift / (np.max(np.abs(drift)) + 1e-9)
    f0 = f0_base + drift + 15.0 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * t)
    phase = 2 * np.pi * np.cumsum(f0) / rate

    # harmonic stack shaped by 3 formant resonances
    formants = rng.uniform([300, 900, 2200], [800, 1800, 3200])
    bws = np.array([120.0, 180.0, 280.0])
    sig = np.zeros(n)
    for k in range(1, 24):
        fk = k * f0
        amp = np.zeros(n)
        for fc, bw in zip(formants, bws):
            amp += 1.0 / (1.0 + ((fk - fc) / bw) ** 2)
        amp *= 1.0 / k**0.5
        sig += amp * np.sin(k * phase + rng.uniform(0, 2 * np.pi))

    # syllabic envelope (~3-5 Hz) with brief fricative-like noise in the gaps
    syl = 0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(2.5, 5.0) * t + rng.uniform(0, 2 * np.pi))
    syl = syl**1.5
    fric = lfilter([1.0, -0.95], [1.0], rng.standard_normal(n)) * (1.0 - syl) * 0.08
    sig = sig * syl + fric

    # fade edges to avoid clicks
    fade = min(int(0.01 * rate), n // 4)
    ramp = np.linspace(0.0, 1.0, fade)
    sig[:fade] *= ramp
    sig[-fade:] *= ramp[::-1]

    return AudioBuffer(0.7 * sig / np.max(np.abs(sig)), rate)


def make_toy_corpus(n_items: int, duration: float, rate: int, seed: int) -> list[AudioBuffer]:
    rng = np.random.default_rng(seed)
    return [speech_like_utterance(duration, rate, rng) for _ in range(n_items)]
