"""Inference stack: sway-sampled time schedule, classifier-free-guidance
velocity combination, fixed-grid ODE integration, prompt-guided condition
assembly, and the end-to-end enhancement pipeline.

Layout for a request with a T2-frame prompt and a T1-frame degraded input:
all condition channels span T1+T2 frames; the clean (prompt) context
occupies the first T2 frames and the degraded context the last T1; the
enhanced output is exactly the last T1 frames of the solved state.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .dsp import (
    ACOUSTIC_MEL,
    TOKENIZER_MEL,
    AudioBuffer,
    MelSpectrogram,
    Vocoder,
    mel_spectrogram,
    resample,
)
from .fmse import ConditionBundle, FmseModel, MaskSpec, build_condition, velocity
from .saslm import Saslm, encoder_forward, generate
from .tokenizer import Codebook, tokenize

PROMPT_CAP_S = 10.0


@dataclass
class EnhanceRequest:
    degraded: AudioBuffer
    prompt: AudioBuffer | None = None
    nfe: int = 8
    cfg_strength: float = 0.5
    sway: float = -1.0
    seed: int = 0
    method: str = "euler"
    no_semantic: bool = False
    no_prompt_tokens: bool = False

    def __post_init__(self):
        if self.nfe < 1:
            raise ValueError("nfe must be >= 1")
        if self.cfg_strength < 0.0:
            raise ValueError("cfg strength must be >= 0")
        if not (-1.0 <= self.sway <= 0.0):
            raise ValueError("sway coefficient must lie in [-1, 0]")


@dataclass(frozen=True)
class InferenceLayout:
    t1: int  # degraded mel frames (generation region)
    t2: int  # prompt mel frames, 0 without a prompt

    @property
    def total(self) -> int:
        return self.t1 + self.t2

    def output_slice(self) -> slice:
        """The generation region: the last t1 frames."""
        return slice(self.t2, self.t2 + self.t1)


@dataclass
class EnhanceModels:
    saslm: Saslm
    fmse: FmseModel
    codebook: Codebook | None = None  # used for prompt tokens when present


def sway_times(nfe: int, s: float) -> np.ndarray:
    """nfe+1 strictly increasing times mapping the uniform grid through
    t = u + s * (cos(pi*u/2) - 1 + u); s=0 is the uniform schedule and
    s<0 concentrates steps early in the trajectory."""
    if nfe < 1:
        raise ValueError("nfe must be >= 1")
    if not (-1.0 <= s <= 0.0):
        raise ValueError("sway coefficient must lie in [-1, 0]")
    u = np.linspace(0.0, 1.0, nfe + 1)
    t = u + s * (np.cos(np.pi * u / 2.0) - 1.0 + u)
    t[0], t[-1] = 0.0, 1.0  # exact endpoints
    return t


def cfg_velocity(model: FmseModel, x_t: torch.Tensor, cond: ConditionBundle,
                 uncond: ConditionBundle, t: float, gamma: float) -> torch.Tensor:
    """v_cond + gamma * (v_cond - v_uncond); at gamma=0 the unconditional
    branch is never evaluated and the result is v_cond exactly."""
    if gamma < 0.0:
        raise ValueError("cfg strength must be >= 0")
    v_cond = velocity(model, x_t, cond, t)
    if gamma == 0.0:
        return v_cond
    v_uncond = velocity(model, x_t, uncond, t)
    return v_cond + gamma * (v_cond - v_uncond)


def ode_solve(velocity_fn: Callable[[torch.Tensor, float], torch.Tensor],
              x0: torch.Tensor, times: np.ndarray,
              method: str = "euler") -> torch.Tensor:
    """Integrate dx/dt = v(x, t) over the given time grid; returns the state
    at the final time."""
    if method not in ("euler", "midpoint"):
        raise ValueError(f"unknown method {method!r}")
    x = x0
    for i in range(len(times) - 1):
        t, dt = float(times[i]), float(times[i + 1] - times[i])
        if method == "euler":
            x = x + dt * velocity_fn(x, t)
        else:
            half = x + 0.5 * dt * velocity_fn(x, t)
            x = x + dt * velocity_fn(half, t + 0.5 * dt)
        if not torch.isfinite(x).all():
            raise RuntimeError("ODE diverged")
    return x


def assemble_inference(model: FmseModel,
                       prompt_mel: torch.Tensor | None,
                       prompt_tokens: np.ndarray,
                       degraded_mel: torch.Tensor,
                       purified_tokens: np.ndarray,
                       no_semantic: bool = False,
                       uncond: bool = False) -> tuple[ConditionBundle, InferenceLayout]:
    """Condition bundle over T1+T2 frames from normalized log-mels.
    Clean context = [prompt ; zeros(T1)], degraded context = [zeros(T2) ;
    degraded], token channel encodes [prompt_tokens ; purified_tokens]."""
    t1 = degraded_mel.shape[1]
    t2 = 0 if prompt_mel is None else prompt_mel.shape[1]
    cap = ACOUSTIC_MEL.n_frames(round(PROMPT_CAP_S * ACOUSTIC_MEL.sample_rate))
    if t2 > cap:
        raise ValueError(f"prompt exceeds the {PROMPT_CAP_S:.0f} s cap "
                         f"({t2} > {cap} frames)")
    layout = InferenceLayout(t1, t2)
    f = degraded_mel.shape[0]
    dtype = degraded_mel.dtype

    clean_full = torch.zeros(f, layout.total, dtype=dtype)
    if t2:
        clean_full[:, :t2] = prompt_mel
    degraded_full = torch.zeros(f, layout.total, dtype=dtype)
    degraded_full[:, t2:] = degraded_mel

    m1 = np.zeros(layout.total, dtype=bool)
    m1[:t2] = True   # clean context valid only on prompt frames
    m2 = np.zeros(layout.total, dtype=bool)
    m2[t2:] = True   # degraded context valid only on input frames

    ids = np.concatenate([np.asarray(prompt_tokens, dtype=np.int64),
                          np.asarray(purified_tokens, dtype=np.int64)])
    mask = MaskSpec(m1, m2, uncond)
    bundle = build_condition(model, clean_full, degraded_full, ids, mask,
                             no_semantic=no_semantic)
    return bundle, layout


@torch.no_grad()
def purify_tokens(degraded: AudioBuffer, models: EnhanceModels) -> np.ndarray:
    """Stage 1 on the 16 kHz branch: greedy semantic token purification."""
    degraded16 = resample(degraded, TOKENIZER_MEL.sample_rate)
    emb = encoder_forward(models.saslm, degraded16)
    purified = generate(models.saslm, emb, mode="greedy").ids
    if len(purified) == 0:
        warnings.warn("semantic stage emitted zero tokens; proceeding with an "
                      "empty token sequence")
    return purified


@torch.no_grad()
def enhance_mel(request: EnhanceRequest, models: EnhanceModels,
                purified: np.ndarray | None = None) -> tuple[MelSpectrogram, np.ndarray]:
    """Two-stage pipeline up to the enhanced mel: purify semantic tokens
    from the degraded audio, then generate the enhanced mel by integrating
    the learned flow. Returns (mel, purified token ids). Deterministic
    given the request seed. Pass `purified` to reuse stage-1 output."""
    fm = models.fmse
    if purified is None:
        purified = purify_tokens(request.degraded, models)

    # Stage 2 conditions on the 24 kHz acoustic branch.
    degraded24 = resample(request.degraded, ACOUSTIC_MEL.sample_rate)
    y_mel = mel_spectrogram(degraded24, ACOUSTIC_MEL).values
    yn = fm.normalize(y_mel)

    prompt_norm = None
    prompt_tokens = np.empty(0, dtype=np.int64)
    if request.prompt is not None and len(request.prompt) > 0:
        if request.prompt.duration > PROMPT_CAP_S:
            raise ValueError(f"prompt exceeds the {PROMPT_CAP_S:.0f} s cap")
        prompt24 = resample(request.prompt, ACOUSTIC_MEL.sample_rate)
        prompt_norm = fm.normalize(mel_spectrogram(prompt24, ACOUSTIC_MEL).values)
        if models.codebook is not None and not request.no_prompt_tokens:
            prompt16 = resample(request.prompt, TOKENIZER_MEL.sample_rate)
            prompt_tokens = tokenize(prompt16, models.codebook).ids

    cond, layout = assemble_inference(fm, prompt_norm, prompt_tokens, yn,
                                      purified, no_semantic=request.no_semantic)
    uncond, _ = assemble_inference(fm, prompt_norm, prompt_tokens, yn,
                                   purified, no_semantic=request.no_semantic,
                                   uncond=True)

    rng = np.random.default_rng(request.seed)
    x0 = torch.from_numpy(
        rng.standard_normal((fm.cfg.n_mels, layout.total))
    ).to(yn.dtype)
    times = sway_times(request.nfe, request.sway)

    def v_fn(x, t):
        return cfg_velocity(fm, x, cond, uncond, t, request.cfg_strength)

    x1 = ode_solve(v_fn, x0, times, method=request.method)
    out = fm.denormalize(x1[:, layout.output_slice()])
    return MelSpectrogram(out, ACOUSTIC_MEL), purified


def enhance(request: EnhanceRequest, models: EnhanceModels,
            vocoder: Vocoder) -> AudioBuffer:
    """enhance_mel followed by mel inversion; output at 24 kHz."""
    mel, _ = enhance_mel(request, models)
    return vocoder(mel)
