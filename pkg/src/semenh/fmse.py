"""Flow-matching enhancement model: masked-context condition assembly,
ConvNeXt-style token channel, a DiT-style velocity network with adaptive
layer-norm time conditioning, and the velocity-regression training loss.

The model operates on normalized log-mels; the normalization statistics
live in the model as buffers and travel with its checkpoint. Straight-line
interpolant x_t = (1-t)*x0 + t*x1 with velocity target x1 - x0; the loss
is averaged over generation frames (where the clean-context keep mask m1
is false) only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .saslm import TransformerBlock  # reused for the token-free building block


@dataclass
class FmseConfig:
    k: int = 512                 # semantic vocab; filler id is k
    n_mels: int = 100
    token_dim: int = 64
    convnext_blocks: int = 2
    convnext_kernel: int = 7
    dit_layers: int = 6
    hidden: int = 256
    heads: int = 4
    ffn_mult: int = 4
    # training-time mask distributions (mechanism from the method, numbers pinned here)
    gen_frac_range: tuple[float, float] = (0.7, 1.0)
    degrad_mask_prob: float = 0.5
    degrad_spans: tuple[int, int] = (1, 3)
    degrad_frac_range: tuple[float, float] = (0.1, 0.5)
    uncond_prob: float = 0.2

    @property
    def filler_id(self) -> int:
        return self.k

    @property
    def in_features(self) -> int:
        # x_t + clean ctx + degraded ctx + 2 validity flags + token channel
        return 3 * self.n_mels + 2 + self.token_dim


@dataclass
class MaskSpec:
    m1: np.ndarray      # bool (T,), True = clean context kept
    m2: np.ndarray      # bool (T,), True = degraded frame kept
    uncond: bool


@dataclass
class FlowSample:
    t: float
    x0: torch.Tensor
    x1: torch.Tensor
    x_t: torch.Tensor
    v_target: torch.Tensor


@dataclass
class ConditionBundle:
    ctx_clean: torch.Tensor       # (F, T)
    ctx_degraded: torch.Tensor    # (F, T)
    valid_clean: torch.Tensor     # (T,)
    valid_degraded: torch.Tensor  # (T,)
    token_channel: torch.Tensor   # (C, T)

    @property
    def n_frames(self) -> int:
        return self.ctx_clean.shape[1]


def sample_masks(rng: np.random.Generator, t_frames: int, cfg: FmseConfig,
                 no_degrad_mask: bool = False) -> MaskSpec:
    """m1: one contiguous generation span covering fraction u ~ U[0.7, 1.0] of
    the frames (False inside the span). m2: with probability 0.5, 1-3 spans
    totaling fraction u ~ U[0.1, 0.5] dropped. uncond with probability 0.2."""
    if t_frames < 4:
        raise ValueError("need at least 4 frames")
    u = rng.uniform(*cfg.gen_frac_range)
    span = max(1, round(u * t_frames))
    start = int(rng.integers(0, t_frames - span + 1))
    m1 = np.ones(t_frames, dtype=bool)
    m1[start : start + span] = False

    m2 = np.ones(t_frames, dtype=bool)
    if not no_degrad_mask and rng.random() < cfg.degrad_mask_prob:
        total = max(1, round(rng.uniform(*cfg.degrad_frac_range) * t_frames))
        n_spans = int(rng.integers(cfg.degrad_spans[0], cfg.degrad_spans[1] + 1))
        lengths = np.maximum(1, rng.multinomial(total, np.ones(n_spans) / n_spans))
        for ln in lengths:
            ln = min(int(ln), t_frames)
            s = int(rng.integers(0, t_frames - ln + 1))
            m2[s : s + ln] = False

    uncond = bool(rng.random() < cfg.uncond_prob)
    return MaskSpec(m1, m2, uncond)


def flow_interpolate(x0: torch.Tensor, x1: torch.Tensor, t: float) -> FlowSample:
    if x0.shape != x1.shape:
        raise ValueError("shape mismatch")
    if not (0.0 <= t <= 1.0):
        raise ValueError("t out of [0, 1]")
    return FlowSample(t, x0, x1, (1.0 - t) * x0 + t * x1, x1 - x0)


class ConvNeXtBlock(nn.Module):
    """Depthwise conv + pointwise MLP + layer scale, over (B, C, T)."""

    def __init__(self, dim: int, kernel: int, mult: int = 4):
        super().__init__()
        self.dwconv = nn.Conv1d(dim, dim, kernel, padding=kernel // 2, groups=dim)
        self.norm = nn.LayerNorm(dim)
        self.pw1 = nn.Linear(dim, mult * dim)
        self.pw2 = nn.Linear(mult * dim, dim)
        self.gamma = nn.Parameter(1e-2 * torch.ones(dim))

    def forward(self, x):
        res = x
        x = self.dwconv(x)
        x = x.transpose(1, 2)
        x = self.pw2(torch.nn.functional.gelu(self.pw1(self.norm(x))))
        x = (self.gamma * x).transpose(1, 2)
        return res + x


class TokenEncoder(nn.Module):
    def __init__(self, cfg: FmseConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.k + 1, cfg.token_dim)  # +1 for filler
        self.blocks = nn.Sequential(*[
            ConvNeXtBlock(cfg.token_dim, cfg.convnext_kernel)
            for _ in range(cfg.convnext_blocks)
        ])

    @property
    def receptive_half_width(self) -> int:
        return self.cfg.convnext_blocks * (self.cfg.convnext_kernel // 2)

    def forward(self, ids: np.ndarray | torch.Tensor, t_frames: int) -> torch.Tensor:
        """(C, T) channel: ids right-padded with filler to t_frames, embedded,
        passed through the conv blocks."""
        ids = torch.as_tensor(np.asarray(ids), dtype=torch.long)
        if len(ids) > t_frames:
            ids = ids[:t_frames]
        padded = torch.full((t_frames,), self.cfg.filler_id, dtype=torch.long)
        padded[: len(ids)] = ids
        x = self.embed(padded).T[None]  # (1, C, T)
        x = self.blocks(x.to(self.embed.weight.dtype))
        return x[0]


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half)
    args = t[..., None] * freqs
    return torch.cat([args.cos(), args.sin()], dim=-1)


def _modulate(x, shift, scale):
    return x * (1 + scale) + shift


class DitBlock(nn.Module):
    """Transformer block with adaptive layer-norm (zero-init) time conditioning."""

    def __init__(self, hidden: int, heads: int, ffn_mult: int):
        super().__init__()
        from .saslm import SelfAttention

        self.ln1 = nn.LayerNorm(hidden, elementwise_affine=False)
        self.attn = SelfAttention(hidden, heads, causal=False, rotary=True)
        self.ln2 = nn.LayerNorm(hidden, elementwise_affine=False)
        self.mlp = nn.Sequential(
            nn.Linear(hidden, ffn_mult * hidden),
            nn.GELU(),
            nn.Linear(ffn_mult * hidden, hidden),
        )
        self.ada = nn.Linear(hidden, 6 * hidden)
        nn.init.zeros_(self.ada.weight)
        nn.init.zeros_(self.ada.bias)

    def forward(self, x, temb):
        sh1, sc1, g1, sh2, sc2, g2 = self.ada(temb).chunk(6, dim=-1)
        x = x + g1 * self.attn(_modulate(self.ln1(x), sh1, sc1))
        x = x + g2 * self.mlp(_modulate(self.ln2(x), sh2, sc2))
        return x


class VelocityNet(nn.Module):
    """DiT over mel frames; each frame is one sequence position."""

    def __init__(self, cfg: FmseConfig):
        super().__init__()
        self.cfg = cfg
        h = cfg.hidden
        self.in_proj = nn.Linear(cfg.in_features, h)
        self.time_mlp = nn.Sequential(nn.Linear(h, h), nn.SiLU(), nn.Linear(h, h))
        self.blocks = nn.ModuleList(
            DitBlock(h, cfg.heads, cfg.ffn_mult) for _ in range(cfg.dit_layers)
        )
        self.ln_f = nn.LayerNorm(h, elementwise_affine=False)
        self.ada_f = nn.Linear(h, 2 * h)
        nn.init.zeros_(self.ada_f.weight)
        nn.init.zeros_(self.ada_f.bias)
        self.out_proj = nn.Linear(h, cfg.n_mels)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def forward(self, feats: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        # feats: (T, in_features); t: scalar tensor
        dtype = self.in_proj.weight.dtype
        x = self.in_proj(feats.to(dtype))[None]
        temb = self.time_mlp(timestep_embedding(t.reshape(1).to(dtype), self.cfg.hidden))
        for blk in self.blocks:
            x = blk(x, temb)
        shift, scale = self.ada_f(temb).chunk(2, dim=-1)
        x = _modulate(self.ln_f(x), shift, scale)
        return self.out_proj(x)[0]


class FmseModel(nn.Module):
    """Token encoder + velocity network + mel normalization statistics."""

    def __init__(self, cfg: FmseConfig):
        super().__init__()
        self.cfg = cfg
        self.token_encoder = TokenEncoder(cfg)
        self.net = VelocityNet(cfg)
        self.register_buffer("mel_mean", torch.tensor(0.0))
        self.register_buffer("mel_std", torch.tensor(1.0))

    def set_mel_stats(self, mean: float, std: float):
        self.mel_mean.fill_(mean)
        self.mel_std.fill_(max(std, 1e-6))

    def normalize(self, mel_values: np.ndarray | torch.Tensor) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(mel_values), dtype=torch.float64)
        return ((x - self.mel_mean.double()) / self.mel_std.double()).to(self.mel_mean.dtype)

    def denormalize(self, x: torch.Tensor) -> np.ndarray:
        out = x.detach().double() * self.mel_std.double() + self.mel_mean.double()
        return out.cpu().numpy()


def encode_tokens(model: FmseModel, ids, t_frames: int) -> torch.Tensor:
    return model.token_encoder(ids, t_frames)


def build_condition(model: FmseModel, x1n: torch.Tensor, yn: torch.Tensor,
                    z_ids, mask: MaskSpec, no_semantic: bool = False) -> ConditionBundle:
    """Training-time bundle from normalized mels and a mask draw. The
    unconditional branch zeroes the degraded context and replaces the token
    channel with all-filler; the clean infilling context is kept."""
    t_frames = x1n.shape[1]
    dtype = model.mel_mean.dtype
    m1 = torch.from_numpy(mask.m1.astype(np.float64)).to(dtype)
    m2 = torch.from_numpy(mask.m2.astype(np.float64)).to(dtype)
    ctx_clean = x1n * m1[None, :]
    if mask.uncond:
        ctx_degraded = torch.zeros_like(yn)
        valid_degraded = torch.zeros_like(m2)
        tokens = encode_tokens(model, np.empty(0, dtype=np.int64), t_frames)
    else:
        ctx_degraded = yn * m2[None, :]
        valid_degraded = m2
        if no_semantic:
            tokens = encode_tokens(model, np.empty(0, dtype=np.int64), t_frames)
        else:
            tokens = encode_tokens(model, z_ids, t_frames)
    return ConditionBundle(ctx_clean, ctx_degraded, m1, valid_degraded, tokens)


def velocity(model: FmseModel, x_t: torch.Tensor, bundle: ConditionBundle,
             t: float | torch.Tensor) -> torch.Tensor:
    """(F, T) velocity estimate; conditioning concatenated on the feature axis."""
    if bundle.n_frames != x_t.shape[1]:
        raise ValueError("bundle/mel frame mismatch")
    feats = torch.cat([
        x_t,
        bundle.ctx_clean,
        bundle.valid_clean[None, :].to(x_t.dtype),
        bundle.ctx_degraded,
        bundle.valid_degraded[None, :].to(x_t.dtype),
        bundle.token_channel,
    ], dim=0).T  # (T, in_features)
    t = torch.as_tensor(t, dtype=x_t.dtype)
    return model.net(feats, t).T


def cfm_loss(model: FmseModel, x1: np.ndarray, y: np.ndarray, z_ids,
             rng: np.random.Generator, no_degrad_mask: bool = False,
             no_semantic: bool = False,
             forced: tuple[float, torch.Tensor, MaskSpec] | None = None) -> torch.Tensor:
    """Velocity-regression MSE over generation frames only. x1, y are raw
    log-mel matrices; z_ids the clean-speech tokens. `forced` fixes
    (t, x0, masks) for testing."""
    if x1.shape != y.shape:
        raise ValueError("clean/degraded mel shape mismatch")
    x1n = model.normalize(x1)
    yn = model.normalize(y)
    t_frames = x1n.shape[1]
    if forced is not None:
        t, x0, mask = forced
    else:
        t = float(rng.uniform())
        x0 = torch.from_numpy(rng.standard_normal(x1n.shape)).to(x1n.dtype)
        mask = sample_masks(rng, t_frames, model.cfg, no_degrad_mask=no_degrad_mask)
    if mask.m1.all():
        raise ValueError("empty generation region")
    fs = flow_interpolate(x0, x1n, t)
    bundle = build_condition(model, x1n, yn, z_ids, mask, no_semantic=no_semantic)
    v = velocity(model, fs.x_t, bundle, t)
    gen = torch.from_numpy(~mask.m1)
    err = (v - fs.v_target) ** 2
    return err[:, gen].mean()


@dataclass
class FmTrainConfig:
    steps: int = 1000
    peak_lr: float = 7.5e-5
    warmup_steps: int = 100
    weight_decay: float = 0.01
    seed: int = 0
    log_every: int = 50
    no_degrad_mask: bool = False
    no_semantic: bool = False


def fm_train(model: FmseModel, dataset: list[tuple[np.ndarray, np.ndarray, np.ndarray]],
             cfg: FmTrainConfig) -> list[tuple[int, float]]:
    """dataset items are (clean log-mel (F, T), degraded log-mel (F, T),
    clean-token ids). Sets the mel normalization stats from the clean mels."""
    from .saslm import _lr_lambda

    stacked = np.concatenate([d[0].ravel() for d in dataset])
    model.set_mel_stats(float(stacked.mean()), float(stacked.std()))

    opt = torch.optim.AdamW(model.parameters(), lr=cfg.peak_lr,
                            weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: _lr_lambda(s, cfg.warmup_steps, cfg.steps)
    )
    rng = np.random.default_rng(cfg.seed)
    history: list[tuple[int, float]] = []
    model.train()
    for step in range(cfg.steps):
        x1, y, z = dataset[int(rng.integers(len(dataset)))]
        loss = cfm_loss(model, x1, y, z, rng,
                        no_degrad_mask=cfg.no_degrad_mask,
                        no_semantic=cfg.no_semantic)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            history.append((step, float(loss.detach())))
    model.eval()
    return history
