"""Semantic-aware speech language model: a small audio encoder turns
degraded 16 kHz audio into continuous 50 Hz embeddings, which are prefixed
to a decoder-only transformer that autoregressively emits the semantic
tokens of the underlying clean speech.

Packed sequence layout: [SOS][e_1..e_n][TOT][s_1..s_m][EOS], with the
next-token loss computed only over the target tokens and EOS.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dsp import AudioBuffer, TOKENIZER_MEL
from .tokenizer import mel_frames

EMB_ID = -1  # placeholder id for positions carried by continuous embeddings


@dataclass(frozen=True)
class VocabLayout:
    k: int

    @property
    def sos(self) -> int:
        return self.k

    @property
    def tot(self) -> int:
        return self.k + 1

    @property
    def eos(self) -> int:
        return self.k + 2

    @property
    def pad(self) -> int:
        return self.k + 3

    @property
    def vocab_size(self) -> int:
        return self.k + 4


@dataclass
class SaslmConfig:
    k: int = 512
    n_mels: int = TOKENIZER_MEL.n_mels
    hidden: int = 256
    enc_layers: int = 2
    dec_layers: int = 4
    heads: int = 4
    ffn_mult: int = 4
    gen_cap_ratio: float = 1.25  # max generated tokens = ceil(ratio * n)

    @property
    def layout(self) -> VocabLayout:
        return VocabLayout(self.k)


@dataclass
class SaslmSequence:
    """One packed training item."""

    prefix_embeddings: torch.Tensor  # (n, enc_hidden)
    target_ids: torch.Tensor         # (m,)
    ids: torch.Tensor                # (n+m+3,) packed ids, EMB_ID at embedding slots
    loss_mask: torch.Tensor          # (n+m+3,) bool, true at s_1..s_m and EOS

    @property
    def n(self) -> int:
        return self.prefix_embeddings.shape[0]

    @property
    def m(self) -> int:
        return self.target_ids.shape[0]

    def __len__(self) -> int:
        return self.ids.shape[0]


def pack_sequence(embeddings: torch.Tensor, target_ids: torch.Tensor,
                  layout: VocabLayout) -> SaslmSequence:
    target_ids = target_ids.long()
    if target_ids.numel() and int(target_ids.max()) >= layout.k:
        raise ValueError("target id out of semantic range")
    n, m = embeddings.shape[0], target_ids.shape[0]
    ids = torch.full((n + m + 3,), EMB_ID, dtype=torch.long)
    ids[0] = layout.sos
    ids[n + 1] = layout.tot
    ids[n + 2 : n + m + 2] = target_ids
    ids[n + m + 2] = layout.eos
    mask = torch.zeros(n + m + 3, dtype=torch.bool)
    mask[n + 2 : n + m + 3] = True
    return SaslmSequence(embeddings, target_ids, ids, mask)


def unpack_sequence(seq: SaslmSequence) -> tuple[int, int]:
    return seq.n, seq.m


def _rotary_angles(length: int, dim: int, device, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    inv_freq = 1.0 / (10000.0 ** (torch.arange(0, dim, 2, device=device, dtype=dtype) / dim))
    pos = torch.arange(length, device=device, dtype=dtype)
    ang = pos[:, None] * inv_freq[None, :]
    return ang.cos(), ang.sin()


def _apply_rotary(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    # x: (..., L, D) with D even
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.empty_like(x)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos
    return out


class SelfAttention(nn.Module):
    def __init__(self, hidden: int, heads: int, causal: bool, rotary: bool = True):
        super().__init__()
        if hidden % heads:
            raise ValueError("hidden must be divisible by heads")
        self.heads = heads
        self.head_dim = hidden // heads
        self.causal = causal
        self.rotary = rotary
        self.qkv = nn.Linear(hidden, 3 * hidden)
        self.proj = nn.Linear(hidden, hidden)

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor | None = None) -> torch.Tensor:
        b, l, h = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)

        def split(t):
            return t.view(b, l, self.heads, self.head_dim).transpose(1, 2)

        q, k, v = split(q), split(k), split(v)
        if self.rotary:
            cos, sin = _rotary_angles(l, self.head_dim, x.device, x.dtype)
            q = _apply_rotary(q, cos, sin)
            k = _apply_rotary(k, cos, sin)
        att = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if self.causal:
            causal = torch.triu(torch.ones(l, l, dtype=torch.bool, device=x.device), 1)
            att = att.masked_fill(causal, float("-inf"))
        if pad_mask is not None:
            att = att.masked_fill(pad_mask[:, None, None, :], float("-inf"))
        att = att.softmax(dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, l, h)
        return self.proj(out)


class TransformerBlock(nn.Module):
    def __init__(self, hidden: int, heads: int, causal: bool, ffn_mult: int = 4,
                 rotary: bool = True):
        super().__init__()
        self.ln1 = nn.LayerNorm(hidden)
        self.attn = SelfAttention(hidden, heads, causal, rotary)
        self.ln2 = nn.LayerNorm(hidden)
        self.mlp = nn.Sequential(
            nn.Linear(hidden, ffn_mult * hidden),
            nn.GELU(),
            nn.Linear(ffn_mult * hidden, hidden),
        )

    def forward(self, x, pad_mask=None):
        x = x + self.attn(self.ln1(x), pad_mask)
        x = x + self.mlp(self.ln2(x))
        return x


class AudioEncoder(nn.Module):
    """Conv front end over 50 Hz log-mel frames + bidirectional transformer."""

    def __init__(self, cfg: SaslmConfig):
        super().__init__()
        h = cfg.hidden
        self.conv = nn.Sequential(
            nn.Conv1d(cfg.n_mels, h, kernel_size=5, padding=2),
            nn.GELU(),
            nn.Conv1d(h, h, kernel_size=5, padding=2),
            nn.GELU(),
        )
        self.blocks = nn.ModuleList(
            TransformerBlock(h, cfg.heads, causal=False, ffn_mult=cfg.ffn_mult)
            for _ in range(cfg.enc_layers)
        )
        self.ln = nn.LayerNorm(h)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        # frames: (T, n_mels) or (B, T, n_mels)
        squeeze = frames.dim() == 2
        if squeeze:
            frames = frames[None]
        x = self.conv(frames.transpose(1, 2)).transpose(1, 2)
        for blk in self.blocks:
            x = blk(x)
        x = self.ln(x)
        return x[0] if squeeze else x


class Saslm(nn.Module):
    def __init__(self, cfg: SaslmConfig):
        super().__init__()
        self.cfg = cfg
        self.layout = cfg.layout
        h = cfg.hidden
        self.encoder = AudioEncoder(cfg)
        self.adapter = nn.Sequential(nn.Linear(h, h), nn.GELU(), nn.Linear(h, h))
        self.tok_emb = nn.Embedding(self.layout.vocab_size, h)
        self.blocks = nn.ModuleList(
            TransformerBlock(h, cfg.heads, causal=True, ffn_mult=cfg.ffn_mult)
            for _ in range(cfg.dec_layers)
        )
        self.ln_f = nn.LayerNorm(h)
        self.head = nn.Linear(h, self.layout.vocab_size)

    def encoder_parameters(self):
        return list(self.encoder.parameters())

    def lm_parameters(self):
        enc = set(id(p) for p in self.encoder.parameters())
        return [p for p in self.parameters() if id(p) not in enc]

    def embed_packed(self, seq: SaslmSequence) -> torch.Tensor:
        """(L, H) input embeddings for one packed sequence."""
        ids = seq.ids.clamp(min=0)
        x = self.tok_emb(ids)
        emb_pos = seq.ids == EMB_ID
        x = x.clone()
        x[emb_pos] = self.adapter(seq.prefix_embeddings.to(x.dtype))
        return x

    def logits_for_positions(self, seqs: list[SaslmSequence]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Batched forward. Returns (logits, ids, loss_mask), each (B, L, ...),
        where logits[b, p] is the prediction of the token at position p (from
        strictly earlier positions); logits[:, 0] is zero and never scored."""
        pad = self.layout.pad
        l_max = max(len(s) for s in seqs)
        b = len(seqs)
        x = torch.zeros(b, l_max, self.cfg.hidden, dtype=self.tok_emb.weight.dtype,
                        device=self.tok_emb.weight.device)
        ids = torch.full((b, l_max), pad, dtype=torch.long)
        mask = torch.zeros(b, l_max, dtype=torch.bool)
        pad_mask = torch.ones(b, l_max, dtype=torch.bool)
        pad_emb = self.tok_emb(torch.tensor(pad))
        for i, s in enumerate(seqs):
            x[i, : len(s)] = self.embed_packed(s)
            x[i, len(s) :] = pad_emb
            ids[i, : len(s)] = s.ids
            mask[i, : len(s)] = s.loss_mask
            pad_mask[i, : len(s)] = False
        for blk in self.blocks:
            x = blk(x, pad_mask)
        raw = self.head(self.ln_f(x))  # raw[p] predicts token at p+1
        logits = torch.cat([torch.zeros_like(raw[:, :1]), raw[:, :-1]], dim=1)
        return logits, ids, mask


def encoder_forward(model: Saslm, audio: AudioBuffer) -> torch.Tensor:
    """(n, H) continuous embeddings at the 50 Hz token frame rate."""
    if audio.sample_rate != TOKENIZER_MEL.sample_rate:
        raise ValueError("encoder expects 16 kHz audio; resample explicitly")
    frames = torch.from_numpy(mel_frames(audio)).to(next(model.parameters()).dtype)
    return model.encoder(frames)


def masked_cross_entropy(logits: torch.Tensor, ids: torch.Tensor,
                         mask: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over masked positions; everything else contributes
    exactly nothing (zero gradient outside the mask)."""
    if not bool(mask.any()):
        raise ValueError("empty loss mask in every item")
    return F.cross_entropy(logits[mask], ids[mask])


def saslm_loss(model: Saslm, seqs: list[SaslmSequence]) -> torch.Tensor:
    """Mean next-token cross-entropy over loss-masked positions only."""
    logits, ids, mask = model.logits_for_positions(seqs)
    return masked_cross_entropy(logits, ids, mask)


@torch.no_grad()
def generate(model: Saslm, embeddings: torch.Tensor, max_len: int | None = None,
             mode: str = "greedy", seed: int = 0, temperature: float = 1.0,
             top_k: int = 0):
    """Autoregressive token generation from the [SOS][e][TOT] prefix.
    Returns the emitted semantic ids (EOS stripped)."""
    from .tokenizer import SemanticTokenSeq

    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown mode {mode!r}")
    layout = model.layout
    n = embeddings.shape[0]
    if max_len is None:
        max_len = math.ceil(model.cfg.gen_cap_ratio * n)
    gen = torch.Generator().manual_seed(seed)
    out: list[int] = []
    while len(out) < max_len:
        seq = pack_sequence(embeddings, torch.tensor(out, dtype=torch.long), layout)
        # drop the trailing EOS slot: condition only on what has been emitted
        seq = SaslmSequence(seq.prefix_embeddings, seq.target_ids,
                            seq.ids[:-1], seq.loss_mask[:-1])
        x = model.embed_packed(seq)[None]
        for blk in model.blocks:
            x = blk(x)
        logits = model.head(model.ln_f(x))[0, -1]
        if mode == "greedy":
            nxt = int(logits.argmax())
        else:
            scaled = logits / max(temperature, 1e-6)
            if top_k > 0:
                kth = torch.topk(scaled, top_k).values[-1]
                scaled = scaled.masked_fill(scaled < kth, float("-inf"))
            probs = scaled.softmax(dim=-1)
            nxt = int(torch.multinomial(probs, 1, generator=gen))
        if nxt == layout.eos:
            break
        # clamp non-semantic emissions into range: specials other than EOS
        # cannot appear inside a payload
        if nxt >= layout.k:
            break
        out.append(nxt)
    return SemanticTokenSeq(np.array(out, dtype=np.int64), source="saslm_generated")


@dataclass
class TrainConfig:
    steps: int = 1000
    peak_lr: float = 7.5e-5
    warmup_steps: int = 100
    weight_decay: float = 0.01
    encoder_lr_scale: float = 0.1  # "moderate" encoder fine-tuning
    batch_size: int = 8
    seed: int = 0
    log_every: int = 50


def _lr_lambda(step: int, warmup: int, total: int) -> float:
    if step < warmup:
        return (step + 1) / max(warmup, 1)
    if total <= warmup:
        return 1.0
    return max(0.0, (total - step) / (total - warmup))


def train_phase(model: Saslm, corpus: list[tuple[np.ndarray, np.ndarray]],
                phase: str, cfg: TrainConfig) -> list[tuple[int, float]]:
    """Train one stage. corpus items are (degraded 50 Hz mel frames (T, n_mels),
    clean-token target ids). phase 'lm_only' freezes the encoder; phase
    'encoder_finetune' freezes the language model and fine-tunes the encoder
    at a reduced learning rate."""
    if phase == "lm_only":
        trained = model.lm_parameters()
        lr = cfg.peak_lr
    elif phase == "encoder_finetune":
        trained = model.encoder_parameters()
        lr = cfg.peak_lr * cfg.encoder_lr_scale
    else:
        raise ValueError(f"unknown phase {phase!r}")

    trained_ids = set(id(p) for p in trained)
    for p in model.parameters():
        p.requires_grad_(id(p) in trained_ids)

    opt = torch.optim.AdamW(trained, lr=lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: _lr_lambda(s, cfg.warmup_steps, cfg.steps)
    )
    rng = np.random.default_rng(cfg.seed)
    history: list[tuple[int, float]] = []
    model.train()
    for step in range(cfg.steps):
        idx = rng.choice(len(corpus), size=min(cfg.batch_size, len(corpus)), replace=False)
        seqs = []
        for i in sorted(idx):
            frames, targets = corpus[i]
            emb = model.encoder(torch.from_numpy(frames).to(torch.float32))
            seqs.append(pack_sequence(emb, torch.from_numpy(targets), model.layout))
        loss = saslm_loss(model, seqs)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            history.append((step, float(loss.detach())))
    model.eval()
    for p in model.parameters():
        p.requires_grad_(True)
    return history
