"""Flat, typed pipeline configuration with file loading (YAML or JSON),
strict unknown-key rejection, flag overrides, and deterministic per-stage
seed fan-out from one global seed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import yaml


@dataclass
class PipelineConfig:
    # seeds
    seed: int = 0
    # mel profile names (resolved against dsp.MEL_PROFILES)
    mel_profile_tokenizer: str = "tokenizer"
    mel_profile_acoustic: str = "acoustic"
    # degradation probabilities
    prob_noise: float = 0.9
    prob_reverb: float = 0.5
    prob_clip: float = 0.25
    prob_bandlimit: float = 0.5
    # tokenizer
    tokenizer_k: int = 512
    # semantic language model dims
    saslm_hidden: int = 256
    saslm_enc_layers: int = 2
    saslm_dec_layers: int = 4
    saslm_heads: int = 4
    # flow-matching model dims
    fmse_hidden: int = 256
    fmse_dit_layers: int = 6
    fmse_heads: int = 4
    fmse_token_dim: int = 64
    fmse_convnext_blocks: int = 2
    # optimization (linear warmup then linear decay)
    peak_lr: float = 7.5e-5
    warmup_steps: int = 100
    saslm_steps: int = 1000
    fm_steps: int = 1000
    batch_size: int = 8
    # inference defaults
    nfe: int = 8
    cfg_strength: float = 0.5
    sway: float = -1.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.type in ("int", int) and isinstance(v, bool):
                raise TypeError(f"{f.name}: expected int, got bool")
            if f.type in ("int", int) and not isinstance(v, int):
                raise TypeError(f"{f.name}: expected int, got {type(v).__name__}")
            if f.type in ("float", float):
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    raise TypeError(f"{f.name}: expected float, got {type(v).__name__}")
                setattr(self, f.name, float(v))
            if f.type in ("str", str) and not isinstance(v, str):
                raise TypeError(f"{f.name}: expected str, got {type(v).__name__}")
        for name in ("prob_noise", "prob_reverb", "prob_clip", "prob_bandlimit"):
            p = getattr(self, name)
            if not (0.0 <= p <= 1.0):
                raise ValueError(f"{name}={p} out of [0, 1]")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    def with_overrides(self, **overrides) -> "PipelineConfig":
        """New config with the given fields replaced; None values are
        ignored so optional CLI flags pass through untouched."""
        d = self.to_dict()
        for k, v in overrides.items():
            if v is None:
                continue
            if k not in d:
                raise ValueError(f"unknown config keys: {k}")
            d[k] = v
        return PipelineConfig.from_dict(d)

    def stage_seed(self, stage: str) -> int:
        """Deterministic per-stage seed: the global seed mixed with a hash
        of the stage name."""
        digest = hashlib.sha256(stage.encode()).digest()
        mix = int.from_bytes(digest[:4], "big")
        return (self.seed * 1_000_003 + mix) % (2**31 - 1)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        if path.suffix in (".yaml", ".yml"):
            path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))
        else:
            path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    text = path.read_text()
    if path.suffix in (".yaml", ".yml"):
        data = yaml.safe_load(text)
    else:
        data = json.loads(text)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config root must be a mapping")
    return PipelineConfig.from_dict(data)
