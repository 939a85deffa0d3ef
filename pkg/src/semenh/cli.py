"""Batch command-line interface orchestrating the full pipeline.

Commands: make-corpus, simulate, tokenizer-train, saslm-train, fm-train,
enhance, evaluate, sweep-infer. All artifacts live under a run directory
(flag --run-dir or env SEMENH_RUN_DIR) with the layout:
config.snapshot, corpus/, manifests/, checkpoints/, reports/, plots/.

Exit codes: 0 success, 1 usage/config error, 2 missing upstream artifact,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .assets import make_asset_bank, make_toy_corpus
from .checkpoint import (
    CheckpointContainer,
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
    state_from_module,
    state_to_module,
)
from .config import PipelineConfig, load_config
from .degrade import (
    AssetBank,
    PairRecord,
    read_manifest,
    sample_recipe,
    simulate_pair,
    write_manifest,
)
from .dsp import (
    ACOUSTIC_MEL,
    TOKENIZER_MEL,
    AudioBuffer,
    GriffinLimVocoder,
    mel_spectrogram,
    read_wav,
    resample,
    write_wav,
)
from .fmse import FmseConfig, FmseModel, FmTrainConfig, fm_train
from .infer import EnhanceModels, EnhanceRequest, enhance, enhance_mel, purify_tokens
from .metrics import MetricReport, estoi, lsd, si_sdr, token_error_rate
from .saslm import Saslm, SaslmConfig, TrainConfig, train_phase
from .tokenizer import Codebook, mel_frames, tokenize, train_codebook

RUN_DIR_ENV = "SEMENH_RUN_DIR"
CORPUS_RATE = ACOUSTIC_MEL.sample_rate

SWEEP_NFE = (1, 2, 4, 8, 16, 32)
SWEEP_CFG = (0.0, 0.25, 0.5, 1.0, 2.0)
SWEEP_SWAY = (0.0, -0.5, -1.0)


class MissingArtifactError(Exception):
    """An upstream pipeline stage has not produced its artifact yet."""

    def __init__(self, stage: str, path: Path):
        super().__init__(f"missing artifact {path}: run the {stage!r} stage first")
        self.stage = stage


# --- run directory plumbing ------------------------------------------------

def resolve_run_dir(args) -> Path:
    root = args.run_dir or os.environ.get(RUN_DIR_ENV) or "runs/default"
    run = Path(root)
    for sub in ("corpus", "manifests", "checkpoints", "reports", "plots"):
        (run / sub).mkdir(parents=True, exist_ok=True)
    return run


def resolve_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else PipelineConfig()
    overrides = {k: getattr(args, k) for k in
                 ("seed", "nfe", "cfg_strength", "sway")
                 if hasattr(args, k) and getattr(args, k) is not None}
    return cfg.with_overrides(**overrides)


def snapshot_config(run: Path, cfg: PipelineConfig) -> None:
    cfg.save(run / "config.snapshot")


def saslm_config(cfg: PipelineConfig) -> SaslmConfig:
    return SaslmConfig(k=cfg.tokenizer_k, hidden=cfg.saslm_hidden,
                       enc_layers=cfg.saslm_enc_layers,
                       dec_layers=cfg.saslm_dec_layers, heads=cfg.saslm_heads)


def fmse_config(cfg: PipelineConfig) -> FmseConfig:
    return FmseConfig(k=cfg.tokenizer_k, hidden=cfg.fmse_hidden,
                      dit_layers=cfg.fmse_dit_layers, heads=cfg.fmse_heads,
                      token_dim=cfg.fmse_token_dim,
                      convnext_blocks=cfg.fmse_convnext_blocks)


def require_checkpoint(run: Path, name: str, stage: str,
                       component: str) -> CheckpointContainer:
    path = run / "checkpoints" / name
    if not path.exists():
        raise MissingArtifactError(stage, path)
    return load_checkpoint(path, expect_component=component)


def load_codebook(run: Path) -> Codebook:
    c = require_checkpoint(run, "tokenizer.ckpt", "tokenizer-train", "tokenizer")
    return Codebook(c.state["centroids"])


def load_saslm(run: Path, cfg: PipelineConfig) -> Saslm:
    c = require_checkpoint(run, "saslm.ckpt", "saslm-train", "saslm")
    model = Saslm(saslm_config(cfg))
    state_to_module(c, model)
    model.eval()
    return model


def load_fmse(run: Path, cfg: PipelineConfig, name: str = "fmse.ckpt") -> FmseModel:
    c = require_checkpoint(run, name, "fm-train", "fmse")
    snap = c.config
    for key in ("mel_profile_acoustic", "mel_profile_tokenizer"):
        if key in snap and snap[key] != getattr(cfg, key):
            raise ValueError(
                f"mel profile mismatch: checkpoint trained with "
                f"{key}={snap[key]!r}, request uses {getattr(cfg, key)!r}")
    model = FmseModel(fmse_config(cfg))
    state_to_module(c, model)
    model.eval()
    return model


def write_curve(path: Path, history: list[tuple[int, float]]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        for step, loss in history:
            w.writerow([step, repr(loss)])


def rel_to_run(run: Path, path: Path) -> str:
    """Manifest paths are stored relative to the run directory when
    possible, so identical runs in different locations produce identical
    manifests."""
    try:
        return str(path.resolve().relative_to(run.resolve()))
    except ValueError:
        return str(path)


def abs_from_run(run: Path, path: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() else run / p


def corpus_wavs(corpus_dir: Path) -> list[Path]:
    paths = sorted(corpus_dir.glob("*.wav"))
    if not paths:
        raise MissingArtifactError("make-corpus", corpus_dir)
    return paths


# --- commands ---------------------------------------------------------------

def cmd_make_corpus(args) -> int:
    run = resolve_run_dir(args)
    cfg = resolve_config(args)
    snapshot_config(run, cfg)
    items = make_toy_corpus(args.n_items, args.duration, CORPUS_RATE,
                            cfg.stage_seed("corpus"))
    out = Path(args.out) if args.out else run / "corpus"
    out.mkdir(parents=True, exist_ok=True)
    for i, audio in enumerate(items):
        write_wav(out / f"item_{i:02d}.wav", audio)
    print(f"wrote {len(items)} clean utterances to {out}")
    return 0


def _make_bank(cfg: PipelineConfig) -> AssetBank:
    return make_asset_bank(CORPUS_RATE, cfg.stage_seed("assets"))


def cmd_simulate(args) -> int:
    run = resolve_run_dir(args)
    cfg = resolve_config(args)
    snapshot_config(run, cfg)
    corpus = Path(args.corpus) if args.corpus else run / "corpus"
    bank = _make_bank(cfg)
    probs = {"noise": cfg.prob_noise, "reverb": cfg.prob_reverb,
             "clip": cfg.prob_clip, "bandlimit": cfg.prob_bandlimit}
    degraded_dir = run / "manifests" / "degraded"
    degraded_dir.mkdir(exist_ok=True)
    base_seed = cfg.stage_seed("simulate")
    records = []
    for i, path in enumerate(corpus_wavs(corpus)):
        clean = read_wav(path)
        recipe = sample_recipe(base_seed + i, probs, bank)
        if args.snr_db is not None:
            recipe.noise = {"noise_id": sorted(bank.noises)[0],
                            "snr_db": float(args.snr_db)}
        _, degraded, record = simulate_pair(clean, bank, recipe)
        dpath = degraded_dir / path.name
        write_wav(dpath, degraded)
        record.clean_path = rel_to_run(run, path)
        record.degraded_path = rel_to_run(run, dpath)
        records.append(record)
    manifest = run / "manifests" / "pairs.jsonl"
    write_manifest(manifest, records)
    print(f"wrote {len(records)} pairs to {manifest}")
    return 0


def cmd_tokenizer_train(args) -> int:
    run = resolve_run_dir(args)
    cfg = resolve_config(args)
    snapshot_config(run, cfg)
    corpus = Path(args.corpus) if args.corpus else run / "corpus"
    audios = [resample(read_wav(p), TOKENIZER_MEL.sample_rate)
              for p in corpus_wavs(corpus)]
    rng = np.random.default_rng(cfg.stage_seed("tokenizer"))
    cb = train_codebook(audios, cfg.tokenizer_k, rng)
    container = CheckpointContainer("tokenizer", cfg.to_dict(),
                                    {"centroids": cb.centroids})
    save_checkpoint(run / "checkpoints" / "tokenizer.ckpt", container)
    print(f"trained {cfg.tokenizer_k}-entry codebook")
    return 0


def _pairs(run: Path, args) -> list[PairRecord]:
    manifest = Path(args.manifest) if args.manifest else run / "manifests" / "pairs.jsonl"
    if not manifest.exists():
        raise MissingArtifactError("simulate", manifest)
    return read_manifest(manifest)


def cmd_saslm_train(args) -> int:
    run = resolve_run_dir(args)
    cfg = resolve_config(args)
    snapshot_config(run, cfg)
    cb = load_codebook(run)
    corpus = []
    for rec in _pairs(run, args):
        clean16 = resample(read_wav(abs_from_run(run, rec.clean_path)), TOKENIZER_MEL.sample_rate)
        degraded16 = resample(read_wav(abs_from_run(run, rec.degraded_path)), TOKENIZER_MEL.sample_rate)
        targets = tokenize(clean16, cb).ids
        corpus.append((mel_frames(degraded16), targets))

    torch.manual_seed(cfg.stage_seed("saslm-init"))
    model = Saslm(saslm_config(cfg))
    ckpt_path = run / "checkpoints" / "saslm.ckpt"
    start_step = 0
    if ckpt_path.exists():
        prev = load_checkpoint(ckpt_path, expect_component="saslm")
        state_to_module(prev, model)
        start_step = prev.step
    phase = {"lm": "lm_only", "encoder": "encoder_finetune"}[args.phase]
    steps = args.steps if args.steps is not None else cfg.saslm_steps
    tc = TrainConfig(steps=steps, peak_lr=cfg.peak_lr,
                     warmup_steps=cfg.warmup_steps, batch_size=cfg.batch_size,
                     seed=cfg.stage_seed(f"saslm-{args.phase}"))
    history = train_phase(model, corpus, phase, tc)
    save_checkpoint(ckpt_path, CheckpointContainer(
        "saslm", cfg.to_dict(), state_from_module(model),
        step=start_step + steps))
    write_curve(run / "reports" / f"saslm_curve_{args.phase}.csv", history)
    print(f"saslm phase {args.phase}: final loss {history[-1][1]:.4f}")
    return 0


def cmd_fm_train(args) -> int:
    run = resolve_run_dir(args)
    cfg = resolve_config(args)
    snapshot_config(run, cfg)
    cb = load_codebook(run)
    dataset = []
    for rec in _pairs(run, args):
        clean = read_wav(abs_from_run(run, rec.clean_path))
        degraded = read_wav(abs_from_run(run, rec.degraded_path))
        clean24 = resample(clean, CORPUS_RATE)
        degraded24 = resample(degraded, CORPUS_RATE)
        x1 = mel_spectrogram(clean24, ACOUSTIC_MEL).values
        y = mel_spectrogram(degraded24, ACOUSTIC_MEL).values
        z = tokenize(resample(clean, TOKENIZER_MEL.sample_rate), cb).ids
        dataset.append((x1, y, z))

    torch.manual_seed(cfg.stage_seed("fmse-init"))
    model = FmseModel(fmse_config(cfg))
    steps = args.steps if args.steps is not None else cfg.fm_steps
    tc = FmTrainConfig(steps=steps, peak_lr=cfg.peak_lr,
                       warmup_steps=cfg.warmup_steps,
                       seed=cfg.stage_seed("fm-train"),
                       no_degrad_mask=args.no_degrad_mask,
                       no_semantic=args.no_semantic)
    history = fm_train(model, dataset, tc)
    name = args.ckpt_name or "fmse.ckpt"
    save_checkpoint(run / "checkpoints" / name, CheckpointContainer(
        "fmse", cfg.to_dict(), state_from_module(model), step=steps))
    write_curve(run / "reports" / f"fm_curve_{Path(name).stem}.csv", history)
    print(f"flow-matching training: final loss {history[-1][1]:.4f}")
    return 0


def _load_models(run: Path, cfg: PipelineConfig,
                 fmse_name: str = "fmse.ckpt") -> EnhanceModels:
    return EnhanceModels(saslm=load_saslm(run, cfg),
                         fmse=load_fmse(run, cfg, fmse_name),
                         codebook=load_codebook(run))


def cmd_enhance(args) -> int:
    run = resolve_run_dir(args)
    cfg = resolve_config(args)
    models = _load_models(run, cfg)
    req = EnhanceRequest(
        degraded=read_wav(args.infile),
        prompt=read_wav(args.prompt) if args.prompt else None,
        nfe=cfg.nfe, cfg_strength=cfg.cfg_strength, sway=cfg.sway,
        seed=cfg.seed, method=args.method,
        no_semantic=args.no_semantic, no_prompt_tokens=args.no_prompt_tokens)
    out = enhance(req, models, GriffinLimVocoder(n_iters=args.vocoder_iters))
    write_wav(args.out, out)
    print(f"wrote {args.out}")
    return 0


def _trim_pair(a: AudioBuffer, b: AudioBuffer) -> tuple[AudioBuffer, AudioBuffer]:
    n = min(len(a), len(b))
    return (AudioBuffer(a.samples[:n], a.sample_rate),
            AudioBuffer(b.samples[:n], b.sample_rate))


def _safe_estoi(ref: AudioBuffer, est: AudioBuffer) -> float | None:
    try:
        return estoi(ref, est)
    except ValueError:
        return None


def cmd_evaluate(args) -> int:
    run = resolve_run_dir(args)
    cfg = resolve_config(args)
    snapshot_config(run, cfg)
    models = _load_models(run, cfg)
    cb = models.codebook
    vocoder = GriffinLimVocoder(n_iters=args.vocoder_iters)
    report = MetricReport(metadata={
        "nfe": cfg.nfe, "cfg_strength": cfg.cfg_strength, "sway": cfg.sway,
        "seed": cfg.seed,
        "checkpoints": {n: load_checkpoint(run / "checkpoints" / n).checksum
                        for n in ("tokenizer.ckpt", "saslm.ckpt", "fmse.ckpt")},
    })
    for rec in _pairs(run, args):
        clean = read_wav(abs_from_run(run, rec.clean_path))
        degraded = read_wav(abs_from_run(run, rec.degraded_path))
        clean24 = resample(clean, CORPUS_RATE)
        degraded24 = resample(degraded, CORPUS_RATE)
        x1 = mel_spectrogram(clean24, ACOUSTIC_MEL).values
        y = mel_spectrogram(degraded24, ACOUSTIC_MEL).values

        req = EnhanceRequest(degraded=degraded, nfe=cfg.nfe,
                             cfg_strength=cfg.cfg_strength, sway=cfg.sway,
                             seed=cfg.seed)
        enh_mel, purified = enhance_mel(req, models)
        enhanced = vocoder(enh_mel)
        ref_tok = tokenize(resample(clean, TOKENIZER_MEL.sample_rate), cb).ids

        c_d = _trim_pair(clean24, degraded24)
        c_e = _trim_pair(clean24, enhanced)
        t = min(x1.shape[1], y.shape[1], enh_mel.n_frames)
        report.add(Path(rec.clean_path).stem, {
            "lsd_degraded": lsd(x1[:, :t], y[:, :t]),
            "lsd_enhanced": lsd(x1[:, :t], enh_mel.values[:, :t]),
            "si_sdr_degraded": si_sdr(*c_d),
            "estoi_degraded": _safe_estoi(*c_d),
            "estoi_enhanced": _safe_estoi(*c_e),
            "token_error_rate": token_error_rate(ref_tok, purified),
        })
    report.to_json(run / "reports" / "metrics.json")
    report.to_csv(run / "reports" / "metrics.csv")
    agg = report.aggregates()
    print(f"evaluated {len(report.per_file)} items; "
          f"mean lsd_enhanced {agg.get('lsd_enhanced', float('nan')):.4f}")
    return 0


def cmd_sweep_infer(args) -> int:
    run = resolve_run_dir(args)
    cfg = resolve_config(args)
    snapshot_config(run, cfg)
    models = _load_models(run, cfg)
    pairs = _pairs(run, args)[: args.items]
    rows = []
    nfes = args.nfe_list or SWEEP_NFE
    gammas = args.cfg_list or SWEEP_CFG
    sways = args.sway_list or SWEEP_SWAY
    prepared = []
    for rec in pairs:
        clean24 = resample(read_wav(abs_from_run(run, rec.clean_path)), CORPUS_RATE)
        degraded = read_wav(abs_from_run(run, rec.degraded_path))
        prepared.append((mel_spectrogram(clean24, ACOUSTIC_MEL).values,
                         degraded, purify_tokens(degraded, models)))
    for nfe in nfes:
        for gamma in gammas:
            for sway in sways:
                lsds, start = [], time.perf_counter()
                for x1, degraded, tokens in prepared:
                    req = EnhanceRequest(degraded=degraded, nfe=int(nfe),
                                         cfg_strength=float(gamma),
                                         sway=float(sway), seed=cfg.seed)
                    mel, _ = enhance_mel(req, models, purified=tokens)
                    t = min(x1.shape[1], mel.n_frames)
                    lsds.append(lsd(x1[:, :t], mel.values[:, :t]))
                elapsed = (time.perf_counter() - start) / max(len(prepared), 1)
                rows.append([int(nfe), float(gamma), float(sway),
                             repr(float(np.mean(lsds))), repr(elapsed)])
    out = Path(args.out) if args.out else run / "reports" / "sweep.csv"
    with open(out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["nfe", "cfg_strength", "sway", "mean_lsd_enhanced",
                    "seconds_per_item"])
        w.writerows(rows)
    print(f"wrote {len(rows)} sweep cells to {out}")
    return 0


# --- parser -----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="semenh",
                description="Two-stage generative speech enhancement pipeline")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="pipeline config file (YAML or JSON)")
        sp.add_argument("--run-dir", help=f"artifact root (or ${RUN_DIR_ENV})")
        sp.add_argument("--seed", type=int, help="override the global seed")

    sp = sub.add_parser("make-corpus", help="generate synthetic clean utterances")
    common(sp)
    sp.add_argument("--out", help="output directory (default RUN/corpus)")
    sp.add_argument("--n-items", type=int, default=8)
    sp.add_argument("--duration", type=float, default=1.2)
    sp.set_defaults(func=cmd_make_corpus)

    sp = sub.add_parser("simulate", help="degrade clean utterances into pairs")
    common(sp)
    sp.add_argument("--corpus", help="clean corpus dir (default RUN/corpus)")
    sp.add_argument("--snr-db", type=float,
                    help="force additive noise at this SNR on every item")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("tokenizer-train", help="train the semantic codebook")
    common(sp)
    sp.add_argument("--corpus", help="clean corpus dir (default RUN/corpus)")
    sp.set_defaults(func=cmd_tokenizer_train)

    sp = sub.add_parser("saslm-train", help="train the semantic language model")
    common(sp)
    sp.add_argument("--manifest", help="pairs manifest (default RUN/manifests)")
    sp.add_argument("--phase", choices=("lm", "encoder"), default="lm")
    sp.add_argument("--steps", type=int)
    sp.set_defaults(func=cmd_saslm_train)

    sp = sub.add_parser("fm-train", help="train the flow-matching model")
    common(sp)
    sp.add_argument("--manifest", help="pairs manifest (default RUN/manifests)")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--no-degrad-mask", action="store_true")
    sp.add_argument("--no-semantic", action="store_true")
    sp.add_argument("--ckpt-name", help="checkpoint filename (default fmse.ckpt)")
    sp.set_defaults(func=cmd_fm_train)

    sp = sub.add_parser("enhance", help="enhance one degraded recording")
    common(sp)
    sp.add_argument("--in", dest="infile", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--prompt", help="reference speaker recording (<= 10 s)")
    sp.add_argument("--nfe", type=int)
    sp.add_argument("--cfg", dest="cfg_strength", type=float)
    sp.add_argument("--sway", type=float)
    sp.add_argument("--method", choices=("euler", "midpoint"), default="euler")
    sp.add_argument("--no-semantic", action="store_true")
    sp.add_argument("--no-prompt-tokens", action="store_true")
    sp.add_argument("--vocoder-iters", type=int, default=32)
    sp.set_defaults(func=cmd_enhance)

    sp = sub.add_parser("evaluate", help="score a manifest and write a report")
    common(sp)
    sp.add_argument("--manifest", help="pairs manifest (default RUN/manifests)")
    sp.add_argument("--nfe", type=int)
    sp.add_argument("--cfg", dest="cfg_strength", type=float)
    sp.add_argument("--sway", type=float)
    sp.add_argument("--vocoder-iters", type=int, default=16)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("sweep-infer", help="grid sweep over NFE, CFG, sway")
    common(sp)
    sp.add_argument("--manifest", help="pairs manifest (default RUN/manifests)")
    sp.add_argument("--items", type=int, default=1)
    sp.add_argument("--out", help="CSV path (default RUN/reports/sweep.csv)")
    sp.add_argument("--nfe-list", type=int, nargs="+")
    sp.add_argument("--cfg-list", type=float, nargs="+")
    sp.add_argument("--sway-list", type=float, nargs="+")
    sp.set_defaults(func=cmd_sweep_infer)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as e:
        return int(e.code or 0)
    except MissingArtifactError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (RuntimeError, FloatingPointError) as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return 3
    except (ValueError, TypeError, OSError, KeyError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
