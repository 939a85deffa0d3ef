"""Acceptance suite: property- and oracle-based criteria for the full
two-stage enhancement pipeline on a synthetic 8-utterance corpus.

A1 simulation exactness          A5 ablation mechanics
A2 semantic-LM overfit oracle    A6 inference-sweep mechanics
A3 flow-matching overfit oracle  A7 numerical verifications
A4 end-to-end enhancement oracle A8 determinism and prompt contract

Training fixtures are session-scoped: the expensive overfit runs execute
once and are shared by A2-A5 and A8.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from semenh.assets import make_asset_bank, make_toy_corpus, white_noise
from semenh.checkpoint import CheckpointContainer, save_checkpoint, state_from_module
from semenh.cli import main
from semenh.degrade import (
    DEFAULT_PROBS,
    PairRecord,
    apply_bandlimit,
    apply_clip,
    apply_reverb,
    mix_noise,
    sample_recipe,
    write_manifest,
)
from semenh.dsp import (
    ACOUSTIC_MEL,
    TOKENIZER_MEL,
    AudioBuffer,
    GriffinLimVocoder,
    mel_spectrogram,
    resample,
    write_wav,
)
from semenh.fmse import FmseConfig, FmseModel, FmTrainConfig, fm_train
from semenh.infer import (
    EnhanceModels,
    EnhanceRequest,
    assemble_inference,
    cfg_velocity,
    enhance_mel,
    ode_solve,
    sway_times,
)
from semenh.metrics import estoi, lsd
from semenh.saslm import (
    Saslm,
    SaslmConfig,
    TrainConfig,
    encoder_forward,
    generate,
    masked_cross_entropy,
    pack_sequence,
    saslm_loss,
    train_phase,
)
from semenh.tokenizer import mel_frames, tokenize, train_codebook

RATE = ACOUSTIC_MEL.sample_rate
K = 32
SASLM_CFG = SaslmConfig(k=K, hidden=64, enc_layers=1, dec_layers=2, heads=2)
FM_CFG = FmseConfig(k=K, n_mels=ACOUSTIC_MEL.n_mels, token_dim=16,
                    convnext_blocks=1, dit_layers=4, hidden=128, heads=4)
OVERFIT_LR = 2e-3  # toy-scale overfit runs need a much larger step than the
                   # production default learning rate


# --- shared data fixtures ---------------------------------------------------

@pytest.fixture(scope="session")
def clean_corpus():
    return make_toy_corpus(8, 1.2, RATE, seed=0)


@pytest.fixture(scope="session")
def bank():
    return make_asset_bank(RATE, seed=1)


@pytest.fixture(scope="session")
def codebook(clean_corpus):
    audios16 = [resample(a, TOKENIZER_MEL.sample_rate) for a in clean_corpus]
    return train_codebook(audios16, K, np.random.default_rng(2))


@pytest.fixture(scope="session")
def pairs(clean_corpus, bank, codebook):
    """Per item: clean signal/mel/tokens plus two degraded variants
    (a 0 dB white-noise mix used by A4, and a sampled recipe)."""
    items = []
    for i, clean in enumerate(clean_corpus):
        clean16 = resample(clean, TOKENIZER_MEL.sample_rate)
        tokens = tokenize(clean16, codebook).ids
        clean_mel = mel_spectrogram(clean, ACOUSTIC_MEL).values

        snr0, _ = mix_noise(clean, bank.noise("noise00"), 0.0)
        variants = [snr0]
        recipe = sample_recipe(100 + i, DEFAULT_PROBS, bank)
        degraded = clean
        if recipe.reverb:
            degraded = apply_reverb(degraded, bank.rir(recipe.reverb["rir_id"]))
        if recipe.clip:
            degraded = apply_clip(degraded, recipe.clip["threshold"])
        if recipe.bandlimit:
            degraded = apply_bandlimit(degraded, recipe.bandlimit["bandwidth_hz"])
        if recipe.noise:
            degraded, _ = mix_noise(degraded, bank.noise(recipe.noise["noise_id"]),
                                    recipe.noise["snr_db"])
        variants.append(degraded)

        items.append({
            "clean": clean,
            "clean_mel": clean_mel,
            "tokens": tokens,
            "variants": variants,
            "variant_mels": [mel_spectrogram(v, ACOUSTIC_MEL).values
                             for v in variants],
            "variant_frames16": [
                mel_frames(resample(v, TOKENIZER_MEL.sample_rate))
                for v in variants],
        })
    return items


# --- shared trained models --------------------------------------------------

def _saslm_accuracy(model, corpus):
    seqs = []
    with torch.no_grad():
        for frames, targets in corpus:
            emb = model.encoder(torch.from_numpy(frames).to(torch.float32))
            seqs.append(pack_sequence(emb, torch.from_numpy(targets), model.layout))
        logits, ids, mask = model.logits_for_positions(seqs)
    pred = logits.argmax(dim=-1)
    return float((pred[mask] == ids[mask]).float().mean())


def _greedy_exact_count(model, pairs, variant):
    hits = 0
    with torch.no_grad():
        for item in pairs:
            frames = item["variant_frames16"][variant]
            emb = model.encoder(torch.from_numpy(frames).to(torch.float32))
            out = generate(model, emb, mode="greedy").ids
            hits += int(np.array_equal(out, item["tokens"]))
    return hits


@pytest.fixture(scope="session")
def trained_saslm(pairs):
    corpus = [(item["variant_frames16"][v], item["tokens"])
              for item in pairs for v in range(2)]
    torch.manual_seed(10)
    model = Saslm(SASLM_CFG)
    start = time.perf_counter()
    steps_used, chunk = 0, 250
    acc = 0.0
    while steps_used < 2000:
        train_phase(model, corpus, "lm_only",
                    TrainConfig(steps=chunk, peak_lr=OVERFIT_LR,
                                warmup_steps=20, batch_size=8,
                                seed=steps_used, log_every=chunk))
        steps_used += chunk
        acc = _saslm_accuracy(model, corpus)
        if acc >= 0.99 and _greedy_exact_count(model, pairs, 0) >= 7:
            break
    return {"model": model, "steps": steps_used, "accuracy": acc,
            "seconds": time.perf_counter() - start, "corpus": corpus}


def _fm_dataset(pairs):
    return [(item["clean_mel"], item["variant_mels"][v], item["tokens"])
            for item in pairs for v in range(2)]


def _train_fm_until(dataset, seed, max_steps=3000, no_degrad_mask=False):
    torch.manual_seed(seed)
    model = FmseModel(FM_CFG)
    start = time.perf_counter()
    history = fm_train(model, dataset, FmTrainConfig(
        steps=max_steps, peak_lr=OVERFIT_LR, warmup_steps=100,
        seed=seed, log_every=25, no_degrad_mask=no_degrad_mask))
    return {"model": model, "history": history, "steps": max_steps,
            "seconds": time.perf_counter() - start}


@pytest.fixture(scope="session")
def trained_fm(pairs):
    return _train_fm_until(_fm_dataset(pairs), seed=20)


@pytest.fixture(scope="session")
def trained_fm_nodm(pairs):
    return _train_fm_until(_fm_dataset(pairs), seed=30, no_degrad_mask=True)


@pytest.fixture(scope="session")
def models(trained_saslm, trained_fm, codebook):
    return EnhanceModels(trained_saslm["model"], trained_fm["model"], codebook)


def conditioned_generate(fm, y_mel, tokens, nfe=32, gamma=0.0, sway=-1.0,
                         seed=0, no_semantic=False):
    """Flow generation of a full utterance conditioned on its degraded mel
    and (optionally) its true clean tokens."""
    with torch.no_grad():
        yn = fm.normalize(y_mel)
        empty = np.empty(0, dtype=np.int64)
        cond, layout = assemble_inference(fm, None, empty, yn, tokens,
                                          no_semantic=no_semantic)
        uncond, _ = assemble_inference(fm, None, empty, yn, tokens,
                                       no_semantic=no_semantic, uncond=True)
        rng = np.random.default_rng(seed)
        x0 = torch.from_numpy(
            rng.standard_normal((fm.cfg.n_mels, layout.total))).to(yn.dtype)
        x1 = ode_solve(
            lambda x, t: cfg_velocity(fm, x, cond, uncond, t, gamma),
            x0, sway_times(nfe, sway))
        return fm.denormalize(x1)


# --- A1: simulation exactness ----------------------------------------------

class TestA1SimulationExactness:
    def test_simulation_properties_and_frequencies(self, bank):
        start = time.perf_counter()
        rng = np.random.default_rng(0)
        clean = make_toy_corpus(4, 0.8, RATE, seed=3)

        # 200 seeded recipes: exact SNR and clip-peak properties
        for seed in range(200):
            recipe = sample_recipe(seed, DEFAULT_PROBS, bank)
            audio = clean[seed % len(clean)]
            if recipe.reverb:
                audio = apply_reverb(audio, bank.rir(recipe.reverb["rir_id"]))
            if recipe.clip:
                thr = recipe.clip["threshold"]
                peak_before = np.max(np.abs(audio.samples))
                audio = apply_clip(audio, thr)
                assert np.max(np.abs(audio.samples)) <= thr * peak_before + 1e-6
            if recipe.bandlimit:
                audio = apply_bandlimit(audio, recipe.bandlimit["bandwidth_hz"])
            if recipe.noise:
                pre = audio
                mixed, info = mix_noise(pre, bank.noise(recipe.noise["noise_id"]),
                                        recipe.noise["snr_db"])
                noise_part = mixed.samples / info.peak_gain - pre.samples
                measured = 10.0 * np.log10(np.mean(pre.samples ** 2)
                                           / np.mean(noise_part ** 2))
                assert abs(measured - recipe.noise["snr_db"]) < 1e-6

        # band-limit stopband attenuation >= 40 dB on white noise
        noise = white_noise(RATE, RATE, rng)
        for bw in (2000, 4000, 8000):
            out = apply_bandlimit(noise, bw)
            spec_in = np.abs(np.fft.rfft(noise.samples)) ** 2
            spec_out = np.abs(np.fft.rfft(out.samples)) ** 2
            freqs = np.fft.rfftfreq(len(noise), 1.0 / RATE)
            stop = freqs > 1.2 * bw / 2.0
            atten = 10.0 * np.log10(spec_in[stop].sum() / spec_out[stop].sum())
            assert atten >= 40.0, f"bandwidth {bw}: attenuation {atten:.1f} dB"

        # empirical distortion frequencies over 1e5 draws, within +/-2%
        counts = {k: 0 for k in DEFAULT_PROBS}
        n_draws = 100_000
        for seed in range(n_draws):
            r = sample_recipe(seed, DEFAULT_PROBS, bank)
            counts["reverb"] += r.reverb is not None
            counts["clip"] += r.clip is not None
            counts["bandlimit"] += r.bandlimit is not None
            counts["noise"] += r.noise is not None
        for name, p in DEFAULT_PROBS.items():
            emp = counts[name] / n_draws
            assert abs(emp - p) / p <= 0.02, f"{name}: {emp:.4f} vs {p}"

        elapsed = time.perf_counter() - start
        assert elapsed < 120.0, f"A1 runtime {elapsed:.1f}s exceeds 2 min"
        print(f"\nA1 pass: SNR exact, clip bounded, stopband >= 40 dB, "
              f"frequencies within 2% ({elapsed:.1f}s)")


# --- A2: semantic-LM overfit oracle ----------------------------------------

class TestA2SaslmOverfit:
    def test_overfit_within_budget(self, trained_saslm, pairs):
        res = trained_saslm
        assert res["steps"] <= 2000
        assert res["accuracy"] >= 0.95, \
            f"next-token accuracy {res['accuracy']:.3f} < 0.95"
        exact = _greedy_exact_count(res["model"], pairs, variant=0)
        assert exact >= 6, f"greedy exact on {exact}/8 items"
        assert res["seconds"] < 600.0, \
            f"A2 runtime {res['seconds']:.0f}s exceeds 10 min"
        print(f"\nA2 pass: accuracy {res['accuracy']:.3f} at "
              f"{res['steps']} steps, greedy exact {exact}/8 "
              f"({res['seconds']:.0f}s)")


# --- A3: flow-matching overfit oracle --------------------------------------

class TestA3FlowMatchingOverfit:
    def test_loss_drop_and_conditioned_lsd(self, trained_fm, pairs):
        res = trained_fm
        losses = [v for _, v in res["history"]]
        assert res["steps"] <= 3000
        assert min(losses) < 0.1 * losses[0], \
            f"loss {min(losses):.4f} not below 10% of step-0 {losses[0]:.4f}"

        lsds = []
        for item in pairs:
            out = conditioned_generate(res["model"], item["variant_mels"][0],
                                       item["tokens"], nfe=32, gamma=0.0)
            t = min(out.shape[1], item["clean_mel"].shape[1])
            lsds.append(lsd(item["clean_mel"][:, :t], out[:, :t]))
        mean_lsd = float(np.mean(lsds))
        assert mean_lsd < 1.0, f"conditioned-generation LSD {mean_lsd:.3f} >= 1.0"
        assert res["seconds"] < 900.0, \
            f"A3 runtime {res['seconds']:.0f}s exceeds 15 min"
        print(f"\nA3 pass: loss {losses[0]:.3f} -> {min(losses):.4f} in "
              f"{res['steps']} steps, LSD {mean_lsd:.3f} ({res['seconds']:.0f}s)")


# --- A4: end-to-end enhancement oracle --------------------------------------

class TestA4EndToEnd:
    def test_enhancement_beats_degraded(self, models, pairs):
        vocoder = GriffinLimVocoder(n_iters=32)
        lsd_wins, estoi_wins = 0, 0
        for item in pairs:
            degraded = item["variants"][0]  # 0 dB white-noise mix
            req = EnhanceRequest(degraded=degraded, nfe=8, cfg_strength=0.5,
                                 sway=-1.0, seed=0)
            enh_mel, _ = enhance_mel(req, models)
            t = min(enh_mel.n_frames, item["clean_mel"].shape[1])
            lsd_enh = lsd(item["clean_mel"][:, :t], enh_mel.values[:, :t])
            lsd_deg = lsd(item["clean_mel"][:, :t],
                          item["variant_mels"][0][:, :t])
            lsd_wins += lsd_enh < lsd_deg

            enhanced = vocoder(enh_mel)
            n = min(len(item["clean"]), len(enhanced), len(degraded))
            clean_t = AudioBuffer(item["clean"].samples[:n], RATE)
            e_deg = estoi(clean_t, AudioBuffer(degraded.samples[:n], RATE))
            e_enh = estoi(clean_t, AudioBuffer(enhanced.samples[:n], RATE))
            estoi_wins += e_enh > e_deg
        assert lsd_wins >= 7, f"enhanced LSD better on only {lsd_wins}/8"
        assert estoi_wins >= 6, f"intelligibility better on only {estoi_wins}/8"
        print(f"\nA4 pass: LSD wins {lsd_wins}/8, intelligibility wins "
              f"{estoi_wins}/8")


# --- A5: ablation mechanics --------------------------------------------------

class TestA5Ablations:
    def test_no_semantic_worsens_lsd(self, trained_fm, pairs):
        fm = trained_fm["model"]
        with_sem, without_sem = [], []
        for item in pairs:
            y = item["variant_mels"][0]
            t = item["clean_mel"].shape[1]
            a = conditioned_generate(fm, y, item["tokens"], nfe=32, gamma=0.0)
            b = conditioned_generate(fm, y, item["tokens"], nfe=32, gamma=0.0,
                                     no_semantic=True)
            tt = min(t, a.shape[1])
            with_sem.append(lsd(item["clean_mel"][:, :tt], a[:, :tt]))
            without_sem.append(lsd(item["clean_mel"][:, :tt], b[:, :tt]))
        m_with, m_without = float(np.mean(with_sem)), float(np.mean(without_sem))
        assert m_without > m_with, \
            f"dropping the token channel did not worsen LSD " \
            f"({m_without:.3f} vs {m_with:.3f})"
        print(f"\nA5a pass: LSD {m_with:.3f} with tokens vs "
              f"{m_without:.3f} without")

    def test_no_degrad_mask_still_converges(self, trained_fm_nodm):
        losses = [v for _, v in trained_fm_nodm["history"]]
        assert trained_fm_nodm["steps"] <= 3000
        assert min(losses) < 0.1 * losses[0]
        print(f"\nA5b pass: no-degrad-mask training converged "
              f"({losses[0]:.3f} -> {min(losses):.4f})")


# --- A6: inference-parameter sweep mechanics --------------------------------

@pytest.fixture(scope="session")
def run_dir(tmp_path_factory, models, pairs, clean_corpus):
    """A CLI-compatible run directory backed by the acceptance-trained
    models, for commands that operate on artifacts."""
    rd = tmp_path_factory.mktemp("accept_run")
    for sub in ("corpus", "manifests", "checkpoints", "reports", "plots"):
        (rd / sub).mkdir()
    cfg_dict = {"tokenizer_k": K,
                "saslm_hidden": SASLM_CFG.hidden,
                "saslm_enc_layers": SASLM_CFG.enc_layers,
                "saslm_dec_layers": SASLM_CFG.dec_layers,
                "saslm_heads": SASLM_CFG.heads,
                "fmse_hidden": FM_CFG.hidden,
                "fmse_dit_layers": FM_CFG.dit_layers,
                "fmse_heads": FM_CFG.heads,
                "fmse_token_dim": FM_CFG.token_dim,
                "fmse_convnext_blocks": FM_CFG.convnext_blocks}
    (rd / "cfg.json").write_text(json.dumps(cfg_dict))
    save_checkpoint(rd / "checkpoints" / "tokenizer.ckpt", CheckpointContainer(
        "tokenizer", cfg_dict, {"centroids": models.codebook.centroids}))
    save_checkpoint(rd / "checkpoints" / "saslm.ckpt", CheckpointContainer(
        "saslm", cfg_dict, state_from_module(models.saslm)))
    save_checkpoint(rd / "checkpoints" / "fmse.ckpt", CheckpointContainer(
        "fmse", cfg_dict, state_from_module(models.fmse)))
    (rd / "manifests" / "degraded").mkdir()
    records = []
    for i, item in enumerate(pairs):
        cpath = rd / "corpus" / f"item_{i:02d}.wav"
        dpath = rd / "manifests" / "degraded" / f"item_{i:02d}.wav"
        write_wav(cpath, item["clean"])
        write_wav(dpath, item["variants"][0])
        from semenh.degrade import DegradationRecipe

        records.append(PairRecord(str(cpath), str(dpath),
                                  DegradationRecipe(seed=i),
                                  item["clean"].duration))
    write_manifest(rd / "manifests" / "pairs.jsonl", records)
    return rd


class TestA6SweepMechanics:
    def test_full_grid_runs(self, run_dir):
        rc = main(["sweep-infer", "--config", str(run_dir / "cfg.json"),
                   "--run-dir", str(run_dir), "--items", "1"])
        assert rc == 0
        lines = (run_dir / "reports" / "sweep.csv").read_text().splitlines()
        assert len(lines) == 1 + 6 * 5 * 3  # full NFE x CFG x sway grid
        print("\nA6a pass: full 90-cell sweep grid completed")

    def test_runtime_linear_in_nfe(self, models, pairs):
        fm = models.fmse
        y = fm.normalize(pairs[0]["variant_mels"][0])
        empty = np.empty(0, dtype=np.int64)
        cond, layout = assemble_inference(fm, None, empty, y,
                                          pairs[0]["tokens"])
        x0 = torch.zeros(fm.cfg.n_mels, layout.total)

        def timed(nfe):
            best = float("inf")
            with torch.no_grad():
                for _ in range(5):
                    t0 = time.perf_counter()
                    ode_solve(lambda x, t: cfg_velocity(fm, x, cond, cond, t, 0.0),
                              x0, sway_times(nfe, -1.0))
                    best = min(best, time.perf_counter() - t0)
            return best

        ratio = timed(16) / timed(8)
        assert 1.6 <= ratio <= 2.4, f"NFE 16/8 runtime ratio {ratio:.2f}"
        print(f"\nA6b pass: runtime ratio NFE16/NFE8 = {ratio:.2f}")

    def test_unit_properties_exact(self):
        assert np.array_equal(sway_times(4, 0.0), np.linspace(0, 1, 5))
        for s in (0.0, -0.5, -1.0):
            t = sway_times(8, s)
            assert t[0] == 0.0 and t[-1] == 1.0
            assert np.all(np.diff(t) > 0)
        # gamma=0 neutrality on a live model
        torch.manual_seed(0)
        fm = FmseModel(FmseConfig(k=4, n_mels=6, token_dim=4,
                                  convnext_blocks=1, dit_layers=1,
                                  hidden=16, heads=2))
        y = torch.zeros(6, 8)
        empty = np.empty(0, dtype=np.int64)
        cond, _ = assemble_inference(fm, None, empty, y, empty)
        uncond, _ = assemble_inference(fm, None, empty, y, empty, uncond=True)
        from semenh.fmse import velocity

        with torch.no_grad():
            v = cfg_velocity(fm, y, cond, uncond, 0.5, 0.0)
            assert torch.equal(v, velocity(fm, y, cond, 0.5))
        print("\nA6c pass: schedule and guidance unit properties exact")


# --- A7: numerical verifications ---------------------------------------------

class TestA7Numerics:
    def test_ode_constant_and_linear_fields(self):
        x0 = torch.tensor([[2.0, -1.0]], dtype=torch.float64)
        c = torch.tensor([[0.5, 3.0]], dtype=torch.float64)
        for nfe in (1, 7, 32):
            out = ode_solve(lambda x, t: c, x0, sway_times(nfe, -1.0))
            assert torch.allclose(out, x0 + c, atol=1e-12)
        out = ode_solve(lambda x, t: x, x0, sway_times(1000, 0.0))
        assert torch.allclose(out, math.e * x0, rtol=2e-3)
        print("\nA7a pass: ODE constant field exact, linear field within 0.2%")

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(1)
        model = Saslm(SaslmConfig(k=8, hidden=16, enc_layers=1,
                                  dec_layers=1, heads=2)).double()
        g = torch.Generator().manual_seed(0)
        emb = torch.randn(3, 16, generator=g, dtype=torch.float64)
        seq = pack_sequence(emb, torch.tensor([1, 5, 2]), model.layout)
        w = model.blocks[0].attn.qkv.weight
        (grad,) = torch.autograd.grad(saslm_loss(model, [seq]), w)
        rng = np.random.default_rng(0)
        for _ in range(3):
            i, j = rng.integers(w.shape[0]), rng.integers(w.shape[1])
            eps = 1e-6
            with torch.no_grad():
                w[i, j] += eps
                hi = float(saslm_loss(model, [seq]))
                w[i, j] -= 2 * eps
                lo = float(saslm_loss(model, [seq]))
                w[i, j] += eps
            fd = (hi - lo) / (2 * eps)
            ref = float(grad[i, j])
            assert abs(fd - ref) / max(abs(ref), abs(fd), 1e-8) < 1e-3

        from semenh.fmse import MaskSpec, cfm_loss

        torch.manual_seed(2)
        fm = FmseModel(FmseConfig(k=8, n_mels=6, token_dim=4, convnext_blocks=1,
                                  dit_layers=1, hidden=16, heads=2)).double()
        rng = np.random.default_rng(1)
        x1 = rng.standard_normal((6, 10))
        y = rng.standard_normal((6, 10))
        z = rng.integers(0, 8, size=5)
        mask = MaskSpec(np.zeros(10, dtype=bool), np.ones(10, dtype=bool), False)
        x0 = torch.from_numpy(rng.standard_normal((6, 10)))
        w = fm.net.blocks[0].attn.qkv.weight
        (grad,) = torch.autograd.grad(
            cfm_loss(fm, x1, y, z, rng, forced=(0.37, x0, mask)), w)
        for _ in range(3):
            i, j = rng.integers(w.shape[0]), rng.integers(w.shape[1])
            eps = 1e-6
            with torch.no_grad():
                w[i, j] += eps
                hi = float(cfm_loss(fm, x1, y, z, rng, forced=(0.37, x0, mask)))
                w[i, j] -= 2 * eps
                lo = float(cfm_loss(fm, x1, y, z, rng, forced=(0.37, x0, mask)))
                w[i, j] += eps
            fd = (hi - lo) / (2 * eps)
            ref = float(grad[i, j])
            assert abs(fd - ref) / max(abs(ref), abs(fd), 1e-8) < 1e-3
        print("\nA7b pass: analytic gradients match finite differences")

    def test_uniform_logits_cross_entropy(self):
        v = SASLM_CFG.layout.vocab_size
        logits = torch.zeros(2, 12, v)
        ids = torch.randint(0, v, (2, 12))
        mask = torch.ones(2, 12, dtype=torch.bool)
        loss = masked_cross_entropy(logits, ids, mask)
        assert abs(float(loss) - math.log(v)) < 1e-4
        print(f"\nA7c pass: uniform-logit cross-entropy = ln({v})")


# --- A8: determinism and prompt contract -------------------------------------

TINY_PIPE_CFG = {
    "seed": 11, "tokenizer_k": 8,
    "saslm_hidden": 32, "saslm_enc_layers": 1, "saslm_dec_layers": 1,
    "saslm_heads": 2,
    "fmse_hidden": 32, "fmse_dit_layers": 1, "fmse_heads": 2,
    "fmse_token_dim": 8, "fmse_convnext_blocks": 1,
    "peak_lr": 1e-3, "warmup_steps": 5,
    "saslm_steps": 30, "fm_steps": 30, "batch_size": 2,
    "nfe": 2, "cfg_strength": 0.5, "sway": -1.0,
}


class TestA8Determinism:
    def test_pipeline_bit_identical(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(TINY_PIPE_CFG))
        outputs = []
        for name in ("run_a", "run_b"):
            rd = tmp_path / name
            base = ["--config", str(cfg_path), "--run-dir", str(rd)]
            for cmd in (["make-corpus", "--n-items", "3", "--duration", "0.8"],
                        ["simulate"],
                        ["tokenizer-train"],
                        ["saslm-train", "--phase", "lm"],
                        ["fm-train"],
                        ["evaluate", "--vocoder-iters", "2"]):
                assert main(cmd + base) == 0, cmd
            degraded = sorted((rd / "manifests" / "degraded").glob("*.wav"))[0]
            wav = rd / "enh.wav"
            assert main(["enhance", "--in", str(degraded), "--out", str(wav),
                         "--vocoder-iters", "2"] + base) == 0
            outputs.append({
                "manifest": (rd / "manifests" / "pairs.jsonl").read_bytes(),
                "tokenizer": (rd / "checkpoints" / "tokenizer.ckpt").read_bytes(),
                "saslm": (rd / "checkpoints" / "saslm.ckpt").read_bytes(),
                "fmse": (rd / "checkpoints" / "fmse.ckpt").read_bytes(),
                "metrics": (rd / "reports" / "metrics.csv").read_bytes(),
                "wav": wav.read_bytes(),
            })
        a, b = outputs
        for key in a:
            assert a[key] == b[key], f"{key} differs between identical runs"
        print("\nA8a pass: two pipeline runs are bit-identical")

    def test_prompt_length_contract(self, models, pairs, clean_corpus):
        degraded = pairs[0]["variants"][0]
        t1 = ACOUSTIC_MEL.n_frames(len(degraded))
        base = clean_corpus[1].samples
        for dur in (0.0, 1.0, 3.0):
            n = int(dur * RATE)
            if n == 0:
                prompt = None
            else:
                reps = int(np.ceil(n / len(base)))
                prompt = AudioBuffer(np.tile(base, reps)[:n], RATE)
            req = EnhanceRequest(degraded=degraded, prompt=prompt, nfe=2,
                                 cfg_strength=0.5, sway=-1.0, seed=0)
            mel, _ = enhance_mel(req, models)
            assert mel.n_frames == t1, \
                f"{dur:.0f} s prompt: {mel.n_frames} output frames != T1={t1}"
        print(f"\nA8b pass: output frames == T1 ({t1}) for 0/1/3 s prompts")
