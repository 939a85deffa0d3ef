import numpy as np
import pytest

from semenh.assets import speech_like_utterance, white_noise
from semenh.dsp import AudioBuffer
from semenh.metrics import (
    RESERVED_METRICS,
    MetricReport,
    estoi,
    lsd,
    plot_spectrograms,
    si_sdr,
    token_error_rate,
)


def sine(freq, duration=1.0, rate=16000, amp=0.5):
    t = np.arange(int(duration * rate)) / rate
    return AudioBuffer(amp * np.sin(2 * np.pi * freq * t), rate)


class TestSiSdr:
    def test_identical_capped(self):
        a = sine(440)
        assert si_sdr(a, a) == 60.0

    def test_scale_invariance(self):
        a = sine(440)
        b = AudioBuffer(0.5 * a.samples, a.sample_rate)
        assert si_sdr(a, b) == si_sdr(a, a)

    def test_equal_power_orthogonal_noise_is_zero_db(self):
        rate = 16000
        t = np.arange(rate) / rate
        ref = np.sin(2 * np.pi * 400 * t)
        noise = np.cos(2 * np.pi * 400 * t)  # orthogonal, equal power
        val = si_sdr(AudioBuffer(0.5 * ref, rate),
                     AudioBuffer(0.5 * (ref + noise), rate))
        assert abs(val) < 0.1

    def test_zero_reference_rejected(self):
        z = AudioBuffer(np.zeros(1000), 16000)
        with pytest.raises(ValueError, match="zero reference"):
            si_sdr(z, sine(440, duration=1000 / 16000))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            si_sdr(sine(440, 1.0), sine(440, 0.5))

    def test_monotone_in_noise_level(self):
        rng = np.random.default_rng(0)
        ref = sine(300)
        noise = rng.standard_normal(len(ref))
        vals = []
        for lvl in (0.001, 0.01, 0.1):
            est = AudioBuffer(np.clip(ref.samples + lvl * noise, -1, 1),
                              ref.sample_rate)
            vals.append(si_sdr(ref, est))
        assert vals[0] > vals[1] > vals[2]


class TestLsd:
    def test_identical_zero(self):
        m = np.random.default_rng(0).standard_normal((10, 20))
        assert lsd(m, m) == 0.0

    def test_constant_offset_exact(self):
        m = np.random.default_rng(1).standard_normal((10, 20))
        assert abs(lsd(m, m + 1.0) - 1.0) < 1e-12

    def test_symmetric(self):
        rng = np.random.default_rng(2)
        a, b = rng.standard_normal((5, 7)), rng.standard_normal((5, 7))
        assert lsd(a, b) == lsd(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            lsd(np.zeros((3, 4)), np.zeros((3, 5)))


@pytest.fixture(scope="module")
def speech():
    return speech_like_utterance(2.0, 16000, np.random.default_rng(0))


class TestEstoi:
    def test_self_similarity(self, speech):
        assert estoi(speech, speech) >= 0.99

    def test_unrelated_noise_low(self, speech):
        noise = white_noise(len(speech), speech.sample_rate,
                            np.random.default_rng(1))
        assert estoi(speech, noise) < 0.3

    def test_monotone_under_snr(self, speech):
        rng = np.random.default_rng(2)
        noise = rng.standard_normal(len(speech))
        noise *= np.sqrt(np.mean(speech.samples ** 2) / np.mean(noise ** 2))
        scores = []
        for snr_db in (20.0, 0.0, -10.0):
            alpha = 10.0 ** (-snr_db / 20.0)
            est = AudioBuffer(np.clip(speech.samples + alpha * noise, -1, 1),
                              speech.sample_rate)
            scores.append(estoi(speech, est))
        assert scores[0] > scores[1] > scores[2]

    def test_too_short(self):
        a = sine(200, duration=0.3)
        with pytest.raises(ValueError, match="too short"):
            estoi(a, a)

    def test_range(self, speech):
        noise = white_noise(len(speech), speech.sample_rate,
                            np.random.default_rng(3))
        v = estoi(speech, noise)
        assert -1.0 <= v <= 1.0


class TestTokenErrorRate:
    def test_identical(self):
        assert token_error_rate([1, 2, 3], [1, 2, 3]) == 0.0

    def test_single_deletion(self):
        assert abs(token_error_rate([1, 2, 3], [1, 3]) - 1 / 3) < 1e-12

    def test_empty_both(self):
        assert token_error_rate([], []) == 0.0

    def test_empty_ref_nonempty_hyp(self):
        assert token_error_rate([], [7, 8]) == 2.0

    def test_matches_bruteforce_small(self):
        # brute-force edit distance by dynamic programming over full table
        def brute(ref, hyp):
            n, m = len(ref), len(hyp)
            d = np.zeros((n + 1, m + 1), dtype=int)
            d[:, 0] = np.arange(n + 1)
            d[0, :] = np.arange(m + 1)
            for i in range(1, n + 1):
                for j in range(1, m + 1):
                    d[i, j] = min(d[i - 1, j] + 1, d[i, j - 1] + 1,
                                  d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]))
            return d[n, m]

        rng = np.random.default_rng(4)
        for _ in range(20):
            ref = list(rng.integers(0, 4, size=rng.integers(1, 8)))
            hyp = list(rng.integers(0, 4, size=rng.integers(0, 8)))
            assert token_error_rate(ref, hyp) == brute(ref, hyp) / len(ref)


class TestPlotSpectrograms:
    def test_writes_png(self, tmp_path):
        rng = np.random.default_rng(0)
        audios = [
            ("clean", speech_like_utterance(0.5, 16000, rng)),
            ("degraded", white_noise(12000, 24000, rng)),
            ("enhanced", sine(440, 0.5)),
        ]
        out = plot_spectrograms(audios, tmp_path / "panel.png")
        assert out.exists() and out.stat().st_size > 0

    def test_empty_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            plot_spectrograms([], tmp_path / "x.png")

    def test_unwritable_path(self, tmp_path):
        a = [("x", sine(440, 0.2))]
        with pytest.raises(OSError):
            plot_spectrograms(a, tmp_path / "missing_dir" / "x.png")


class TestMetricReport:
    def test_reserved_fields_present(self):
        rep = MetricReport()
        rep.add("f1", {"lsd": 0.5})
        row = rep.per_file["f1"]
        for name in RESERVED_METRICS:
            assert name in row and row[name] is None

    def test_aggregates_mean(self):
        rep = MetricReport()
        rep.add("a", {"lsd": 1.0, "si_sdr": 10.0})
        rep.add("b", {"lsd": 3.0})
        agg = rep.aggregates()
        assert agg["lsd"] == 2.0
        assert agg["si_sdr"] == 10.0

    def test_non_finite_rejected(self):
        rep = MetricReport()
        with pytest.raises(ValueError):
            rep.add("a", {"lsd": float("nan")})

    def test_round_trip_files(self, tmp_path):
        rep = MetricReport(metadata={"nfe": 8})
        rep.add("a", {"lsd": 1.25})
        rep.to_json(tmp_path / "r.json")
        rep.to_csv(tmp_path / "r.csv")
        import json

        d = json.loads((tmp_path / "r.json").read_text())
        assert d["metadata"] == {"nfe": 8}
        assert d["per_file"]["a"]["lsd"] == 1.25
        text = (tmp_path / "r.csv").read_text()
        assert "file_id" in text and "1.25" in text
