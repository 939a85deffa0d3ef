import numpy as np
import pytest

from semenh.assets import make_toy_corpus
from semenh.dsp import AudioBuffer, TOKENIZER_MEL
from semenh.tokenizer import (
    Codebook,
    Tokenizer,
    kmeans,
    mel_frames,
    tokenize,
    train_codebook,
)


def brute_force_kmeans(x, centers_init, iters=200):
    """Independent Lloyd loop used as the oracle."""
    centers = centers_init.copy()
    for _ in range(iters):
        labels = np.array([np.argmin([np.sum((p - c) ** 2) for c in centers]) for p in x])
        for j in range(len(centers)):
            pts = x[labels == j]
            if len(pts):
                centers[j] = pts.mean(axis=0)
    return centers


class TestKmeans:
    def test_two_separated_clusters(self):
        rng = np.random.default_rng(0)
        a = rng.normal([0, 0], 0.1, size=(200, 2))
        b = rng.normal([5, 5], 0.1, size=(200, 2))
        x = np.concatenate([a, b])
        centers = kmeans(x, 2, np.random.default_rng(1))
        centers = centers[np.argsort(centers[:, 0])]
        assert np.allclose(centers[0], a.mean(axis=0), atol=0.05)
        assert np.allclose(centers[1], b.mean(axis=0), atol=0.05)

    def test_fixed_point_on_distinct_constants(self):
        x = np.repeat(np.arange(8, dtype=float)[:, None] * 10, 5, axis=0)
        centers = kmeans(x, 8, np.random.default_rng(0))
        assert set(np.round(centers[:, 0]).astype(int)) == set(range(0, 80, 10))

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(2)
        x = np.concatenate([
            rng.normal([0, 0], 0.2, size=(50, 2)),
            rng.normal([4, 1], 0.2, size=(50, 2)),
            rng.normal([-2, 5], 0.2, size=(50, 2)),
        ])
        mine = kmeans(x, 3, np.random.default_rng(3))
        oracle = brute_force_kmeans(x, mine.copy())
        # a converged solution is a fixed point of the oracle loop
        assert np.allclose(mine, oracle, atol=1e-6)

    def test_same_seed_identical(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((300, 4))
        a = kmeans(x, 5, np.random.default_rng(9))
        b = kmeans(x, 5, np.random.default_rng(9))
        assert np.array_equal(a, b)


class TestTrainCodebook:
    def test_too_few_frames(self):
        corpus = make_toy_corpus(1, 0.3, 16000, seed=0)
        with pytest.raises(ValueError, match="too few"):
            train_codebook(corpus, 512, np.random.default_rng(0))

    def test_trains_and_is_deterministic(self):
        corpus = make_toy_corpus(4, 1.0, 16000, seed=0)
        cb1 = train_codebook(corpus, 16, np.random.default_rng(0))
        cb2 = train_codebook(corpus, 16, np.random.default_rng(0))
        assert cb1.k == 16 and cb1.dim == 80
        assert np.array_equal(cb1.centroids, cb2.centroids)


class TestTokenize:
    def test_brute_force_nearest_neighbor(self):
        corpus = make_toy_corpus(4, 1.0, 16000, seed=1)
        cb = train_codebook(corpus, 16, np.random.default_rng(0))
        audio = corpus[0]
        seq = tokenize(audio, cb)
        frames = mel_frames(audio)
        oracle = [
            int(np.argmin([np.sum((f - c) ** 2) for c in cb.centroids])) for f in frames
        ]
        assert list(seq.ids) == oracle

    def test_length_contract(self):
        corpus = make_toy_corpus(2, 1.0, 16000, seed=2)
        cb = train_codebook(corpus, 8, np.random.default_rng(0))
        seq = tokenize(corpus[0], cb)
        assert len(seq) == TOKENIZER_MEL.n_frames(16000) == 49
        assert seq.frame_rate == 50.0

    def test_ids_in_range(self):
        corpus = make_toy_corpus(2, 1.0, 16000, seed=3)
        cb = train_codebook(corpus, 8, np.random.default_rng(0))
        seq = tokenize(corpus[1], cb)
        assert np.all(seq.ids >= 0) and np.all(seq.ids < 8)

    def test_centroid_frames_map_to_index(self):
        centroids = np.eye(4) * 3.0
        cb = Codebook(centroids)
        from semenh.tokenizer import _assign

        ids = _assign(centroids, cb.centroids)
        assert list(ids) == [0, 1, 2, 3]

    def test_rate_mismatch(self):
        cb = Codebook(np.random.default_rng(0).standard_normal((4, 80)))
        with pytest.raises(ValueError, match="16000"):
            tokenize(AudioBuffer(np.zeros(24000), 24000), cb)

    def test_interface_properties(self):
        corpus = make_toy_corpus(2, 1.0, 16000, seed=4)
        cb = train_codebook(corpus, 8, np.random.default_rng(0))
        tok = Tokenizer(cb)
        assert tok.vocab_size == 8
        assert tok.frame_rate == 50.0
        assert len(tok(corpus[0])) == 49
