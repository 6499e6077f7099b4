import numpy as np
import pytest

from toklink import codec


def make_codebooks(vectors_per_depth):
    return [codec.Codebook(depth=i + 1, vectors=np.asarray(v, dtype=float))
            for i, v in enumerate(vectors_per_depth)]


def zero_codebook(c, d):
    return np.zeros((c, d))


class TestEncode:
    def test_exact_codeword_zero_residual(self):
        # z equals codebook-1 vector #5; deeper books quantize the zero residual to index 0
        rng = np.random.default_rng(0)
        cb1 = rng.standard_normal((8, 4))
        books = make_codebooks([cb1] + [zero_codebook(8, 4)] * 7)
        z = codec.LatentFeature(values=cb1[5], frame_index=0)
        out = codec.rvq_encode(z, books)
        assert out.tokens.tolist() == [5, 0, 0, 0, 0, 0, 0, 0]

    def test_zero_vector_all_zero_tokens(self):
        books = make_codebooks([np.vstack([np.zeros(3), np.ones((4, 3))])] * 5)
        z = codec.LatentFeature(values=np.zeros(3))
        assert codec.rvq_encode(z, books).tokens.tolist() == [0] * 5

    def test_matches_exhaustive_recursion_oracle(self):
        # oracle: plain-loop residual recursion with exhaustive nearest-neighbor search
        rng = np.random.default_rng(42)
        books = make_codebooks([rng.standard_normal((4, 2)) for _ in range(3)])
        for trial in range(50):
            z = rng.standard_normal(2)
            residual = z.copy()
            expected = []
            for cb in books:
                best, best_d2 = 0, float("inf")
                for idx in range(cb.size):
                    d2 = float(((residual - cb.vectors[idx]) ** 2).sum())
                    if d2 < best_d2:
                        best, best_d2 = idx, d2
                expected.append(best)
                residual = residual - cb.vectors[best]
            got = codec.rvq_encode(codec.LatentFeature(values=z), books)
            assert got.tokens.tolist() == expected

    def test_tie_breaks_to_lowest_index(self):
        vec = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 0.0]])
        books = make_codebooks([vec])
        out = codec.rvq_encode(codec.LatentFeature(values=np.array([1.0, 0.0])), books)
        assert out.tokens[0] == 0

    def test_dimension_mismatch(self):
        books = make_codebooks([np.zeros((4, 3))])
        with pytest.raises(ValueError):
            codec.rvq_encode(codec.LatentFeature(values=np.zeros(5)), books)

    def test_empty_codebooks(self):
        with pytest.raises(ValueError):
            codec.rvq_encode(codec.LatentFeature(values=np.zeros(2)), [])

    def test_token_range(self):
        cfg = codec.CodecConfig(n_q=4, codebook_size=8, feature_dim=3)
        feats = codec.synth_features(200, cfg, seed=3)
        books = codec.train_codebooks(feats, cfg, seed=4)
        tokens = codec.encode_array(codec.as_array(feats), books)
        assert tokens.min() >= 0 and tokens.max() < 8

    def test_batch_path_matches_per_frame(self):
        cfg = codec.CodecConfig(n_q=3, codebook_size=16, feature_dim=5)
        feats = codec.synth_features(64, cfg, seed=9)
        books = codec.train_codebooks(feats, cfg, seed=10)
        batch = codec.encode_array(codec.as_array(feats), books)
        for i, f in enumerate(feats):
            assert codec.rvq_encode(f, books).tokens.tolist() == batch[i].tolist()


class TestDecode:
    def test_single_codeword(self):
        rng = np.random.default_rng(1)
        cb1 = rng.standard_normal((8, 4))
        books = make_codebooks([cb1] + [zero_codebook(8, 4)] * 7)
        col = codec.TokenColumn(frame_index=0, tokens=np.array([5] + [0] * 7))
        out = codec.rvq_decode(col, books, depth_limit=8)
        np.testing.assert_allclose(out.values, cb1[5])

    def test_error_non_increasing_in_depth(self):
        cfg = codec.CodecConfig(n_q=6, codebook_size=8, feature_dim=4)
        feats = codec.synth_features(1000, cfg, seed=11)
        books = codec.train_codebooks(feats, cfg, seed=12)
        for f in feats:
            col = codec.rvq_encode(f, books)
            prev = float("inf")
            for depth in range(1, cfg.n_q + 1):
                rec = codec.rvq_decode(col, books, depth)
                err = float(((f.values - rec.values) ** 2).sum())
                assert err <= prev + 1e-9
                prev = err

    def test_depth_limit_bounds(self):
        books = make_codebooks([np.zeros((4, 2))] * 2)
        col = codec.TokenColumn(frame_index=0, tokens=np.zeros(2, dtype=int))
        with pytest.raises(ValueError):
            codec.rvq_decode(col, books, 0)
        with pytest.raises(ValueError):
            codec.rvq_decode(col, books, 3)

    def test_token_out_of_range(self):
        books = make_codebooks([np.zeros((4, 2))])
        col = codec.TokenColumn(frame_index=0, tokens=np.array([4]))
        with pytest.raises(ValueError):
            codec.rvq_decode(col, books, 1)


class TestTraining:
    def test_exact_corpus_recovery(self):
        # corpus of exactly C distinct vectors, one depth: zero quantization error
        rng = np.random.default_rng(5)
        data = rng.standard_normal((16, 4))
        cfg = codec.CodecConfig(n_q=1, codebook_size=16, feature_dim=4)
        books = codec.train_codebooks(data, cfg, seed=6)
        tokens = codec.encode_array(data, books)
        rec = books[0].vectors[tokens[:, 0]]
        np.testing.assert_allclose(rec, data, atol=1e-12)
        assert len(set(tokens[:, 0].tolist())) == 16  # permutation of the corpus

    def test_residual_energy_decreases(self):
        cfg = codec.CodecConfig(n_q=2, codebook_size=16, feature_dim=6)
        feats = codec.synth_features(500, cfg, seed=7)
        books = codec.train_codebooks(feats, cfg, seed=8)
        energies = codec.residual_energies(feats, books)
        assert energies[1] < energies[0]

    def test_deterministic(self):
        cfg = codec.CodecConfig(n_q=3, codebook_size=8, feature_dim=4)
        feats = codec.synth_features(100, cfg, seed=20)
        b1 = codec.train_codebooks(feats, cfg, seed=21)
        b2 = codec.train_codebooks(feats, cfg, seed=21)
        for a, b in zip(b1, b2):
            assert a.vectors.tobytes() == b.vectors.tobytes()

    def test_small_corpus_warns_and_falls_back(self, caplog):
        cfg = codec.CodecConfig(n_q=1, codebook_size=8, feature_dim=2)
        data = np.random.default_rng(1).standard_normal((3, 2))
        with caplog.at_level("WARNING"):
            books = codec.train_codebooks(data, cfg, seed=2)
        assert books[0].vectors.shape == (8, 2)
        assert any("replacement" in r.message for r in caplog.records)

    def test_empty_corpus(self):
        cfg = codec.CodecConfig(n_q=1, codebook_size=4, feature_dim=2)
        with pytest.raises(ValueError):
            codec.train_codebooks(np.zeros((0, 2)), cfg, seed=0)


class TestSynth:
    def test_single_frame(self):
        cfg = codec.CodecConfig(feature_dim=16)
        feats = codec.synth_features(1, cfg, seed=0)
        assert len(feats) == 1 and feats[0].values.shape == (16,)

    def test_deterministic(self):
        cfg = codec.CodecConfig(feature_dim=8)
        a = codec.as_array(codec.synth_features(64, cfg, seed=17))
        b = codec.as_array(codec.synth_features(64, cfg, seed=17))
        assert a.tobytes() == b.tobytes()

    def test_gate_duty_cycle(self):
        cfg = codec.CodecConfig(feature_dim=8)
        feats = codec.as_array(codec.synth_features(10_000, cfg, seed=33, gate_duty=0.5))
        energy = (feats ** 2).mean(axis=1)
        low = (energy < 0.1).mean()  # gated frames sit at 0.05^2 of nominal energy
        assert 0.45 <= low <= 0.55

    def test_rejects_zero_frames(self):
        with pytest.raises(ValueError):
            codec.synth_features(0, codec.CodecConfig(), seed=0)


class TestConfig:
    def test_bits_per_token_derivation(self):
        assert codec.CodecConfig(codebook_size=2048).bits_per_token == 11
        assert codec.CodecConfig(codebook_size=64).bits_per_token == 6
        assert codec.CodecConfig(codebook_size=100).bits_per_token == 7

    def test_validation(self):
        with pytest.raises(ValueError):
            codec.CodecConfig(n_q=0)
        with pytest.raises(ValueError):
            codec.CodecConfig(codebook_size=1)


class TestSerialization:
    def test_codebook_round_trip(self, tmp_path):
        cfg = codec.CodecConfig(n_q=3, codebook_size=8, feature_dim=4)
        feats = codec.synth_features(100, cfg, seed=1)
        books = codec.train_codebooks(feats, cfg, seed=2)
        path = tmp_path / "books.rvq"
        codec.save_codebooks(path, cfg, books)
        cfg2, books2 = codec.load_codebooks(path)
        assert cfg2 == cfg
        for a, b in zip(books, books2):
            np.testing.assert_allclose(b.vectors, a.vectors, atol=1e-6)
        # tokens agree after the float32 round trip
        data = codec.as_array(feats)
        assert codec.encode_array(data, books2).shape == (100, 3)

    def test_codebook_bad_magic(self, tmp_path):
        path = tmp_path / "bad.rvq"
        path.write_bytes(b"NOPE" + b"\x00" * 40)
        with pytest.raises(ValueError):
            codec.load_codebooks(path)

    def test_feature_round_trip(self, tmp_path):
        cfg = codec.CodecConfig(feature_dim=6)
        feats = codec.synth_features(32, cfg, seed=3)
        path = tmp_path / "corpus.ftr"
        codec.save_features(path, feats)
        loaded = codec.load_features(path)
        np.testing.assert_allclose(codec.as_array(loaded), codec.as_array(feats), atol=1e-6)

    def test_save_is_deterministic(self, tmp_path):
        cfg = codec.CodecConfig(n_q=2, codebook_size=4, feature_dim=3)
        feats = codec.synth_features(50, cfg, seed=4)
        books = codec.train_codebooks(feats, cfg, seed=5)
        p1, p2 = tmp_path / "a.rvq", tmp_path / "b.rvq"
        codec.save_codebooks(p1, cfg, books)
        codec.save_codebooks(p2, cfg, books)
        assert p1.read_bytes() == p2.read_bytes()
