import numpy as np
import pytest

from fusionkit.bundles import (HiddenStateBundle, SynthEncoder, encode,
                               make_complementary_task, make_ctc_task,
                               make_layered_ctc_task, make_verify_task,
                               read_bundle, split_of_index, write_bundle,
                               xor_bayes_decode, ctc_symbol_patterns,
                               layered_symbol_layers)
from fusionkit.errors import (BadMagicError, DimensionOverflowError, ShapeError,
                              TruncatedError)
from fusionkit.heads import ctc_greedy_decode
from fusionkit.tensor import Tensor


class TestSynthEncoder:
    def test_shape_convention(self):
        # 12 blocks + input projection = 13 layers; T' = 100 at 1000 Hz
        # downsampled to 50 Hz gives 5 frames
        enc = SynthEncoder(seed=1, layers=12, dim=8, input_dim=16, framerate_hz=50)
        x = np.random.default_rng(0).standard_normal((100, 16))
        b = enc.encode(x)
        assert (b.layers, b.frames, b.dim) == (13, 5, 8)
        assert b.framerate_hz == 50
        assert not b.data.requires_grad

    def test_determinism(self):
        enc = SynthEncoder(seed=3, layers=4, dim=8, input_dim=16)
        x = np.random.default_rng(1).standard_normal((80, 16))
        assert np.array_equal(enc.encode(x).data.data, encode(enc, x).data.data)

    @pytest.mark.parametrize("trial", range(10))
    def test_different_seeds_differ_almost_everywhere(self, trial):
        rng = np.random.default_rng(trial)
        x = rng.standard_normal((80, 16))
        b1 = SynthEncoder(seed=10 + trial, layers=4, dim=8, input_dim=16).encode(x)
        b2 = SynthEncoder(seed=90 + trial, layers=4, dim=8, input_dim=16).encode(x)
        frac_differ = np.mean(b1.data.data != b2.data.data)
        assert frac_differ >= 0.99

    def test_input_too_short(self):
        enc = SynthEncoder(seed=1, layers=2, dim=4, input_dim=6, framerate_hz=50)
        with pytest.raises(ValueError, match="too short"):
            enc.encode(np.zeros((10, 6)))

    def test_weight_bytes_stable(self):
        enc = SynthEncoder(seed=5, layers=3, dim=4, input_dim=8)
        before = enc.weight_bytes()
        enc.encode(np.random.default_rng(0).standard_normal((40, 8)))
        assert enc.weight_bytes() == before

    def test_25hz_variant(self):
        enc = SynthEncoder(seed=2, layers=2, dim=4, input_dim=8, framerate_hz=25)
        b = enc.encode(np.zeros((80, 8)))
        assert b.frames == 2


class TestBundleFormat:
    def _round_trip(self, tmp_path, bundle):
        path = tmp_path / "b.hsb"
        write_bundle(bundle, path)
        return read_bundle(path), path

    def test_round_trip_fields_and_payload(self, tmp_path):
        enc = SynthEncoder(seed=1, layers=3, dim=4, input_dim=6)
        bundle = enc.encode(np.random.default_rng(0).standard_normal((60, 6)))
        got, path = self._round_trip(tmp_path, bundle)
        assert got.model_id == bundle.model_id
        assert (got.layers, got.frames, got.dim) == (3 + 1, 3, 4)
        assert got.framerate_hz == bundle.framerate_hz
        # on-disk precision is float32; a second generation is bit-exact
        write_bundle(got, tmp_path / "b2.hsb")
        assert (tmp_path / "b.hsb").read_bytes() == (tmp_path / "b2.hsb").read_bytes()
        assert np.array_equal(read_bundle(tmp_path / "b2.hsb").data.data, got.data.data)

    @pytest.mark.parametrize("seed", range(12))
    def test_round_trip_identity_on_float32_payloads(self, seed, tmp_path):
        rng = np.random.default_rng(seed)
        l, t, d = (int(rng.integers(1, 33)), int(rng.integers(1, 65)),
                   int(rng.integers(1, 65)))
        data = rng.standard_normal((l, t, d)).astype(np.float32).astype(np.float64)
        bundle = HiddenStateBundle(model_id=f"r{seed}", layers=l, frames=t, dim=d,
                                   framerate_hz=50, data=Tensor(data))
        got, _ = self._round_trip(tmp_path, bundle)
        assert np.array_equal(got.data.data, data)
        assert got.model_id == f"r{seed}"

    def test_bad_magic(self, tmp_path):
        enc = SynthEncoder(seed=1, layers=2, dim=2, input_dim=4)
        bundle = enc.encode(np.zeros((40, 4)))
        path = tmp_path / "b.hsb"
        write_bundle(bundle, path)
        raw = path.read_bytes()
        (tmp_path / "bad.hsb").write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(BadMagicError):
            read_bundle(tmp_path / "bad.hsb")

    def test_truncated_payload_reports_counts(self, tmp_path):
        enc = SynthEncoder(seed=1, layers=2, dim=2, input_dim=4)
        bundle = enc.encode(np.zeros((40, 4)))
        path = tmp_path / "b.hsb"
        write_bundle(bundle, path)
        raw = path.read_bytes()
        (tmp_path / "cut.hsb").write_bytes(raw[:len(raw) - 7])
        with pytest.raises(TruncatedError) as err:
            read_bundle(tmp_path / "cut.hsb")
        assert err.value.expected == len(raw)
        assert err.value.actual == len(raw) - 7

    def test_dimension_overflow(self, tmp_path):
        import struct
        header = struct.pack("<4sIIIIII", b"HSB1", 1, 2 ** 20, 2 ** 20, 64, 50, 0)
        (tmp_path / "huge.hsb").write_bytes(header)
        with pytest.raises(DimensionOverflowError):
            read_bundle(tmp_path / "huge.hsb")

    def test_zero_dim_rejected(self, tmp_path):
        import struct
        header = struct.pack("<4sIIIIII", b"HSB1", 1, 0, 4, 4, 50, 0)
        (tmp_path / "z.hsb").write_bytes(header)
        with pytest.raises(DimensionOverflowError):
            read_bundle(tmp_path / "z.hsb")


class TestSplits:
    def test_deterministic_and_disjoint(self):
        assignments = [split_of_index(i, seed=42) for i in range(5000)]
        again = [split_of_index(i, seed=42) for i in range(5000)]
        assert assignments == again
        fractions = {name: assignments.count(name) / 5000
                     for name in ("train", "dev", "test")}
        assert abs(fractions["train"] - 0.8) < 0.03
        assert abs(fractions["dev"] - 0.1) < 0.02
        assert abs(fractions["test"] - 0.1) < 0.02

    def test_different_seed_different_assignment(self):
        a = [split_of_index(i, seed=1) for i in range(1000)]
        b = [split_of_index(i, seed=2) for i in range(1000)]
        assert a != b


class TestComplementaryTask:
    def test_xor_label_table(self):
        ds, _, _ = make_complementary_task(seed=3, n_items=500)
        b1, b2 = ds.meta["bits_group1"], ds.meta["bits_group2"]
        for i in range(500):
            assert ds.labels[i] == (b1[i] ^ b2[i])
        both_one = (b1 == 1) & (b2 == 1)
        assert both_one.any()
        assert all(np.array(ds.labels)[both_one] == 0)

    def test_bayes_decode_is_exact(self):
        ds, _, _ = make_complementary_task(seed=9, n_items=800)
        assert xor_bayes_decode(ds) == ds.labels

    def test_encoder_a_annihilates_group2_signal(self):
        ds, enc_a, enc_b = make_complementary_task(seed=5, n_items=400)
        b2 = ds.meta["bits_group2"]
        feats = enc_a.encode_batch(ds.inputs)[:, -1].mean(axis=1)
        # no feature of A's last layer correlates with the group-2 bit
        centered = feats - feats.mean(0)
        target = b2 - b2.mean()
        corr = np.abs(centered.T @ target) / (
            np.linalg.norm(centered, axis=0) * np.linalg.norm(target) + 1e-12)
        assert corr.max() < 0.1

    def test_encoders_reproducible(self):
        _, a1, b1 = make_complementary_task(seed=7, n_items=10)
        _, a2, b2 = make_complementary_task(seed=7, n_items=10)
        assert a1.weight_bytes() == a2.weight_bytes()
        assert b1.weight_bytes() == b2.weight_bytes()

    def test_odd_feature_count_rejected(self):
        with pytest.raises(ValueError):
            make_complementary_task(seed=1, n_items=10, input_dim=15)


class TestCtcTask:
    def test_labels_within_length_budget(self):
        ds = make_ctc_task(seed=4, n_items=300, vocab_size=3, input_len=240,
                           max_label_len=4)
        for label in ds.labels:
            assert 1 <= len(label) <= 4
            assert all(1 <= s <= 3 for s in label)
            assert all(a != b for a, b in zip(label, label[1:]))

    def test_regeneration_identical(self):
        d1 = make_ctc_task(seed=8, n_items=100, vocab_size=3)
        d2 = make_ctc_task(seed=8, n_items=100, vocab_size=3)
        assert d1.labels == d2.labels
        assert np.array_equal(d1.inputs, d2.inputs)

    def test_noiseless_items_decodable_from_oracle_features(self):
        # project each frame onto the symbol patterns; greedy decode recovers
        # the label exactly when noise is zero
        ds = make_ctc_task(seed=2, n_items=50, vocab_size=3, input_len=240,
                           noise=0.0, amp=1.0)
        patterns = ctc_symbol_patterns(2, 16, 3)
        hits = 0
        for i in range(50):
            frames = ds.inputs[i].reshape(12, 20, 16).mean(axis=1)
            scores = frames @ patterns.T                     # (T, V)
            logits = np.concatenate([np.full((12, 1), 0.5), scores], axis=1)
            if ctc_greedy_decode(logits) == ds.labels[i]:
                hits += 1
        assert hits == 50

    def test_vocab_floor(self):
        with pytest.raises(ValueError):
            make_ctc_task(seed=1, n_items=10, vocab_size=1)


class TestLayeredTask:
    def test_symbols_assigned_to_interior_layers(self):
        where = layered_symbol_layers(3, 13)
        assert len(where) == 3
        assert all(2 <= w <= 11 for w in where)
        assert len(set(where)) == 3

    def test_layer_energy_is_selective(self):
        ds, enc = make_layered_ctc_task(seed=6, n_items=40, vocab_size=3,
                                        input_len=240, noise=0.0, amp=2.0)
        where = layered_symbol_layers(3, enc.layers + 1)
        stack = enc.encode_batch(ds.inputs)  # (n, L, T, D)
        # signal-dependent energy: deviation across items (biases cancel)
        energy = stack.std(axis=0).mean(axis=(1, 2))
        active = sorted(set(int(w) for w in where))
        inactive = [l for l in range(1, enc.layers + 1) if l not in active]
        assert energy[active].mean() > 10.0 * energy[inactive].mean()


class TestVerifyTask:
    def test_speaker_labels_and_reproducibility(self):
        d1 = make_verify_task(seed=3, n_items=200, n_speakers=8)
        d2 = make_verify_task(seed=3, n_items=200, n_speakers=8)
        assert d1.labels == d2.labels
        assert set(d1.labels) <= set(range(8))
        assert len(set(d1.labels)) > 1
