"""File formats and dataset machinery: manifests, word vectors, PPM,
checkpoints, filtering, splitting, and the synthetic generator."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dfsn.data import (CheckpointFormatError, EmbeddingFormatError, Manifest,
                       ManifestError, PpmFormatError, Sample, filter_by_length,
                       gen_synthetic, load_checkpoint, load_embeddings,
                       load_manifest, load_ppm, materialize, save_checkpoint,
                       save_manifest, save_ppm, split_train_test)
from dfsn.model import fusion_preset, init_model
from dfsn.text import EmbeddingTable, tokenize


class TestEmbeddingsLoader:
    def write(self, tmp_path, text):
        path = tmp_path / "vectors.txt"
        path.write_text(text, encoding="utf-8")
        return path

    def test_minimal_file(self, tmp_path):
        path = self.write(tmp_path, "2 3\nhello 0.1 0.2 0.3\nworld 1 2 3\n")
        table = load_embeddings(path)
        assert len(table) == 2
        assert table.dim == 3

    def test_parse_fidelity(self, tmp_path):
        path = self.write(tmp_path, "1 4\nword 0.25 -1.5 3e-2 7\n")
        table = load_embeddings(path)
        assert table.lookup("word").tolist() == [0.25, -1.5, 0.03, 7.0]

    def test_short_line_names_line_number(self, tmp_path):
        path = self.write(tmp_path, "2 3\nok 1 2 3\nbad 1 2\n")
        with pytest.raises(EmbeddingFormatError, match="line 3"):
            load_embeddings(path)

    def test_non_numeric_value(self, tmp_path):
        path = self.write(tmp_path, "1 2\nword 1.0 oops\n")
        with pytest.raises(EmbeddingFormatError, match="line 2"):
            load_embeddings(path)

    def test_bad_header(self, tmp_path):
        path = self.write(tmp_path, "3\nword 1 2 3\n")
        with pytest.raises(EmbeddingFormatError, match="line 1"):
            load_embeddings(path)

    def test_count_mismatch(self, tmp_path):
        path = self.write(tmp_path, "3 2\na 1 2\nb 3 4\n")
        with pytest.raises(EmbeddingFormatError, match="promises 3"):
            load_embeddings(path)

    def test_oov_fallback_attached(self, tmp_path):
        path = self.write(tmp_path, "1 2\nknown 1 2\n")
        table = load_embeddings(path, fallback_seed=3)
        vec = table.lookup("unknown")
        assert vec.shape == (2,)
        assert np.all(np.abs(vec) <= 0.25)


class TestPpm:
    def test_minimal_red_pixel(self, tmp_path):
        path = tmp_path / "one.ppm"
        path.write_bytes(b"P6\n1 1\n255\n\xff\x00\x00")
        pixels = load_ppm(path)
        assert pixels.shape == (1, 1, 3)
        assert pixels[0, 0].tolist() == [255, 0, 0]

    def test_comments_in_header(self, tmp_path):
        path = tmp_path / "c.ppm"
        path.write_bytes(b"P6\n# a comment\n2 1\n# another\n255\n" + bytes(6))
        assert load_ppm(path).shape == (1, 2, 3)

    def test_ascii_variant_rejected(self, tmp_path):
        path = tmp_path / "p3.ppm"
        path.write_bytes(b"P3\n1 1\n255\n255 0 0\n")
        with pytest.raises(PpmFormatError, match="P3"):
            load_ppm(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "short.ppm"
        path.write_bytes(b"P6\n2 2\n255\n" + bytes(7))
        with pytest.raises(PpmFormatError, match="truncated"):
            load_ppm(path)

    def test_unsupported_maxval(self, tmp_path):
        path = tmp_path / "wide.ppm"
        path.write_bytes(b"P6\n1 1\n65535\n" + bytes(6))
        with pytest.raises(PpmFormatError, match="maxval"):
            load_ppm(path)

    def test_save_load_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        pixels = rng.integers(0, 256, (5, 7, 3)).astype(np.uint8)
        path = tmp_path / "rt.ppm"
        save_ppm(path, pixels)
        assert np.array_equal(load_ppm(path), pixels)


def make_manifest(word_counts):
    samples = [Sample(id=f"s{i}", image_path=f"images/s{i}.ppm",
                      text=" ".join(["word"] * n), label=i % 2)
               for i, n in enumerate(word_counts)]
    return Manifest(samples=samples)


class TestFilterByLength:
    def test_six_words_kept(self):
        assert len(filter_by_length(make_manifest([6]))) == 1

    def test_five_words_dropped(self):
        assert len(filter_by_length(make_manifest([5]))) == 0

    def test_149_kept_150_dropped(self):
        kept = filter_by_length(make_manifest([149, 150]))
        assert [len(tokenize(s.text)) for s in kept.samples] == [149]

    def test_order_preserved(self):
        m = filter_by_length(make_manifest([10, 3, 20, 200, 30]))
        assert [s.id for s in m.samples] == ["s0", "s2", "s4"]

    def test_idempotent(self):
        m = make_manifest([2, 6, 10, 150, 80])
        once = filter_by_length(m)
        twice = filter_by_length(once)
        assert [s.id for s in once.samples] == [s.id for s in twice.samples]

    def test_word_count_uses_tokenizer(self):
        # punctuation-only chunks are not words
        m = Manifest(samples=[Sample(id="x", image_path="x.ppm",
                                     text="one two three four five !!", label=0)])
        assert len(filter_by_length(m)) == 0


class TestSplit:
    def test_ten_gives_eight_two(self):
        train, test = split_train_test(make_manifest([10] * 10), seed=0)
        assert (len(train), len(test)) == (8, 2)

    def test_eleven_gives_eight_three(self):
        train, test = split_train_test(make_manifest([10] * 11), seed=0)
        assert (len(train), len(test)) == (8, 3)

    def test_same_seed_same_split(self):
        m = make_manifest([10] * 25)
        a = split_train_test(m, seed=5)
        b = split_train_test(m, seed=5)
        assert [s.id for s in a[0].samples] == [s.id for s in b[0].samples]
        assert [s.id for s in a[1].samples] == [s.id for s in b[1].samples]

    def test_split_tags(self):
        train, test = split_train_test(make_manifest([10] * 5), seed=1)
        assert train.split == "train" and test.split == "test"

    @given(st.integers(1, 60), st.integers(0, 10))
    def test_partition_property(self, n, seed):
        m = make_manifest([10] * n)
        train, test = split_train_test(m, seed=seed)
        train_ids = {s.id for s in train.samples}
        test_ids = {s.id for s in test.samples}
        assert train_ids | test_ids == {s.id for s in m.samples}
        assert not (train_ids & test_ids)
        assert len(train) == int(np.floor(0.8 * n))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            split_train_test(Manifest(), seed=0)


class TestManifestIO:
    def test_roundtrip(self, tmp_path):
        m = make_manifest([6, 8, 10])
        path = tmp_path / "m.jsonl"
        save_manifest(m, path)
        loaded = load_manifest(path)
        assert [(s.id, s.image_path, s.text, s.label) for s in loaded.samples] == \
            [(s.id, s.image_path, s.text, s.label) for s in m.samples]

    def test_bad_json_names_line(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text('{"id": "a", "image": "x", "text": "t", "label": 0}\nnot json\n')
        with pytest.raises(ManifestError, match="line 2"):
            load_manifest(path)

    def test_missing_key(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text('{"id": "a", "image": "x", "label": 0}\n')
        with pytest.raises(ManifestError, match="text"):
            load_manifest(path)

    def test_bad_label(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text('{"id": "a", "image": "x", "text": "t", "label": 3}\n')
        with pytest.raises(ManifestError, match="label"):
            load_manifest(path)

    def test_duplicate_ids_rejected(self, tmp_path):
        path = tmp_path / "m.jsonl"
        record = '{"id": "dup", "image": "x", "text": "t", "label": 0}\n'
        path.write_text(record + record)
        with pytest.raises(ManifestError, match="duplicate"):
            load_manifest(path)


class TestCheckpoint:
    def make_params(self, seed=0, preset="tiny"):
        return init_model(fusion_preset(preset), seed=seed)

    def test_roundtrip_bit_exact(self, tmp_path):
        params = self.make_params(seed=7)
        path = tmp_path / "model.dfsn"
        save_checkpoint(params, path)
        loaded = load_checkpoint(path)
        for name, tensor in params.named_tensors().items():
            other = loaded.named_tensors()[name]
            assert tensor.values.dtype == other.values.dtype
            assert np.array_equal(tensor.values, other.values), name

    def test_flipped_payload_byte_fails_checksum(self, tmp_path):
        params = self.make_params(seed=8)
        path = tmp_path / "model.dfsn"
        save_checkpoint(params, path)
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointFormatError, match="checksum"):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "model.dfsn"
        save_checkpoint(self.make_params(), path)
        blob = bytearray(path.read_bytes())
        blob[0:5] = b"NOPE1"
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointFormatError, match="magic"):
            load_checkpoint(path)

    def test_config_echo_detects_preset_mismatch(self, tmp_path):
        # a checkpoint whose tensor table disagrees with its config echo
        params = self.make_params(seed=9)
        path = tmp_path / "model.dfsn"
        save_checkpoint(params, path)
        import json as json_mod
        import struct
        import zlib

        blob = path.read_bytes()
        (config_len,) = struct.unpack_from("<I", blob, 7)
        config = json_mod.loads(blob[11:11 + config_len].decode())
        config["image"]["layers"][0]["out_channels"] = 99
        new_config = json_mod.dumps(config, sort_keys=True, separators=(",", ":")).encode()
        body = blob[:7] + struct.pack("<I", len(new_config)) + new_config + blob[11 + config_len:-4]
        body += struct.pack("<I", zlib.crc32(body))
        path.write_bytes(body)
        with pytest.raises(CheckpointFormatError, match="shape"):
            load_checkpoint(path)

    def test_missing_tensor(self, tmp_path):
        import struct
        import zlib

        params = self.make_params(seed=10)
        path = tmp_path / "model.dfsn"
        save_checkpoint(params, path)
        blob = path.read_bytes()
        # drop the final tensor record (fc3.bias: name header + 2 f32 values)
        name = b"fc3.bias"
        record_len = 2 + len(name) + 1 + 4 + 2 * 4
        count_pos = 7 + 4 + struct.unpack_from("<I", blob, 7)[0]
        (count,) = struct.unpack_from("<I", blob, count_pos)
        body = bytearray(blob[:-4 - record_len])
        body[count_pos:count_pos + 4] = struct.pack("<I", count - 1)
        body += struct.pack("<I", zlib.crc32(bytes(body)))
        path.write_bytes(bytes(body))
        with pytest.raises(CheckpointFormatError, match="missing"):
            load_checkpoint(path)

    def test_config_survives_roundtrip(self, tmp_path):
        params = self.make_params(seed=11)
        path = tmp_path / "model.dfsn"
        save_checkpoint(params, path)
        loaded = load_checkpoint(path)
        assert loaded.config == params.config


class TestGenSynthetic:
    def test_counts_and_balance(self, tmp_path):
        m = gen_synthetic(40, (0.25, 0.25, 0.25, 0.25), seed=1, out_dir=tmp_path)
        assert len(m) == 40
        labels = [s.label for s in m.samples]
        regimes = [s.id[0] for s in m.samples]
        assert regimes.count("a") == regimes.count("b") == 10
        assert all(s.label == 1 for s in m.samples if s.id[0] == "a")
        assert all(s.label == 0 for s in m.samples if s.id[0] == "b")
        for regime in ("c", "d"):
            subset = [s.label for s in m.samples if s.id[0] == regime]
            assert sum(subset) == len(subset) // 2

    def test_images_written_and_loadable(self, tmp_path):
        m = gen_synthetic(8, seed=2, out_dir=tmp_path)
        for s in m.samples:
            pixels = load_ppm(tmp_path / s.image_path)
            assert pixels.shape == (32, 32, 3)

    def test_regime_c_text_is_neutral(self, tmp_path):
        from dfsn.data import NEUTRAL_WORDS

        m = gen_synthetic(40, seed=3, out_dir=tmp_path)
        for s in m.samples:
            if s.id[0] == "c":
                assert set(tokenize(s.text)) <= set(NEUTRAL_WORDS)

    def test_regime_d_text_carries_polarity(self, tmp_path):
        from dfsn.data import NEGATIVE_WORDS, POSITIVE_WORDS

        m = gen_synthetic(40, seed=4, out_dir=tmp_path)
        polar = set(POSITIVE_WORDS) | set(NEGATIVE_WORDS)
        for s in m.samples:
            if s.id[0] == "d":
                assert set(tokenize(s.text)) & polar

    def test_text_lengths_within_filter_bounds(self, tmp_path):
        m = gen_synthetic(60, seed=5, out_dir=tmp_path)
        for s in m.samples:
            assert 5 < len(tokenize(s.text)) < 150

    def test_same_seed_byte_identical(self, tmp_path):
        d1, d2 = tmp_path / "one", tmp_path / "two"
        m1 = gen_synthetic(12, seed=6, out_dir=d1)
        m2 = gen_synthetic(12, seed=6, out_dir=d2)
        save_manifest(m1, d1 / "m.jsonl")
        save_manifest(m2, d2 / "m.jsonl")
        assert (d1 / "m.jsonl").read_bytes() == (d2 / "m.jsonl").read_bytes()
        for s in m1.samples:
            assert (d1 / s.image_path).read_bytes() == (d2 / s.image_path).read_bytes()

    def test_invalid_proportions(self, tmp_path):
        with pytest.raises(ValueError, match="sum to 1"):
            gen_synthetic(10, (0.5, 0.5, 0.5, 0.5), seed=0, out_dir=tmp_path)
        with pytest.raises(ValueError, match="nonnegative"):
            gen_synthetic(10, (1.5, -0.5, 0.0, 0.0), seed=0, out_dir=tmp_path)

    def test_brightness_threshold_classifier(self, tmp_path):
        """Image-informative regimes separate on mean brightness; the
        image-neutral regime does not."""
        m = gen_synthetic(500, (0.25, 0.25, 0.25, 0.25), seed=7, out_dir=tmp_path)
        correct_ac, total_ac = 0, 0
        correct_d, total_d = 0, 0
        for s in m.samples:
            pixels = load_ppm(tmp_path / s.image_path)
            pred = 1 if pixels.mean() > 115.0 else 0
            if s.id[0] in ("a", "c"):
                total_ac += 1
                correct_ac += pred == s.label
            elif s.id[0] == "d":
                total_d += 1
                correct_d += pred == s.label
        assert correct_ac / total_ac > 0.9
        assert 0.35 < correct_d / total_d < 0.65


class TestMaterialize:
    def test_shapes_and_tokens(self, tmp_path):
        m = gen_synthetic(6, seed=8, out_dir=tmp_path)
        config = fusion_preset("tiny")
        table = EmbeddingTable(dim=config.text.dim)
        samples = materialize(m, tmp_path, config, table)
        assert len(samples) == 6
        for s in samples:
            assert s.image.shape == (3, 16, 16)
            assert s.image.dtype == np.float32
            assert isinstance(s.tokens, list)

    def test_modality_restriction_skips_unused_branch(self, tmp_path):
        m = gen_synthetic(4, seed=9, out_dir=tmp_path)
        config = fusion_preset("tiny", modality="text")
        samples = materialize(m, tmp_path, config, EmbeddingTable(dim=config.text.dim))
        assert all(s.image is None for s in samples)
        config = fusion_preset("tiny", modality="image")
        samples = materialize(m, tmp_path, config, None)
        assert all(s.tokens is None for s in samples)
