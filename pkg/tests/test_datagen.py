"""Dataset generator and file-format tests."""

import math

import numpy as np
import numpy.testing as npt
import pytest

from brivl import datagen
from brivl.datagen import (
    BadMagicError,
    SceneObject,
    SceneSpec,
    TruncatedDatasetError,
    UnsupportedVersionError,
)
from brivl.rng import SplitMix64


class TestSceneSpec:
    def test_zero_objects_rejected(self):
        with pytest.raises(ValueError, match="one to three"):
            SceneSpec([], background=0)

    def test_shared_cell_rejected(self):
        obj = SceneObject("circle", "red", "small", (1, 1))
        with pytest.raises(ValueError, match="distinct"):
            SceneSpec([obj, SceneObject("square", "blue", "large", (1, 1))], 0)

    def test_descriptor_round_trip(self):
        spec = SceneSpec(
            [
                SceneObject("circle", "red", "large", (0, 3)),
                SceneObject("triangle", "blue", "small", (2, 1)),
            ],
            background=2,
        )
        again = SceneSpec.from_descriptor(spec.descriptor())
        assert again == spec


class TestGeneration:
    def test_deterministic_bytes_across_runs(self, tmp_path):
        a, b = tmp_path / "a.wscd", tmp_path / "b.wscd"
        datagen.write_dataset(datagen.generate_dataset(9, 50), a)
        datagen.write_dataset(datagen.generate_dataset(9, 50), b)
        assert a.read_bytes() == b.read_bytes()
        assert datagen.file_checksum(a) == datagen.file_checksum(b)

    def test_different_seeds_differ(self, tmp_path):
        a, b = tmp_path / "a.wscd", tmp_path / "b.wscd"
        datagen.write_dataset(datagen.generate_dataset(9, 20), a)
        datagen.write_dataset(datagen.generate_dataset(10, 20), b)
        assert a.read_bytes() != b.read_bytes()

    def test_mention_rate_monte_carlo(self):
        # per-attribute coin flips at 0.6, capped and floored; the
        # aggregate rate over many scenes stays inside 0.6 +- 0.02
        hits = 0
        total = 0
        for i in range(10_000):
            rng = SplitMix64(9_000_000 + i)
            spec = datagen.generate_scene(rng)
            text = datagen.generate_text(spec, rng)
            words = text.split()
            seen = {}
            for w in words:
                seen[w] = seen.get(w, 0) + 1
            for obj in spec.objects:
                for w in (obj.size, obj.color, obj.shape):
                    total += 1
                    if seen.get(w, 0) > 0:
                        hits += 1
                        seen[w] -= 1
        rate = hits / total
        assert 0.58 <= rate <= 0.62, f"aggregate mention rate {rate:.4f}"

    def test_multi_object_scene_never_fully_described(self):
        for i in range(3_000):
            rng = SplitMix64(11_000_000 + i)
            spec = datagen.generate_scene(rng)
            text = datagen.generate_text(spec, rng)
            n_attrs = 3 * len(spec.objects)
            if len(spec.objects) < 2:
                continue
            cap = math.ceil(0.75 * n_attrs)
            words = text.split()
            mentions = 0
            budget = {}
            for w in words:
                budget[w] = budget.get(w, 0) + 1
            for obj in spec.objects:
                for w in (obj.size, obj.color, obj.shape):
                    if budget.get(w, 0) > 0:
                        mentions += 1
                        budget[w] -= 1
            assert mentions <= cap < n_attrs

    def test_every_text_shares_a_word_with_its_scene(self):
        ds = datagen.generate_dataset(15, 500)
        sharing = 0
        for rec in ds.records:
            spec = SceneSpec.from_descriptor(rec.scene)
            attr_words = set()
            for obj in spec.objects:
                attr_words.update((obj.size, obj.color, obj.shape))
            if attr_words & set(rec.text.split()):
                sharing += 1
        assert sharing / len(ds.records) >= 0.95

    def test_rendering_is_in_range_and_shaped(self):
        rec = datagen.generate_pair(SplitMix64(3))
        assert rec.image.shape == (32, 32, 3) and rec.image.dtype == np.uint8
        img = rec.image_float()
        assert img.shape == (3, 32, 32)
        assert 0.0 <= img.min() and img.max() <= 1.0

    def test_record_streams_are_index_independent(self):
        # record i depends only on seed ^ i, not on how many came before
        full = datagen.generate_dataset(21, 10)
        solo = datagen.generate_pair(SplitMix64(21 ^ 7))
        npt.assert_array_equal(full.records[7].image, solo.image)
        assert full.records[7].text == solo.text


class TestFileFormat:
    def test_round_trip_lossless(self, tmp_path):
        ds = datagen.generate_dataset(33, 40, split="test")
        path = tmp_path / "ds.wscd"
        datagen.write_dataset(ds, path)
        again = datagen.read_dataset(path)
        assert again.split == "test" and len(again.records) == 40
        for a, b in zip(ds.records, again.records):
            npt.assert_array_equal(a.image, b.image)
            assert a.text == b.text and a.scene == b.scene
        # writing the reloaded dataset reproduces identical bytes
        path2 = tmp_path / "ds2.wscd"
        datagen.write_dataset(again, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_bad_magic_names_offset(self, tmp_path):
        path = tmp_path / "bad.wscd"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
        with pytest.raises(BadMagicError, match="offset 0"):
            datagen.read_dataset(path)

    def test_version_mismatch_distinct_error(self, tmp_path):
        ds = datagen.generate_dataset(1, 2)
        path = tmp_path / "v.wscd"
        datagen.write_dataset(ds, path)
        raw = bytearray(path.read_bytes())
        raw[8] = 99  # version u16 little-endian
        path.write_bytes(bytes(raw))
        with pytest.raises(UnsupportedVersionError, match="99"):
            datagen.read_dataset(path)

    def test_truncation_is_an_error_not_a_crash(self, tmp_path):
        ds = datagen.generate_dataset(2, 5)
        path = tmp_path / "t.wscd"
        datagen.write_dataset(ds, path)
        raw = path.read_bytes()
        for cut in (4, 15, len(raw) // 2, len(raw) - 3):
            path.write_bytes(raw[:cut])
            with pytest.raises(TruncatedDatasetError, match="offset"):
                datagen.read_dataset(path)

    def test_2000_record_file_under_20mb(self, tmp_path):
        ds = datagen.generate_dataset(44, 2000)
        path = tmp_path / "big.wscd"
        datagen.write_dataset(ds, path)
        assert path.stat().st_size < 20 * 1024 * 1024

    def test_single_shape_labels_filter(self):
        ds = datagen.generate_dataset(55, 200)
        idx, labels = datagen.single_shape_labels(ds)
        assert len(idx) == len(labels) > 0
        for i, label in zip(idx, labels):
            spec = SceneSpec.from_descriptor(ds.records[i].scene)
            assert {o.shape for o in spec.objects} == {label}
