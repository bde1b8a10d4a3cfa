import os
import struct

import numpy as np
import numpy.testing as npt
import pytest

from sanet.data import (FormatError, SynthCfg, export_maps, generate_dataset,
                        load_batch, make_sample, normalize_u8, read_meta,
                        read_tensor, write_pgm, write_ppm, write_tensor)
from sanet.model import build_model, predict_labels
from sanet.params import ParamStore


class TestTensorContainer:
    def test_float_round_trip_is_bit_exact(self, tmp_path, rng):
        arr = rng.normal(size=(3, 5, 7)).astype(np.float32)
        path = tmp_path / "t.sat"
        write_tensor(path, arr)
        back = read_tensor(path)
        assert back.dtype == np.float32
        npt.assert_array_equal(back, arr)

    def test_u8_round_trip(self, tmp_path, rng):
        arr = rng.integers(0, 256, size=(4, 6), dtype=np.uint8)
        path = tmp_path / "t.sat"
        write_tensor(path, arr)
        back = read_tensor(path)
        assert back.dtype == np.uint8
        npt.assert_array_equal(back, arr)

    def test_header_layout(self, tmp_path):
        arr = np.arange(4, dtype=np.uint8).reshape(2, 2)
        path = tmp_path / "t.sat"
        write_tensor(path, arr)
        blob = path.read_bytes()
        assert blob[:4] == b"SAT1"
        assert blob[4] == 1          # dtype code for u8
        assert blob[5] == 2          # rank
        assert struct.unpack("<2I", blob[6:14]) == (2, 2)
        assert blob[14:] == bytes([0, 1, 2, 3])

    def test_unsupported_dtype_rejected(self, tmp_path):
        with pytest.raises(FormatError):
            write_tensor(tmp_path / "t.sat", np.zeros(3, dtype=np.int32))

    def _write_raw(self, tmp_path, blob):
        path = tmp_path / "bad.sat"
        path.write_bytes(blob)
        return path

    def test_bad_magic_names_offset_zero(self, tmp_path):
        path = self._write_raw(tmp_path, b"JUNKxxxx")
        with pytest.raises(FormatError, match="offset 0"):
            read_tensor(path)

    def test_truncated_header(self, tmp_path):
        path = self._write_raw(tmp_path, b"SAT1\x00")
        with pytest.raises(FormatError, match="offset"):
            read_tensor(path)

    def test_unknown_dtype_code(self, tmp_path):
        path = self._write_raw(tmp_path, b"SAT1" + bytes([9, 1]) +
                               struct.pack("<I", 1) + b"\x00" * 4)
        with pytest.raises(FormatError, match="dtype code 9"):
            read_tensor(path)

    def test_implausible_rank(self, tmp_path):
        for rank in (0, 9):
            path = self._write_raw(tmp_path, b"SAT1" + bytes([1, rank]))
            with pytest.raises(FormatError, match="rank"):
                read_tensor(path)

    def test_truncated_dims(self, tmp_path):
        path = self._write_raw(tmp_path, b"SAT1" + bytes([1, 2]) + b"\x01")
        with pytest.raises(FormatError, match="truncated dims"):
            read_tensor(path)

    def test_zero_dim(self, tmp_path):
        path = self._write_raw(tmp_path, b"SAT1" + bytes([1, 1]) +
                               struct.pack("<I", 0))
        with pytest.raises(FormatError, match="zero dim"):
            read_tensor(path)

    def test_payload_size_mismatch(self, tmp_path):
        good = b"SAT1" + bytes([1, 1]) + struct.pack("<I", 4) + b"\x00" * 4
        for blob in (good[:-1], good + b"\x00"):
            path = self._write_raw(tmp_path, blob)
            with pytest.raises(FormatError, match="payload size"):
                read_tensor(path)


class TestNetpbm:
    def test_pgm_header_and_payload(self, tmp_path):
        path = tmp_path / "m.pgm"
        write_pgm(path, np.zeros((8, 8), dtype=np.uint8))
        blob = path.read_bytes()
        assert blob.startswith(b"P5\n8 8\n255\n")
        assert len(blob) == len(b"P5\n8 8\n255\n") + 64

    def test_ppm_header_and_payload(self, tmp_path):
        path = tmp_path / "m.ppm"
        write_ppm(path, np.zeros((2, 3, 3), dtype=np.uint8))
        blob = path.read_bytes()
        assert blob.startswith(b"P6\n3 2\n255\n")
        assert len(blob) == len(b"P6\n3 2\n255\n") + 18

    def test_normalize_spans_full_range(self):
        out = normalize_u8(np.array([[1.0, 3.0], [2.0, 1.0]]))
        assert out.min() == 0 and out.max() == 255

    def test_normalize_constant_is_midgray(self):
        npt.assert_array_equal(normalize_u8(np.full((3, 3), 7.0)), 128)


class TestSyntheticSamples:
    def test_same_seed_and_index_reproduce(self):
        cfg = SynthCfg(seed=5)
        a_img, a_lab = make_sample(cfg, 3)
        b_img, b_lab = make_sample(cfg, 3)
        npt.assert_array_equal(a_img, b_img)
        npt.assert_array_equal(a_lab, b_lab)

    def test_different_indices_differ(self):
        cfg = SynthCfg(seed=5)
        a_img, _ = make_sample(cfg, 0)
        b_img, _ = make_sample(cfg, 1)
        assert not np.array_equal(a_img, b_img)

    def test_value_ranges(self):
        cfg = SynthCfg(classes=4, seed=1)
        for i in range(20):
            image, labels = make_sample(cfg, i)
            assert image.dtype == np.float32 and labels.dtype == np.uint8
            assert image.min() >= 0.0 and image.max() <= 1.0
            assert labels.max() < 4

    def test_every_class_appears_in_corpus(self):
        cfg = SynthCfg(classes=4, seed=0)
        seen = set()
        for i in range(100):
            _, labels = make_sample(cfg, i)
            seen.update(np.unique(labels).tolist())
        assert seen == {0, 1, 2, 3}

    def test_no_shapes_gives_pure_background(self):
        cfg = SynthCfg(shapes_min=0, shapes_max=0, seed=2)
        _, labels = make_sample(cfg, 0)
        npt.assert_array_equal(labels, 0)

    def test_bad_config_rejected(self):
        with pytest.raises(ValueError):
            SynthCfg(classes=1)
        with pytest.raises(ValueError):
            SynthCfg(shapes_min=5, shapes_max=2)


class TestDatasetDirectory:
    def _generate(self, tmp_path, name, seed=0, count=4):
        out = tmp_path / name
        generate_dataset(SynthCfg(image_size=16, seed=seed), count, str(out))
        return out

    def test_layout_and_meta(self, tmp_path):
        out = self._generate(tmp_path, "d")
        assert sorted(os.listdir(out / "images")) == [
            f"{i:06d}.sat" for i in range(4)]
        assert sorted(os.listdir(out / "labels")) == [
            f"{i:06d}.sat" for i in range(4)]
        meta = read_meta(str(out))
        assert meta == {"classes": 3, "size": 16, "seed": 0, "count": 4}

    def test_regeneration_is_byte_identical(self, tmp_path):
        a = self._generate(tmp_path, "a")
        b = self._generate(tmp_path, "b")
        for sub in ("images", "labels"):
            for fname in os.listdir(a / sub):
                assert (a / sub / fname).read_bytes() \
                    == (b / sub / fname).read_bytes()
        assert (a / "meta.txt").read_text() == (b / "meta.txt").read_text()

    def test_meta_missing_key_rejected(self, tmp_path):
        out = self._generate(tmp_path, "d")
        (out / "meta.txt").write_text("classes = 3\nsize = 16\nseed = 0\n")
        with pytest.raises(FormatError, match="count"):
            read_meta(str(out))

    def test_load_batch_shapes_and_presence(self, tmp_path):
        out = self._generate(tmp_path, "d")
        batch = load_batch(str(out), [0, 2], classes=3)
        assert batch.images.shape == (2, 3, 16, 16)
        assert batch.targets.labels.shape == (2, 16, 16)
        assert batch.targets.presence.shape == (2, 3)
        for i in (0, 1):
            present = set(np.unique(batch.targets.labels[i]).tolist())
            npt.assert_array_equal(
                batch.targets.presence[i],
                [1.0 if c in present else 0.0 for c in range(3)])

    def test_load_batch_flip_mirrors_consistently(self, tmp_path):
        out = self._generate(tmp_path, "d")
        plain = load_batch(str(out), [1], classes=3)
        flipped = load_batch(str(out), [1], classes=3, flip=[True])
        npt.assert_array_equal(flipped.images.data,
                               plain.images.data[:, :, :, ::-1])
        npt.assert_array_equal(flipped.targets.labels,
                               plain.targets.labels[:, :, ::-1])


class TestMapExport:
    def test_writes_all_head_views(self, tmp_path, rng):
        from sanet.tensor import Tensor
        model = build_model(ParamStore(seed=0), "sanet-desk")
        x = Tensor(rng.normal(size=(1, 3, 16, 16)).astype(np.float32))
        outputs = model.forward(x)
        prefix = str(tmp_path) + os.sep
        written = export_maps(outputs, predict_labels(outputs), prefix, 16)
        assert len(written) == 13
        names = {os.path.basename(p) for p in written}
        assert "head1_attn_channelmax.pgm" in names
        assert "head4_res_topchannel.pgm" in names
        assert "labels.ppm" in names
        for path in written:
            blob = open(path, "rb").read()
            assert blob[:2] in (b"P5", b"P6")
