import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from bcnn import data_io as D
from bcnn.errors import ConfigError, FormatError


class TestTensorFile:
    def test_layout(self):
        raw = D.tensor_to_bytes(np.array([[1.0, 2.0, 3.0]]))
        assert raw[:4] == b"BTNS"
        assert struct.unpack("<IBI", raw[4:13]) == (1, 1, 2)
        assert struct.unpack("<2I", raw[13:21]) == (1, 3)
        assert np.frombuffer(raw[21:], "<f8").tolist() == [1.0, 2.0, 3.0]

    def test_f32_code(self):
        raw = D.tensor_to_bytes(np.zeros(2, dtype=np.float32))
        assert raw[8] == 0 and len(raw) == 4 + 9 + 4 + 8

    @settings(max_examples=60, deadline=None)
    @given(arrays(st.sampled_from([np.float32, np.float64]), array_shapes(min_dims=1, max_dims=4, max_side=5),
                  elements=st.floats(allow_nan=True, allow_infinity=True, width=32)))
    def test_round_trip_bit_exact(self, arr):
        back = D.tensor_from_bytes(D.tensor_to_bytes(arr))
        assert back.dtype == arr.dtype and back.shape == arr.shape
        assert back.tobytes() == arr.tobytes()

    def test_file_round_trip(self, tmp_path, rng):
        a = rng.standard_normal((3, 4))
        D.tensor_save(a, tmp_path / "a.btns")
        assert D.tensor_load(tmp_path / "a.btns").tobytes() == a.tobytes()

    @pytest.mark.parametrize("mutate", [
        lambda b: b"XTNS" + b[4:],
        lambda b: b[:4] + struct.pack("<I", 2) + b[8:],
        lambda b: b[:8] + bytes([7]) + b[9:],
        lambda b: b[:-1],
        lambda b: b + b"\0",
        lambda b: b[:10],
    ])
    def test_corruption_detected(self, mutate):
        raw = D.tensor_to_bytes(np.arange(4.0))
        with pytest.raises(FormatError):
            D.tensor_from_bytes(mutate(raw))

    def test_unsupported_dtype(self):
        with pytest.raises(FormatError):
            D.tensor_to_bytes(np.arange(3))


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        entries = {"a/w": rng.standard_normal((2, 3)), "b": rng.standard_normal(4).astype(np.float32),
                   "ünï": np.array([1.0])}
        D.checkpoint_save(entries, tmp_path / "m.ckpt")
        back = D.checkpoint_load(tmp_path / "m.ckpt")
        assert list(back) == list(entries)
        for k in entries:
            assert back[k].dtype == entries[k].dtype and back[k].tobytes() == entries[k].tobytes()

    def test_empty(self):
        assert D.checkpoint_from_bytes(D.checkpoint_to_bytes({})) == {}

    def test_offset_table(self):
        raw = D.checkpoint_to_bytes({"x": np.zeros(1), "yy": np.zeros(2)})
        (table,) = struct.unpack("<Q", raw[-8:])
        offs = struct.unpack("<2Q", raw[table:table + 16])
        assert offs[0] == 12
        assert struct.unpack("<I", raw[offs[1]:offs[1] + 4]) == (2,)
        assert raw[offs[1] + 4:offs[1] + 6] == b"yy"

    @pytest.mark.parametrize("mutate", [
        lambda b: b"BCKQ" + b[4:],
        lambda b: b[:4] + struct.pack("<I", 9) + b[8:],
        lambda b: b[:-3],
        lambda b: b[:-8] + struct.pack("<Q", 5),
        lambda b: b + b"\0",
    ])
    def test_corruption_detected(self, mutate):
        raw = D.checkpoint_to_bytes({"x": np.ones(3)})
        with pytest.raises(FormatError):
            D.checkpoint_from_bytes(mutate(raw))

    def test_duplicate_names_rejected(self):
        one = D.checkpoint_to_bytes({"x": np.ones(1)})
        body = one[12:-16]
        raw = b"BCKP" + struct.pack("<II", 1, 2) + body + body
        raw += struct.pack("<2Q", 12, 12 + len(body)) + struct.pack("<Q", 12 + 2 * len(body))
        with pytest.raises(FormatError):
            D.checkpoint_from_bytes(raw)

    def test_text_embedding(self):
        text = "encoder=bilinear\nscales=1.0,0.5\n"
        assert D.tensor_to_text(D.text_to_tensor(text)) == text


class TestPPM:
    def test_white_pixel(self):
        np.testing.assert_array_equal(D.ppm_decode(b"P6\n1 1\n255\n\xff\xff\xff"), [[[1, 1, 1]]])

    def test_header_comments(self):
        img = D.ppm_decode(b"P6 # c\n2 1 # size\n255\n" + bytes([0, 0, 0, 255, 0, 0]))
        np.testing.assert_array_equal(img[0, 1], [1, 0, 0])

    def test_quantization_bound(self, tmp_path, rng):
        img = rng.uniform(size=(5, 7, 3))
        D.ppm_save(img, tmp_path / "a.ppm")
        assert np.abs(D.ppm_load(tmp_path / "a.ppm") - img).max() <= 1 / 510 + 1e-15

    @pytest.mark.parametrize("data", [
        b"P3\n1 1\n255\n255 255 255\n",
        b"P6\n1 1\n65535\n\0\0\0\0\0\0",
        b"P6\n2 2\n255\n\0\0\0",
        b"P6\nx 1\n255\n\0\0\0",
        b"P6\n1",
    ])
    def test_bad_files(self, data):
        with pytest.raises(FormatError):
            D.ppm_decode(data)


class TestTransforms:
    def test_identity_resize(self, rng):
        img = rng.uniform(size=(4, 5, 3))
        np.testing.assert_array_equal(D.resize_bilinear(img, 4, 5), img)

    def test_constant(self):
        out = D.resize_bilinear(np.full((3, 4, 3), 0.3), 7, 2)
        assert np.abs(out - 0.3).max() <= 1e-12

    def test_half_pixel_upsample(self):
        img = np.array([[0.0], [1.0]])[:, :, None]
        np.testing.assert_allclose(D.resize_bilinear(img, 4, 1)[:, 0, 0], [0, 0.25, 0.75, 1], atol=1e-15)

    def test_bad_target(self):
        with pytest.raises(ConfigError):
            D.resize_bilinear(np.zeros((2, 2, 3)), 0, 2)

    def test_hflip(self, rng):
        np.testing.assert_array_equal(D.hflip(np.array([[1.0, 2.0]])), [[2.0, 1.0]])
        img = rng.uniform(size=(3, 4, 3))
        np.testing.assert_array_equal(D.hflip(D.hflip(img)), img)
        sym = np.concatenate([img, img[:, ::-1]], axis=1)
        np.testing.assert_array_equal(D.hflip(sym), sym)
        np.testing.assert_array_equal(D.hflip(img)[:, 0], img[:, -1])


class TestManifest:
    def test_round_trip(self, tmp_path):
        m = D.Manifest(["a.ppm", "b/c.ppm"], [0, 2], tmp_path)
        D.manifest_save(m, tmp_path / "m.txt")
        back = D.manifest_load(tmp_path / "m.txt", 3)
        assert back.paths == m.paths and back.labels == m.labels and back.num_classes == 3

    def test_out_of_range(self, tmp_path):
        (tmp_path / "m.txt").write_text("a\t0\nb\t3\n")
        with pytest.raises(FormatError, match=":2:"):
            D.manifest_load(tmp_path / "m.txt", 3)

    def test_duplicate(self, tmp_path):
        (tmp_path / "m.txt").write_text("a\t0\nb\t1\na\t1\n")
        with pytest.raises(FormatError, match=r":3:.*line 1"):
            D.manifest_load(tmp_path / "m.txt")

    @pytest.mark.parametrize("line", ["a 0", "a\tx", "a\t-1", "a\t0\textra"])
    def test_malformed(self, tmp_path, line):
        (tmp_path / "m.txt").write_text(line + "\n")
        with pytest.raises(FormatError, match=":1:"):
            D.manifest_load(tmp_path / "m.txt")


class TestSynthetic:
    def test_counts_and_determinism(self, tmp_path):
        spec = D.SyntheticTextureSpec(num_classes=3, image_size=16, n_train=2, n_val=1, n_test=1, seed=4)
        a = D.synth_generate(spec, tmp_path / "a")
        D.synth_generate(spec, tmp_path / "b")
        assert [len(a[s]) for s in D.SPLITS] == [6, 3, 3]
        for s in D.SPLITS:
            assert len((tmp_path / "a" / f"{s}.txt").read_text().splitlines()) == 3 * {"train": 2, "val": 1, "test": 1}[s]
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.ppm"))
        assert len(files) == 12
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_splits_disjoint(self):
        data = D.synth_arrays(D.SyntheticTextureSpec(num_classes=2, image_size=16, n_train=2, n_test=2))
        tr, te = data["train"][0], data["test"][0]
        assert not any(np.array_equal(a, b) for a in tr for b in te)

    def test_class_balance(self):
        _, y = D.synth_arrays(D.SyntheticTextureSpec(num_classes=5, image_size=16, n_train=3, n_test=0))["train"]
        assert np.bincount(y).tolist() == [3] * 5

    def test_spec_text(self):
        spec = D.SyntheticTextureSpec.from_text("K=4\nsize=16\ntrain=3\n# comment\nnoise=0.1\n")
        assert (spec.num_classes, spec.image_size, spec.n_train, spec.noise) == (4, 16, 3, 0.1)
        for bad in ("K=0\n", "bogus=1\n", "size=abc\n", "K=2\nK=3\n", "justtext\n"):
            with pytest.raises(ConfigError):
                D.SyntheticTextureSpec.from_text(bad)
