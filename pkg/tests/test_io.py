import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from wavedense import network as N
from wavedense.io import (
    Checkpoint, CheckpointError, ImageFormatError, decode_checkpoint, encode_checkpoint, load_checkpoint,
    load_folder, load_image, save_checkpoint, save_image,
)
from wavedense.training import TrainConfig

TINY = N.ModelConfig(levels=2, channels=(4, 8), rdb_depth=2)


class TestPGM:
    def test_two_by_two(self, tmp_path):
        p = tmp_path / "a.pgm"
        p.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 128, 255, 64]))
        img = load_image(p)
        assert img.pixels.tolist() == [[0, 128 / 255], [1, 64 / 255]]
        assert img.bit_depth == 8

    def test_comments_and_whitespace(self, tmp_path):
        p = tmp_path / "c.pgm"
        p.write_bytes(b"P5 # made by hand\n# another\n 2\t1 \n255\n" + bytes([10, 20]))
        assert load_image(p).pixels.tolist() == [[10 / 255, 20 / 255]]

    def test_maxval_scaling(self, tmp_path):
        p = tmp_path / "m.pgm"
        p.write_bytes(b"P5\n2 1\n100\n" + bytes([50, 100]))
        assert load_image(p).pixels.tolist() == [[0.5, 1.0]]

    def test_sixteen_bit(self, tmp_path):
        p = tmp_path / "w.pgm"
        p.write_bytes(b"P5\n2 1\n1000\n" + (250).to_bytes(2, "big") + (1000).to_bytes(2, "big"))
        img = load_image(p)
        assert img.pixels.tolist() == [[0.25, 1.0]] and img.bit_depth == 16

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "t.pgm"
        p.write_bytes(b"P5\n4 4\n255\n" + bytes(5))
        with pytest.raises(ImageFormatError, match="offset 11"):
            load_image(p)

    def test_corrupt_header(self, tmp_path):
        p = tmp_path / "h.pgm"
        p.write_bytes(b"P5\n4 x4\n255\n" + bytes(16))
        with pytest.raises(ImageFormatError, match="byte offset 5"):
            load_image(p)
        p.write_bytes(b"P2\n1 1\n255\n0")
        with pytest.raises(ImageFormatError, match="offset 0"):
            load_image(p)
        p.write_bytes(b"P5\n2 1\n10\n" + bytes([3, 11]))
        with pytest.raises(ImageFormatError, match="maxval"):
            load_image(p)

    @settings(max_examples=25, deadline=None)
    @given(h=st.integers(1, 12), w=st.integers(1, 12), seed=st.integers(0, 9999))
    def test_save_load_idempotent(self, tmp_path_factory, h, w, seed):
        d = tmp_path_factory.mktemp("rt")
        raw = np.random.default_rng(seed).integers(0, 256, (h, w), dtype=np.uint8)
        (d / "a.pgm").write_bytes(b"P5\n%d %d\n255\n" % (w, h) + raw.tobytes())
        first = load_image(d / "a.pgm").pixels
        save_image(d / "b.pgm", first)
        assert (d / "b.pgm").read_bytes() == (d / "a.pgm").read_bytes()
        np.testing.assert_array_equal(load_image(d / "b.pgm").pixels, first)


class TestPillowFormats:
    def test_gray_png(self, tmp_path):
        arr = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
        Image.fromarray(arr, mode="L").save(tmp_path / "g.png")
        np.testing.assert_array_equal(load_image(tmp_path / "g.png").pixels, arr / 255.0)

    def test_color_uses_bt601_luma(self, tmp_path):
        rgb = np.zeros((1, 3, 3), np.uint8)
        rgb[0, 0] = (255, 0, 0)
        rgb[0, 1] = (0, 255, 0)
        rgb[0, 2] = (0, 0, 255)
        Image.fromarray(rgb, mode="RGB").save(tmp_path / "c.png")
        np.testing.assert_allclose(load_image(tmp_path / "c.png").pixels, [[0.299, 0.587, 0.114]], atol=1e-12)

    def test_png_round_trip(self, tmp_path):
        x = np.random.default_rng(0).integers(0, 256, (7, 5)) / 255.0
        save_image(tmp_path / "x.png", x)
        np.testing.assert_array_equal(load_image(tmp_path / "x.png").pixels, x)

    def test_garbage(self, tmp_path):
        (tmp_path / "bad.png").write_bytes(b"not an image")
        with pytest.raises(ImageFormatError):
            load_image(tmp_path / "bad.png")

    def test_folder_listing(self, tmp_path):
        save_image(tmp_path / "b.pgm", np.zeros((2, 2)))
        save_image(tmp_path / "a.png", np.ones((2, 2)))
        (tmp_path / "notes.txt").write_text("ignored")
        (tmp_path / "c.pgm").write_bytes(b"P5\n9 9\n255\n")
        images, failures = load_folder(tmp_path)
        assert [n for n, _ in images] == ["a.png", "b.pgm"]
        assert [n for n, _ in failures] == ["c.pgm"]


def trained_store():
    """A store with non-trivial moments and BN statistics."""
    store = N.build(TINY, seed=4)
    rng = np.random.default_rng(0)
    x = rng.random((2, 1, 16, 16)).astype(np.float32)
    N.forward(x, store, "train", update_stats=True)
    for k in store.names():
        store.adam_m[k][...] = rng.standard_normal(store.adam_m[k].shape)
        store.adam_v[k][...] = rng.random(store.adam_v[k].shape)
    return store


def sample_checkpoint():
    rng = np.random.default_rng(7)
    return Checkpoint(trained_store(), epoch=3, step=41, rng_state=rng.bit_generator.state,
                      train_config=TrainConfig(patch=16).to_dict(), extra={"note": "x"})


class TestCheckpoint:
    def test_bitwise_round_trip(self, tmp_path):
        cp = sample_checkpoint()
        save_checkpoint(tmp_path / "c.ckpt", cp)
        back = load_checkpoint(tmp_path / "c.ckpt")
        assert encode_checkpoint(back) == encode_checkpoint(cp)
        assert (back.epoch, back.step, back.extra) == (3, 41, {"note": "x"})
        assert back.rng_state == cp.rng_state
        for k in cp.params.names():
            for a, b in ((cp.params.values, back.params.values), (cp.params.adam_m, back.params.adam_m),
                         (cp.params.adam_v, back.params.adam_v)):
                assert a[k].tobytes() == b[k].tobytes()
        for k, s in cp.params.stats.items():
            t = back.params.stats[k]
            assert s.mean.tobytes() == t.mean.tobytes() and s.var.tobytes() == t.var.tobytes()
            assert s.count == t.count

    def test_forward_equal_after_load(self, tmp_path):
        store = trained_store()
        save_checkpoint(tmp_path / "c.ckpt", Checkpoint(store))
        back = load_checkpoint(tmp_path / "c.ckpt").params
        x = np.random.default_rng(1).random((1, 1, 16, 16)).astype(np.float32)
        assert N.forward(x, store, "infer").tobytes() == N.forward(x, back, "infer").tobytes()

    def test_payload_is_little_endian_float32(self):
        store = N.build(N.ModelConfig(levels=1, channels=(1,), rdb_depth=1, bn_policy="none"))
        store.values["L1.down.cb.bias"][...] = 1.5
        data = encode_checkpoint(Checkpoint(store))
        assert data[:8] == b"WDNSCKPT"
        assert data[8:12] == (1).to_bytes(4, "little")
        assert np.array(1.5, "<f4").tobytes() in data

    def test_truncated(self, tmp_path):
        data = encode_checkpoint(sample_checkpoint())
        for cut in (4, 20, len(data) - 3):
            with pytest.raises(CheckpointError):
                decode_checkpoint(data[:cut])

    def test_unknown_version(self):
        data = bytearray(encode_checkpoint(sample_checkpoint()))
        data[8:12] = (2).to_bytes(4, "little")
        with pytest.raises(CheckpointError, match="version 2"):
            decode_checkpoint(bytes(data))

    def test_corrupt_payload(self):
        data = bytearray(encode_checkpoint(sample_checkpoint()))
        data[-1] ^= 0xFF
        with pytest.raises(CheckpointError, match="checksum"):
            decode_checkpoint(bytes(data))

    def test_architecture_mismatch_message(self, tmp_path):
        small = N.ModelConfig(levels=2, channels=(4, 8), rdb_depth=2)
        save_checkpoint(tmp_path / "n2.ckpt", Checkpoint(N.build(small)))
        big = N.ModelConfig(levels=3, channels=(4, 8, 8), rdb_depth=2)
        with pytest.raises(CheckpointError) as err:
            load_checkpoint(tmp_path / "n2.ckpt", expect=big)
        assert "levels" in str(err.value) and "2" in str(err.value) and "3" in str(err.value)

    def test_atomic_write_leaves_no_temp(self, tmp_path):
        save_checkpoint(tmp_path / "c.ckpt", sample_checkpoint())
        save_checkpoint(tmp_path / "c.ckpt", sample_checkpoint())
        assert [p.name for p in tmp_path.iterdir()] == ["c.ckpt"]
