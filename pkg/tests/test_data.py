import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chrnn import data
from chrnn import model as M
from chrnn import train as T
from chrnn.config import RunConfig, TrainConfig


def idx_images_bytes(images: np.ndarray) -> bytes:
    # authored field by field from the format description, not via the library writer
    n, r, c = images.shape
    return b"\x00\x00\x08\x03" + struct.pack(">III", n, r, c) + images.astype(np.uint8).tobytes()


def idx_labels_bytes(labels) -> bytes:
    return b"\x00\x00\x08\x01" + struct.pack(">I", len(labels)) + bytes(labels)


@pytest.fixture
def fixture_files(tmp_path):
    imgs = np.zeros((4, 28, 28), np.uint8)
    for k in range(4):
        imgs[k, k, :] = 255          # one bright row per image
        imgs[k, :, 27 - k] = 51
    labels = [3, 0, 9, 1]
    ip, lp = tmp_path / "imgs.idx", tmp_path / "labels.idx"
    ip.write_bytes(idx_images_bytes(imgs))
    lp.write_bytes(idx_labels_bytes(labels))
    return ip, lp, imgs, labels


def test_idx_fixture(fixture_files):
    ip, lp, imgs, labels = fixture_files
    ds = data.load_idx(ip, lp, n_classes=10)
    assert ds.images.shape == (4, 1, 28, 28) and ds.images.dtype == np.float32
    assert ds.labels.tolist() == labels
    scaled = imgs.astype(np.float32) / 255
    np.testing.assert_allclose(ds.mean[0], scaled.mean(0), rtol=1e-6)
    np.testing.assert_allclose(ds.images[:, 0] + ds.mean[0], scaled, atol=1e-6)
    # another split reuses the training mean
    other = data.load_idx(ip, lp, mean=np.zeros((1, 28, 28), np.float32), n_classes=10)
    np.testing.assert_allclose(other.images[:, 0], scaled)


def test_idx_gzip_and_writer_roundtrip(tmp_path, fixture_files):
    ip, lp, imgs, labels = fixture_files
    gz = tmp_path / "imgs.idx.gz"
    gz.write_bytes(gzip.compress(ip.read_bytes()))
    ds = data.load_idx(gz, lp, n_classes=10)
    assert len(ds) == 4
    out = tmp_path / "w.idx"
    data.write_idx(out, imgs)
    assert out.read_bytes() == ip.read_bytes()


def test_idx_errors(tmp_path, fixture_files):
    ip, lp, _, _ = fixture_files
    empty = tmp_path / "empty.idx"
    empty.write_bytes(idx_labels_bytes([]))
    with pytest.raises(data.DataError, match="count mismatch"):
        data.load_idx(ip, empty)
    zero = tmp_path / "zero.idx"
    zero.write_bytes(b"")
    with pytest.raises(data.IdxFormatError):
        data.load_idx(ip, zero)
    with pytest.raises(data.IdxFormatError, match=r"bad magic 0x00000803, expected 0x00000801"):
        data.load_idx(ip, ip)
    with pytest.raises(data.DataError, match="no such file"):
        data.load_idx(tmp_path / "missing", lp)
    with pytest.raises(data.DataError, match="labels outside"):
        data.load_idx(ip, lp, n_classes=5)


def test_every_truncation_is_rejected(fixture_files):
    ip, lp, _, _ = fixture_files
    for raw, magic in ((ip.read_bytes(), data.IDX_IMAGES_MAGIC), (lp.read_bytes(), data.IDX_LABELS_MAGIC)):
        data.parse_idx(raw, magic)
        for n in range(len(raw)):
            with pytest.raises(data.IdxFormatError):
                data.parse_idx(raw[:n], magic)


@settings(max_examples=60, deadline=None)
@given(dims=st.lists(st.integers(0, 4), min_size=1, max_size=3), extra=st.integers(1, 3), seed=st.integers(0, 99))
def test_idx_parse_roundtrip_and_overlong(dims, extra, seed):
    a = np.random.default_rng(seed).integers(0, 256, size=dims).astype(np.uint8)
    raw = struct.pack(">I", 0x0800 | a.ndim) + struct.pack(f">{a.ndim}I", *a.shape) + a.tobytes()
    np.testing.assert_array_equal(data.parse_idx(raw), a)
    with pytest.raises(data.IdxFormatError):
        data.parse_idx(raw + b"\x00" * extra)


# ------------------------------------------------------------ synthetic task


def label_from_positions(a, b):
    return data.LEFT if a[1] < b[1] else data.NOT_LEFT


def test_context_task_construction():
    ds = data.gen_context_task(500, 3)
    assert ds.images.shape == (500, 1, 24, 24) and ds.n_classes == 2
    for img, y in zip(ds.images, ds.labels):
        a, b = data.locate_glyphs(img)
        assert a[1] != b[1]
        assert y == label_from_positions(a, b)
        m = data.locate_glyphs(img[..., ::-1].copy())
        assert label_from_positions(*m) == 1 - y
    # identical pixel statistics in every image, whatever the class
    ref = np.sort(ds.images[0].ravel())
    assert all(np.array_equal(np.sort(im.ravel()), ref) for im in ds.images)


def test_glyphs_normalized_and_distinct():
    for g in (data.GLYPH_A, data.GLYPH_B):
        assert abs(g.mean()) < 1e-6 and abs(g.std() - 1) < 1e-5
    assert not np.array_equal(data.GLYPH_A, data.GLYPH_B)


def test_context_task_extremes():
    img = np.zeros((1, 24, 24), np.float32)
    img[0, 0:4, 0:4] = data.GLYPH_A
    img[0, 8:12, 20:24] = data.GLYPH_B
    a, b = data.locate_glyphs(img)
    assert (a, b) == ((0, 0), (2, 5)) and label_from_positions(a, b) == data.LEFT
    with pytest.raises(data.DataError):
        data.locate_glyphs(np.zeros((1, 24, 24)))


def test_context_task_balance_and_determinism():
    ds = data.gen_context_task(10_000, 11)
    assert 0.48 <= ds.labels.mean() <= 0.52
    again = data.gen_context_task(200, 11)
    assert np.array_equal(data.gen_context_task(200, 11).images, again.images)
    other = data.gen_context_task(200, 12)
    assert not np.array_equal(other.images, again.images)
    with pytest.raises(ValueError):
        data.gen_context_task(1, 0)


def test_split_dataset():
    ds = data.gen_context_task(10, 0)
    a, b = data.split_dataset(ds, 7)
    assert len(a) == 7 and len(b) == 3
    with pytest.raises(data.DataError):
        data.Dataset(ds.images[:3], ds.labels[:2], 2)


# --------------------------------------------------------------- checkpoints


def make_ck(seed=0):
    cfg = M.tiny_config()
    tc = TrainConfig(seed=seed)
    st = T.init_state(M.init_params(cfg, seed), tc)
    st.velocity = {k: np.random.default_rng(1).normal(size=v.shape).astype(np.float32) for k, v in st.params.items()}
    st.step, st.epoch, st.epoch_losses = 7, 1, [0.5, 0.25]
    return T.make_checkpoint(RunConfig(model=cfg, train=tc), st, np.full((1, 6, 6), 0.1, np.float32))


def test_checkpoint_roundtrip(tmp_path):
    ck = make_ck()
    p = tmp_path / "a.ckpt"
    data.save_checkpoint(p, ck)
    back = data.load_checkpoint(p)
    assert data.params_equal(ck.params, back.params) and data.params_equal(ck.velocity, back.velocity)
    assert back.run == ck.run and back.meta == ck.meta
    np.testing.assert_array_equal(back.mean, ck.mean)
    q = tmp_path / "b.ckpt"
    data.save_checkpoint(q, back)
    assert p.read_bytes() == q.read_bytes()
    st = T.TrainState.from_checkpoint(back)
    assert (st.step, st.epoch, st.epoch_losses) == (7, 1, [0.5, 0.25])


def test_checkpoint_layout():
    raw = data.encode_checkpoint(make_ck())
    assert raw[:8] == b"CHRNNCKP" and struct.unpack("<I", raw[8:12]) == (1,)
    import zlib
    assert struct.unpack("<I", raw[-4:])[0] == zlib.crc32(raw[12:-4])


def test_checkpoint_corruption_detected():
    raw = bytearray(data.encode_checkpoint(make_ck()))
    for pos in (20, len(raw) // 2, len(raw) - 5):
        bad = bytearray(raw)
        bad[pos] ^= 0x01
        with pytest.raises(data.CheckpointError, match="checksum"):
            data.decode_checkpoint(bytes(bad))
    v2 = bytearray(raw)
    v2[8:12] = struct.pack("<I", 2)
    with pytest.raises(data.CheckpointError, match="version 2"):
        data.decode_checkpoint(bytes(v2))
    with pytest.raises(data.CheckpointError, match="magic"):
        data.decode_checkpoint(b"NOTACKPT" + bytes(raw[8:]))
    with pytest.raises(data.CheckpointError):
        data.decode_checkpoint(bytes(raw[:10]))


def test_checkpoint_rejects_non_float32():
    ck = make_ck()
    ck.params["x"] = np.zeros(2)
    with pytest.raises(data.CheckpointError, match="float32"):
        data.encode_checkpoint(ck)
