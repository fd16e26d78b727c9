import gzip
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vdl.data import (DataError, Dataset, PatchPipelineConfig, add_gaussian_noise, apply_standardization,
                      destandardize, extract_patches, gaussian_kernel, lcn, lcn_subtractive, load_dataset,
                      load_idx, load_mnist, read_image_dir, save_dataset, split, standardize, synth_sparse,
                      write_idx_images, write_idx_labels)
from vdl.numerics import Rng


def write_idx_fixture(path, images, labels_path=None, labels=None, gz=False):
    """Independent IDX writer built from the format description."""
    n, r, c = images.shape
    blob = struct.pack(">IIII", 0x803, n, r, c) + bytes(int(v) for v in images.ravel())
    opener = gzip.open if gz else open
    with opener(path, "wb") as f:
        f.write(blob)
    if labels_path is not None:
        with opener(labels_path, "wb") as f:
            f.write(struct.pack(">II", 0x801, len(labels)) + bytes(labels))


@pytest.fixture
def idx_pair(tmp_path):
    imgs = np.array([[[0, 1, 2], [3, 4, 5]], [[250, 251, 252], [253, 254, 255]]], dtype=np.uint8)
    write_idx_fixture(tmp_path / "img", imgs, tmp_path / "lab", [7, 3])
    return tmp_path / "img", tmp_path / "lab", imgs


def test_idx_fixture_roundtrip(idx_pair):
    ip, lp, imgs = idx_pair
    ds = load_idx(ip, lp)
    assert ds.samples.shape == (6, 2) and ds.image_shape == (2, 3)
    assert np.array_equal(ds.samples[:, 1], imgs[1].ravel().astype(np.float32))
    assert ds.labels.tolist() == [7, 3]


def test_idx_gzip(tmp_path):
    imgs = np.arange(2 * 4 * 4, dtype=np.uint8).reshape(2, 4, 4)
    write_idx_fixture(tmp_path / "i.gz", imgs, tmp_path / "l.gz", [1, 2], gz=True)
    ds = load_idx(tmp_path / "i.gz", tmp_path / "l.gz")
    assert np.array_equal(ds.samples.T.reshape(2, 4, 4), imgs)


def test_idx_errors(tmp_path, idx_pair):
    ip, lp, _ = idx_pair
    (tmp_path / "bad").write_bytes(struct.pack(">II", 0x999, 2) + b"\x00\x00")
    with pytest.raises(DataError, match="0x00000999"):
        load_idx(ip, tmp_path / "bad")
    (tmp_path / "short").write_bytes(ip.read_bytes()[:-3])
    with pytest.raises(DataError, match="truncated"):
        load_idx(tmp_path / "short")
    (tmp_path / "three").write_bytes(struct.pack(">II", 0x801, 3) + b"\x01\x02\x03")
    with pytest.raises(DataError, match="count mismatch"):
        load_idx(ip, tmp_path / "three")
    with pytest.raises(FileNotFoundError):
        load_idx(tmp_path / "missing")


@given(st.integers(1, 5), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31), st.booleans())
def test_idx_write_read_bit_identical(n, r, c, seed, gz):
    import tempfile
    from pathlib import Path
    g = np.random.default_rng(seed)
    imgs = g.integers(0, 256, size=(n, r, c)).astype(np.uint8)
    labels = g.integers(0, 10, size=n).astype(np.uint8)
    with tempfile.TemporaryDirectory() as d:
        suffix = ".gz" if gz else ""
        write_idx_images(Path(d) / f"i{suffix}", imgs)
        write_idx_labels(Path(d) / f"l{suffix}", labels)
        ds = load_idx(Path(d) / f"i{suffix}", Path(d) / f"l{suffix}")
    assert np.array_equal(ds.samples.T.reshape(n, r, c).astype(np.uint8), imgs)
    assert np.array_equal(ds.labels, labels)


def test_standardize():
    g = np.random.default_rng(0)
    raw = Dataset((g.random((20, 50)) * 255).astype(np.float32))
    ds = standardize(raw)
    assert abs(ds.samples.mean()) < 1e-5 and 1 - 1e-4 <= ds.samples.std() <= 1 + 1e-4
    held = Dataset((g.random((20, 7)) * 255).astype(np.float32))
    back = destandardize(apply_standardization(held, ds.mean, ds.std).samples, ds)
    assert np.max(np.abs(back - held.samples) / 255) <= 1e-6
    with pytest.raises(DataError):
        standardize(Dataset(np.full((4, 3), 9.0, dtype=np.float32)))


def test_split_and_mnist_loader(tmp_path):
    g = np.random.default_rng(1)
    imgs = g.integers(0, 256, size=(30, 4, 4)).astype(np.uint8)
    labels = g.integers(0, 10, size=30).astype(np.uint8)
    write_idx_fixture(tmp_path / "i", imgs, tmp_path / "l", labels.tolist())
    out = load_mnist(tmp_path / "i", tmp_path / "l", tmp_path / "i", tmp_path / "l", n_val=10)
    assert len(out["train"]) == 20 and len(out["val"]) == 10 and len(out["test"]) == 30
    assert abs(out["train"].samples.mean()) < 1e-5
    assert out["val"].mean == out["train"].mean and out["test"].std == out["train"].std
    a, b = split(out["test"], 10, Rng(3))
    a2, b2 = split(out["test"], 10, Rng(3))
    assert np.array_equal(a.samples, a2.samples) and np.array_equal(b.labels, b2.labels)
    with pytest.raises(DataError):
        split(out["test"], 31, Rng(0))


def test_dataset_spck_roundtrip(tmp_path):
    ds = Dataset(np.arange(12, dtype=np.float32).reshape(4, 3), np.array([1, 0, 9]), mean=2.5, std=1.5,
                 peak=3.0, image_shape=(2, 2))
    save_dataset(tmp_path / "d.spck", ds)
    back = load_dataset(tmp_path / "d.spck")
    assert np.array_equal(back.samples, ds.samples) and back.labels.tolist() == [1, 0, 9]
    assert (back.mean, back.std, back.peak, back.image_shape) == (2.5, 1.5, 3.0, (2, 2))


def correlate_oracle(x, k):
    """Direct 64-bit correlation with symmetric (edge-repeating) padding."""
    r = k.shape[0] // 2
    xp = np.pad(x, r, mode="symmetric")
    out = np.zeros_like(x, dtype=np.float64)
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            out[i, j] = float((xp[i:i + k.shape[0], j:j + k.shape[1]] * k).sum())
    return out


def test_gaussian_kernel():
    k = gaussian_kernel(13, 5.0)
    assert k.shape == (13, 13) and k.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(k, k.T) and np.allclose(k, k[::-1, ::-1])


def test_lcn_impulse_matches_direct_convolution():
    x = np.zeros((20, 17))
    x[7, 9] = 1.0
    k = gaussian_kernel(13, 5.0)
    v = x - correlate_oracle(x, k)
    expected = v / np.maximum(np.sqrt(correlate_oracle(v * v, k)), 1e-4)
    assert np.max(np.abs(lcn(x) - expected)) <= 1e-6


def test_lcn_flat_and_invariances():
    assert np.max(np.abs(lcn_subtractive(np.full((15, 15), 3.0)))) <= 1e-6
    assert np.max(np.abs(lcn(np.full((15, 15), 3.0)))) <= 1e-6
    g = np.random.default_rng(2)
    x = g.standard_normal((16, 14))
    assert np.max(np.abs(lcn_subtractive(2.5 * x) - 2.5 * lcn_subtractive(x))) <= 1e-6
    assert np.max(np.abs(lcn(x + 7.0) - lcn(x))) <= 1e-5
    with pytest.raises(DataError):
        lcn(np.zeros((12, 30)))


def test_extract_patches_single_placement():
    img = np.random.default_rng(3).random((28, 28))
    cfg = PatchPipelineConfig(n_train=5, n_val=0, n_test=0)
    out = extract_patches([img], cfg, Rng(0))
    expected = lcn((img - img.mean()) / img.std(), cfg).ravel()
    for j in range(5):
        assert np.allclose(out["train"].samples[:, j], expected, atol=1e-5)
    assert len(out["val"]) == 0 and len(out["test"]) == 0


def test_extract_patches_pools_determinism_and_skips():
    g = np.random.default_rng(4)
    images = [g.random((40 + i, 35)) for i in range(10)] + [g.random((20, 20))]
    cfg = PatchPipelineConfig(n_train=30, n_val=10, n_test=10)
    with pytest.warns(UserWarning, match="skipped 1"):
        a = extract_patches(images, cfg, Rng(5))
    with pytest.warns(UserWarning):
        b = extract_patches(images, cfg, Rng(5))
    pools = [set(a[n].meta["source_images"].tolist()) for n in ("train", "val", "test")]
    assert not (pools[0] & pools[1]) and not (pools[0] & pools[2]) and not (pools[1] & pools[2])
    assert 10 not in set().union(*pools)
    for n in ("train", "val", "test"):
        assert np.array_equal(a[n].samples, b[n].samples)
        assert a[n].samples.shape == (784, cfg.__dict__[f"n_{n}"])


def test_read_image_dir(tmp_path):
    from PIL import Image
    Image.fromarray(np.full((30, 30), 100, dtype=np.uint8)).save(tmp_path / "a.pgm")
    rgb = np.zeros((30, 31, 3), dtype=np.uint8)
    rgb[..., 0] = 200
    Image.fromarray(rgb).save(tmp_path / "b.png")
    (tmp_path / "notes.txt").write_text("ignored")
    ims = read_image_dir(tmp_path)
    assert len(ims) == 2
    assert ims[0].shape == (30, 30) and ims[0][0, 0] == 100
    assert ims[1].shape == (30, 31) and ims[1][0, 0] == pytest.approx(200 * 0.299)
    (tmp_path / "empty").mkdir()
    with pytest.raises(DataError):
        read_image_dir(tmp_path / "empty")


def test_noise():
    x = np.random.default_rng(6).standard_normal((5, 4)).astype(np.float32)
    assert np.array_equal(add_gaussian_noise(x, 0.0, Rng(0)), x)
    big = np.zeros((1000, 1000))
    eps = add_gaussian_noise(big, 0.7, Rng(1)) - big
    assert 0.995 * 0.7 <= eps.std() <= 1.005 * 0.7
    with pytest.raises(ValueError):
        add_gaussian_noise(x, -1.0, Rng(0))


def test_synth_sparse():
    ds, dec, Z = synth_sparse(10, 8, 1, 200, 0.0, Rng(7))
    W = dec.W
    assert np.allclose(np.linalg.norm(W, axis=0), 1.0)
    for i in range(200):
        j = np.flatnonzero(Z[:, i])
        assert len(j) == 1 and Z[j[0], i] > 0
        assert np.allclose(ds.samples[:, i], Z[j[0], i] * W[:, j[0]], atol=1e-6)
    ds, dec, Z = synth_sparse(20, 30, 3, 2000, 0.01, Rng(8))
    resid = np.linalg.norm(ds.samples - dec.W @ Z, axis=0)
    assert np.mean(resid <= np.sqrt(20) * 3 * 0.01) >= 0.99
    ds2, _, _ = synth_sparse(20, 30, 3, 2000, 0.01, Rng(8))
    assert np.array_equal(ds.samples, ds2.samples)
    with pytest.raises(ValueError):
        synth_sparse(5, 3, 4, 10, 0.0, Rng(0))
