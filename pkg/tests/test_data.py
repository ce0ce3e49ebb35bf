import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from randlab import data
from randlab.data import Dataset, SyntheticSpec


def _write_raw_idx(path, magic, dims, payload: bytes):
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{len(dims)}I", *dims))
        fh.write(payload)


@pytest.fixture
def tiny_mnist(tmp_path):
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 256, (6, 28, 28), dtype=np.uint8)
    labels = np.array([5, 0, 4, 1, 9, 2], dtype=np.uint8)
    img, lab = tmp_path / "img", tmp_path / "lab"
    _write_raw_idx(img, 0x803, (6, 28, 28), pixels.tobytes())
    _write_raw_idx(lab, 0x801, (6,), labels.tobytes())
    return img, lab, pixels, labels


def test_hand_built_idx_decodes(tiny_mnist):
    img, lab, pixels, labels = tiny_mnist
    ds = data.load_mnist_idx(img, lab)
    assert ds.images.shape == (6, 1, 28, 28) and ds.labels.tolist() == labels.tolist()
    np.testing.assert_allclose(ds.images[:, 0] * 255.0, pixels, atol=1e-4)
    # label of the first sample is the byte right after the 8-byte header
    assert lab.read_bytes()[8] == ds.labels[0] == 5


def test_gzipped_idx_reads_the_same(tiny_mnist, tmp_path):
    img, lab, _, _ = tiny_mnist
    gz = tmp_path / "img.gz"
    gz.write_bytes(gzip.compress(img.read_bytes()))
    np.testing.assert_array_equal(data.read_idx(gz), data.read_idx(img))


def test_swapped_files_raise_magic_error(tiny_mnist):
    img, lab, _, _ = tiny_mnist
    with pytest.raises(data.IdxMagicError, match="0x00000803"):
        data.load_mnist_idx(img, img)
    with pytest.raises(data.IdxMagicError):
        data.load_mnist_idx(lab, lab)


def test_truncated_payload(tiny_mnist, tmp_path):
    img, lab, _, _ = tiny_mnist
    cut = tmp_path / "cut"
    cut.write_bytes(img.read_bytes()[:-10])
    with pytest.raises(data.IdxTruncatedError):
        data.load_mnist_idx(cut, lab)
    stub = tmp_path / "stub"
    stub.write_bytes(b"\x00\x00")
    with pytest.raises(data.IdxTruncatedError):
        data.read_idx(stub)


def test_count_mismatch(tiny_mnist, tmp_path):
    img, _, _, labels = tiny_mnist
    short = tmp_path / "short"
    _write_raw_idx(short, 0x801, (5,), labels[:5].tobytes())
    with pytest.raises(data.IdxCountMismatchError):
        data.load_mnist_idx(img, short)


def test_error_kinds_are_distinct():
    kinds = {data.IdxMagicError, data.IdxTruncatedError, data.IdxCountMismatchError}
    assert all(issubclass(k, data.DataError) for k in kinds)
    assert all(not issubclass(a, b) for a in kinds for b in kinds if a is not b)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(["u1", "i2", "i4", "f4", "f8"]), st.lists(st.integers(1, 5), min_size=1, max_size=4))
def test_idx_round_trip(tmp_path_factory, dtype, shape):
    arr = (np.random.default_rng(len(shape)).random(shape) * 100).astype(dtype)
    path = tmp_path_factory.mktemp("idx") / "a.idx"
    data.write_idx(path, arr)
    back = data.read_idx(path)
    assert back.shape == arr.shape
    np.testing.assert_array_equal(back, arr)


def test_mnist_writer_inverts_reader(tiny_mnist, tmp_path):
    ds = data.load_mnist_idx(*tiny_mnist[:2])
    data.write_mnist_idx(ds, tmp_path / "a", tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == tiny_mnist[0].read_bytes()
    assert (tmp_path / "b").read_bytes() == tiny_mnist[1].read_bytes()


def test_data_dir_resolution(monkeypatch, tmp_path):
    monkeypatch.delenv(data.DATA_ENV, raising=False)
    with pytest.raises(data.DataError):
        data.data_dir()
    monkeypatch.setenv(data.DATA_ENV, str(tmp_path))
    assert data.data_dir() == tmp_path
    assert data.data_dir("/elsewhere") == data.Path("/elsewhere")
    with pytest.raises(data.DataError, match="missing MNIST file"):
        data.load_mnist("train")


def test_dataset_invariants():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), np.zeros(3), "x", 2)
    with pytest.raises(ValueError):
        Dataset(np.full((1, 2), 1.5), np.zeros(1), "x", 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((1, 2)), np.array([2]), "x", 2)


def test_blobs_without_noise_are_two_points():
    ds = data.make_synthetic(SyntheticSpec("blobs", 10, 0.0, seed=3))
    for cls, centre in enumerate(data.BLOB_CENTERS):
        np.testing.assert_allclose(ds.images[ds.labels == cls], np.tile(centre, (10, 1)), atol=1e-7)


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(["blobs", "circles"]), st.integers(1, 50), st.floats(0, 1), st.integers(0, 2**31))
def test_synthetic_is_valid_and_reproducible(kind, n, noise, seed):
    spec = SyntheticSpec(kind, n, noise, seed)
    a, b = data.make_synthetic(spec), data.make_synthetic(spec)
    assert len(a) == 2 * n and np.bincount(a.labels).tolist() == [n, n]
    assert a.images.min() >= 0 and a.images.max() <= 1
    assert a.images.tobytes() == b.images.tobytes() and a.labels.tobytes() == b.labels.tobytes()


def test_sampling_rules():
    ds = data.make_synthetic(SyntheticSpec("blobs", 20, 0.1, seed=0))
    full = data.sample_eval(ds, len(ds), seed=4)
    assert sorted(map(tuple, full.images.tolist())) == sorted(map(tuple, ds.images.tolist()))
    np.testing.assert_array_equal(data.sample_indices(10_000, 1000, 7), data.sample_indices(10_000, 1000, 7))
    with pytest.raises(ValueError):
        data.sample_indices(10, 11, 0)


def test_different_seeds_overlap_like_a_hypergeometric_draw():
    # expected overlap 1000 * 1000 / 10000 = 100, sd about 9
    overlap = len(np.intersect1d(data.sample_indices(10_000, 1000, 1), data.sample_indices(10_000, 1000, 2)))
    assert overlap < 250


def test_split_is_disjoint_and_complete():
    ds = data.make_synthetic(SyntheticSpec("circles", 30, 0.05, seed=0))
    a, b = data.split(ds, 25, seed=1)
    assert len(a) == 25 and len(b) == 35
    rows = {tuple(r) for r in a.images.tolist()} | {tuple(r) for r in b.images.tolist()}
    assert len(rows) == len({tuple(r) for r in ds.images.tolist()})
