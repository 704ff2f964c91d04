"""Dataset loaders: byte-exact CIFAR parsing, pixel rescaling, blob packing."""
import numpy as np
import pytest
from sklearn.linear_model import Perceptron

from bilat import data as D


def fake_cifar_bytes(rng, n=6):
    labels = rng.integers(0, 10, n, dtype=np.uint8)
    pixels = rng.integers(0, 256, (n, 3072), dtype=np.uint8)
    return np.concatenate([labels[:, None], pixels], axis=1).tobytes(), labels


# --- pixel rescaling -----------------------------------------------------------

def test_rescale_endpoints_and_midpoints():
    assert D.rescale_pixels(0) == -1.0
    assert D.rescale_pixels(255) == 1.0
    assert D.rescale_pixels(127) == pytest.approx(-0.00392156862745098, abs=1e-17)
    assert D.rescale_pixels(128) == pytest.approx(+0.00392156862745098, abs=1e-17)


def test_rescale_roundtrip_exhaustive():
    b = np.arange(256, dtype=np.uint8)
    back = D.pixels_to_bytes(D.rescale_pixels(b))
    assert np.array_equal(back, b)


def test_rescale_range_checks():
    with pytest.raises(ValueError):
        D.rescale_pixels(np.array([0, 256]))
    with pytest.raises(ValueError):
        D.rescale_pixels(np.array([-1]))
    with pytest.raises(ValueError):
        D.pixels_to_bytes(np.array([1.2]))


# --- CIFAR-10 binary -------------------------------------------------------------

def test_cifar_parse_shapes_and_values(tmp_path):
    rng = np.random.default_rng(0)
    raw, labels = fake_cifar_bytes(rng, n=2)
    p = tmp_path / "batch.bin"
    p.write_bytes(raw)
    ds = D.load_cifar10_binary(str(p))
    assert ds.x.shape == (2, 3, 32, 32)
    assert np.array_equal(ds.y, labels.astype(np.int64))
    assert ds.n_classes == 10
    # channel-planar layout: first pixel byte is red channel (0, 0)
    first_byte = np.frombuffer(raw, dtype=np.uint8)[1]
    assert ds.x[0, 0, 0, 0] == D.rescale_pixels(first_byte)


def test_cifar_roundtrip_byte_exact(tmp_path):
    rng = np.random.default_rng(1)
    raw, _ = fake_cifar_bytes(rng, n=5)
    p = tmp_path / "batch.bin"
    p.write_bytes(raw)
    ds = D.load_cifar10_binary(str(p))
    assert D.to_cifar10_bytes(ds) == raw


def test_cifar_truncated_file_rejected(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"\x00" * (3073 * 2 + 17))
    with pytest.raises(ValueError, match="multiple of 3073"):
        D.load_cifar10_binary(str(p))
    p.write_bytes(b"")
    with pytest.raises(ValueError):
        D.load_cifar10_binary(str(p))


def test_cifar_bad_label_rejected(tmp_path):
    rec = bytes([11]) + bytes(3072)
    p = tmp_path / "bad.bin"
    p.write_bytes(rec)
    with pytest.raises(ValueError, match="label byte"):
        D.load_cifar10_binary(str(p))


def test_cifar_per_class_cap_in_file_order(tmp_path):
    # labels 0,0,0,1,0,1 with take=2 keeps records 0,1,3,5
    records = []
    for i, lab in enumerate([0, 0, 0, 1, 0, 1]):
        records.append(bytes([lab]) + bytes([i]) * 3072)
    p = tmp_path / "batch.bin"
    p.write_bytes(b"".join(records))
    ds = D.load_cifar10_binary(str(p), take=2)
    assert np.array_equal(ds.y, [0, 0, 1, 1])
    firsts = D.pixels_to_bytes(ds.x[:, 0, 0, 0])
    assert np.array_equal(firsts, [0, 1, 3, 5])


# --- synthetic blobs --------------------------------------------------------------

def test_blobs_deterministic_and_bounded():
    a = D.synth_blobs(3, 20, 8, margin=0.8, seed=5)
    b = D.synth_blobs(3, 20, 8, margin=0.8, seed=5)
    c = D.synth_blobs(3, 20, 8, margin=0.8, seed=6)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
    assert not np.array_equal(a.x, c.x)
    assert a.x.shape == (60, 8)
    assert a.x.min() >= -1.0 and a.x.max() <= 1.0
    assert np.array_equal(np.unique(a.y), [0, 1, 2])


def test_blobs_linearly_separable_at_six_sigma():
    ds = D.synth_blobs(2, 80, 6, margin=0.9, seed=1)  # sigma = margin/8
    clf = Perceptron(max_iter=2000, tol=None, random_state=0)
    clf.fit(ds.x, ds.y)
    assert clf.score(ds.x, ds.y) == 1.0


def test_blobs_image_shape():
    ds = D.synth_blobs(2, 5, (1, 4, 4), margin=0.8, seed=2)
    assert ds.x.shape == (10, 1, 4, 4)


def test_blobs_infeasible_packing_reported():
    with pytest.raises(ValueError, match="pack"):
        D.synth_blobs(50, 1, 2, margin=1.5, seed=0)


def test_blobs_bad_args():
    with pytest.raises(ValueError):
        D.synth_blobs(2, 5, 4, margin=0.0, seed=0)
    with pytest.raises(ValueError):
        D.synth_blobs(1, 5, 4, margin=0.5, seed=0)


# --- desk digits -------------------------------------------------------------------

def test_desk_digits_shape_and_determinism():
    a = D.load_desk_digits(per_class=30, noise_sigma=0.3, seed=4)
    b = D.load_desk_digits(per_class=30, noise_sigma=0.3, seed=4)
    assert np.array_equal(a.x, b.x)
    assert a.x.shape == (300, 1, 8, 8)
    assert a.x.min() >= -1.0 and a.x.max() <= 1.0
    assert a.n_classes == 10
    counts = np.bincount(a.y, minlength=10)
    assert np.all(counts == 30)


def test_desk_digits_subset_classes():
    ds = D.load_desk_digits(per_class=10, n_classes=4)
    assert set(np.unique(ds.y)) == {0, 1, 2, 3}
    assert ds.n_classes == 4


def test_desk_digits_clean_when_no_noise():
    a = D.load_desk_digits(per_class=5, seed=0)
    b = D.load_desk_digits(per_class=5, seed=99)  # seed only matters with noise
    assert np.array_equal(a.x, b.x)


# --- dataset plumbing ----------------------------------------------------------------

def test_dataset_validation():
    with pytest.raises(ValueError, match="number of examples"):
        D.Dataset(np.zeros((3, 2)), np.zeros(2, np.int64), 2)
    with pytest.raises(ValueError, match=r"\[-1, 1\]"):
        D.Dataset(np.full((2, 2), 1.5), np.zeros(2, np.int64), 2)
    with pytest.raises(ValueError, match="labels"):
        D.Dataset(np.zeros((2, 2)), np.array([0, 5]), 2)


def test_split_dataset_stratified_and_disjoint():
    ds = D.synth_blobs(4, 50, 6, margin=0.7, seed=3)
    splits = D.split_dataset(ds, 0.2, seed=8)
    assert len(splits.train) == 160 and len(splits.test) == 40
    assert np.all(np.bincount(splits.test.y, minlength=4) == 10)
    # same data, nothing lost or duplicated
    joined = np.concatenate([splits.train.x, splits.test.x])
    assert np.array_equal(np.sort(joined, axis=0), np.sort(ds.x, axis=0))
    again = D.split_dataset(ds, 0.2, seed=8)
    assert np.array_equal(splits.test.x, again.test.x)


def test_splits_type_checks():
    a = D.synth_blobs(2, 10, 4, margin=0.8, seed=0)
    b = D.synth_blobs(3, 10, 4, margin=0.8, seed=0)
    with pytest.raises(ValueError, match="class counts"):
        D.DatasetSplits(a, b)
