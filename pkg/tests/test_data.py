import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from specreg import data
from specreg.data import Dataset, IdxFormatError, SyntheticSpec


def test_synthetic_is_seeded():
    spec = SyntheticSpec(num_classes=3, samples_per_class=20, input_dim=4, seed=7)
    a, b = data.generate_synthetic(spec), data.generate_synthetic(spec)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.inputs, y.inputs)
        np.testing.assert_array_equal(x.labels, y.labels)
    other = data.generate_synthetic(SyntheticSpec(num_classes=3, samples_per_class=20, input_dim=4, seed=8))
    assert not np.array_equal(a[0].inputs, other[0].inputs)


def test_noise_free_gaussians_are_linearly_separable():
    train, test = data.generate_synthetic(
        SyntheticSpec(num_classes=2, samples_per_class=200, input_dim=3, noise_std=0.0, seed=1)
    )
    # least-squares linear probe on one-hot targets
    X = np.hstack([train.inputs, np.ones((len(train), 1))])
    w, *_ = np.linalg.lstsq(X, np.eye(2)[train.labels], rcond=None)
    pred = (np.hstack([test.inputs, np.ones((len(test), 1))]) @ w).argmax(axis=1)
    assert np.mean(pred == test.labels) >= 0.99


def test_label_noise_rate():
    spec = SyntheticSpec(num_classes=5, samples_per_class=2000, input_dim=2, label_noise=0.2, seed=3)
    clean = SyntheticSpec(num_classes=5, samples_per_class=2000, input_dim=2, label_noise=0.0, seed=3)
    noisy, _ = data.generate_synthetic(spec)
    ref, _ = data.generate_synthetic(clean)
    # same inputs, only labels move
    np.testing.assert_array_equal(noisy.inputs, ref.inputs)
    assert abs(np.mean(noisy.labels != ref.labels) - 0.2) <= 0.02


def test_two_spirals_shapes():
    train, test = data.generate_synthetic(SyntheticSpec("two-spirals", 3, 50, 6, 0.05, 0.0, 2, test_samples_per_class=10))
    assert train.inputs.shape == (150, 6) and test.inputs.shape == (30, 6)
    assert np.bincount(train.labels).tolist() == [50, 50, 50]


def test_dataset_invariants():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 3)), np.array([0, 2]), 2, "train")
    with pytest.raises(ValueError):
        Dataset(np.full((1, 3), np.nan), np.array([0]), 2, "train")
    with pytest.raises(ValueError):
        Dataset(np.zeros((0, 3)), np.zeros(0, int), 2, "train")


def write_raw(path, b):
    path.write_bytes(b)
    return path


def test_read_idx_crafted_images(tmp_path):
    raw = bytes([0, 0, 0x08, 3]) + struct.pack(">3I", 2, 2, 2) + bytes([0, 51, 102, 255, 1, 2, 3, 4])
    arr = data.read_idx(write_raw(tmp_path / "x.idx", raw))
    np.testing.assert_array_equal(arr, np.array([0, 51, 102, 255, 1, 2, 3, 4]).reshape(2, 2, 2) / 255.0)


def test_read_idx_labels_are_integers(tmp_path):
    raw = bytes([0, 0, 0x08, 1]) + struct.pack(">I", 3) + bytes([7, 0, 9])
    lab = data.read_idx(write_raw(tmp_path / "y.idx", raw))
    assert lab.dtype == np.int64 and lab.tolist() == [7, 0, 9]


def test_read_idx_bad_magic(tmp_path):
    with pytest.raises(IdxFormatError, match="magic"):
        data.read_idx(write_raw(tmp_path / "bad.idx", bytes.fromhex("DEADBEEF") + b"\0" * 8))


def test_read_idx_huge_dims_rejected_without_allocating(tmp_path):
    raw = bytes([0, 0, 0x08, 2]) + struct.pack(">2I", 2**32 - 1, 2**32 - 1) + b"\0" * 16
    with pytest.raises(IdxFormatError, match="size"):
        data.read_idx(write_raw(tmp_path / "huge.idx", raw))


def test_read_idx_truncated(tmp_path):
    raw = bytes([0, 0, 0x08, 2]) + struct.pack(">2I", 3, 3) + b"\0" * 8
    with pytest.raises(IdxFormatError):
        data.read_idx(write_raw(tmp_path / "short.idx", raw))
    with pytest.raises(IdxFormatError):
        data.read_idx(write_raw(tmp_path / "hdr.idx", bytes([0, 0, 0x08, 3, 0])))


@settings(max_examples=40, deadline=None)
@given(
    st.sampled_from([np.uint8, np.int8, np.int16, np.int32, np.float32, np.float64]),
    st.lists(st.integers(1, 4), min_size=1, max_size=3),
    st.integers(0, 2**31),
)
def test_idx_byte_round_trip(tmp_path_factory, dtype, shape, seed):
    r = np.random.default_rng(seed)
    arr = (r.standard_normal(shape) * 50).astype(dtype)
    d = tmp_path_factory.mktemp("idx")
    data.write_idx(d / "a.idx", arr)
    raw = (d / "a.idx").read_bytes()
    back = data.read_idx(d / "a.idx", scale=False)
    np.testing.assert_array_equal(back, arr.astype(back.dtype))
    data.write_idx(d / "b.idx", back.astype(dtype))
    assert (d / "b.idx").read_bytes() == raw


def ds(x):
    x = np.asarray(x, dtype=np.float64)
    return Dataset(x, np.zeros(len(x), dtype=np.int64), 2, "train")


def test_gcn_constant_image_is_zero():
    out = data.global_contrast_normalize(ds(np.full((1, 2, 3, 3), 0.7)))
    np.testing.assert_array_equal(out.inputs, 0.0)


samples = arrays(np.float64, (4, 12), elements=st.floats(-100, 100, allow_nan=False, width=64))


@settings(max_examples=60, deadline=None)
@given(samples)
def test_gcn_mean_zero_std_one(x):
    flat = x.reshape(len(x), -1)
    keep = flat.std(axis=1) > 1e-3  # well away from the eps floor
    out = data.global_contrast_normalize(ds(x)).inputs.reshape(len(x), -1)[keep]
    np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.std(axis=1), 1.0, atol=1e-12)
    again = data.global_contrast_normalize(ds(out)).inputs if len(out) else out
    np.testing.assert_allclose(again, out, atol=1e-10)


def test_gcn_keeps_labels_and_shape(rng):
    x = rng.standard_normal((5, 1, 4, 4))
    d = Dataset(x, np.arange(5) % 3, 3, "test")
    out = data.global_contrast_normalize(d)
    assert out.inputs.shape == x.shape and out.split == "test"
    np.testing.assert_array_equal(out.labels, d.labels)


def test_augment_identity_and_involution(rng):
    x = rng.standard_normal((6, 3, 5, 5))
    np.testing.assert_array_equal(data.augment(x, False, 0, rng), x)
    once = data.augment(x, True, 0, rng, flip_prob=1.0)
    np.testing.assert_array_equal(once, x[..., ::-1])
    np.testing.assert_array_equal(data.augment(once, True, 0, rng, flip_prob=1.0), x)
    np.testing.assert_allclose(once.sum(axis=(1, 2, 3)), x.sum(axis=(1, 2, 3)), rtol=1e-14)


def test_augment_crop_is_a_shifted_window(rng):
    x = rng.standard_normal((8, 2, 6, 6))
    out = data.augment(x, False, 2, np.random.default_rng(5))
    r = np.random.default_rng(5)
    dy, dx = r.integers(0, 5, 8), r.integers(0, 5, 8)
    padded = np.pad(x, ((0, 0), (0, 0), (2, 2), (2, 2)))
    for i in range(8):
        np.testing.assert_array_equal(out[i], padded[i, :, dy[i] : dy[i] + 6, dx[i] : dx[i] + 6])


def test_augment_is_stream_deterministic(rng):
    x = rng.standard_normal((4, 7, 7))
    a = data.augment(x, True, 3, np.random.default_rng([1, 2]))
    b = data.augment(x, True, 3, np.random.default_rng([1, 2]))
    np.testing.assert_array_equal(a, b)
    assert a.shape == x.shape
