import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qrobust.data import (
    CIFAR_RECORD,
    DataError,
    Dataset,
    dumps_tensor,
    fold_variance,
    kfold,
    load_cifar10,
    load_tensor,
    load_tensors,
    loads_tensor,
    one_hot,
    preprocess,
    read_cifar_batch,
    save_tensor,
    save_tensors,
    synthetic_cifar,
    write_cifar_batch,
)


def cifar_record(label, pixels):
    """One record assembled by hand: label byte then R, G and B planes."""
    return bytes([label]) + bytes(pixels)


# -- CIFAR-10 layout ---------------------------------------------------------------


def test_record_label_and_first_pixel(tmp_path):
    pixels = np.zeros(3072, dtype=np.uint8)
    pixels[0] = 255  # red plane, row 0, column 0
    pixels[1024 + 33] = 9  # green plane, row 1, column 1
    (tmp_path / "b.bin").write_bytes(cifar_record(7, pixels))
    images, labels = read_cifar_batch(tmp_path / "b.bin")
    assert labels.tolist() == [7]
    assert images.shape == (1, 32, 32, 3)
    assert images[0, 0, 0, 0] == 255
    assert images[0, 1, 1, 1] == 9
    ds = load_cifar10(tmp_path / "b.bin")
    assert np.argmax(ds.labels[0]) == 7
    assert ds.labels.shape == (1, 10)


def test_truncated_record_reports_offset(tmp_path):
    (tmp_path / "b.bin").write_bytes(cifar_record(1, [0] * 3072) + b"\x02" * 100)
    with pytest.raises(DataError, match=f"offset {CIFAR_RECORD}"):
        read_cifar_batch(tmp_path / "b.bin")


def test_bad_label_reports_offset(tmp_path):
    (tmp_path / "b.bin").write_bytes(cifar_record(1, [0] * 3072) + cifar_record(12, [0] * 3072))
    with pytest.raises(DataError, match=f"offset {CIFAR_RECORD}"):
        read_cifar_batch(tmp_path / "b.bin")


def test_write_then_read_is_identity(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(5, 32, 32, 3), dtype=np.uint8)
    lab = rng.integers(0, 10, size=5)
    write_cifar_batch(tmp_path / "b.bin", img, lab)
    got_img, got_lab = read_cifar_batch(tmp_path / "b.bin")
    assert np.array_equal(got_img, img) and np.array_equal(got_lab, lab)
    # channel-planar on disk
    raw = (tmp_path / "b.bin").read_bytes()
    assert raw[1 : 1 + 1024] == img[0, :, :, 0].tobytes()


def test_full_size_directory_counts(tmp_path):
    zeros = np.zeros((10_000, 32, 32, 3), dtype=np.uint8)
    labels = np.arange(10_000) % 10
    for i in range(1, 6):
        write_cifar_batch(tmp_path / f"data_batch_{i}.bin", zeros, labels)
    write_cifar_batch(tmp_path / "test_batch.bin", zeros, labels)
    ds = load_cifar10(tmp_path)
    assert len(ds.split("train")) == 50_000
    assert len(ds.split("test")) == 10_000


def test_missing_directory_is_data_error(tmp_path):
    with pytest.raises(DataError):
        load_cifar10(tmp_path / "nope")
    with pytest.raises(DataError):
        load_cifar10(tmp_path)


# -- preprocessing -------------------------------------------------------------------


def test_preprocess_examples():
    rgb = np.array([[[[255, 255, 255], [0, 0, 0], [255, 0, 0]]]], dtype=np.uint8)
    out = preprocess(rgb)
    assert out.shape == (1, 1, 3, 1)
    assert out[0, 0, 0, 0] == 1.0
    assert out[0, 0, 1, 0] == 0.0
    assert out[0, 0, 2, 0] == np.float32(0.299)


def test_gray_input_maps_to_value_over_255():
    v = np.arange(256, dtype=np.uint8)
    rgb = np.repeat(v[None, None, :, None], 3, axis=-1)
    assert np.array_equal(preprocess(rgb)[0, 0, :, 0], (v / 255.0).astype(np.float32))


@settings(max_examples=50, deadline=None)
@given(arrays(np.uint8, (2, 4, 4, 3)))
def test_preprocess_range(images):
    out = preprocess(images)
    assert out.shape == (2, 4, 4, 1)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_preprocess_rejects_non_rgb():
    with pytest.raises(DataError):
        preprocess(np.zeros((1, 4, 4, 1)))


# -- QRT1 container ------------------------------------------------------------------


def test_qrt_header_layout():
    arr = np.arange(6, dtype="<f4").reshape(2, 3)
    raw = dumps_tensor(arr)
    assert raw[:4] == b"QRT1"
    assert struct.unpack_from("<IIII", raw, 4) == (0, 2, 2, 3)
    assert raw[20:] == arr.tobytes()


@pytest.mark.parametrize("dtype", ["<f4", "u1", "<i4", "<f8"])
def test_qrt_round_trip_is_bitwise(tmp_path, dtype):
    arr = (np.random.default_rng(0).normal(size=(3, 4, 2)) * 50).astype(dtype)
    save_tensor(tmp_path / "t.qrt", arr)
    back = load_tensor(tmp_path / "t.qrt")
    assert back.dtype == np.dtype(dtype) and back.tobytes() == arr.tobytes() and back.shape == arr.shape


def test_qrt_short_payload_names_sizes():
    raw = dumps_tensor(np.zeros((4, 3), dtype="<f4"))[:-5]
    with pytest.raises(DataError, match="43 bytes, expected 48"):
        loads_tensor(raw)


def test_qrt_bad_magic_and_dtype():
    raw = dumps_tensor(np.zeros(2, dtype="<f4"))
    with pytest.raises(DataError, match="magic"):
        loads_tensor(b"QRT2" + raw[4:])
    with pytest.raises(DataError, match="dtype"):
        loads_tensor(raw[:4] + struct.pack("<I", 9) + raw[8:])
    with pytest.raises(DataError):
        dumps_tensor(np.zeros(2, dtype=np.complex64))


def test_flat_dataset_round_trip(tmp_path):
    x = np.random.default_rng(1).normal(size=(7, 5)).astype(np.float32)
    ds = Dataset(x, one_hot([0, 1, 2, 0, 1, 2, 2], 3))
    save_tensors(tmp_path / "d.qrt", ds)
    back = load_tensors(tmp_path / "d.qrt")
    assert back.inputs.shape == (7, 5)
    assert np.array_equal(back.inputs, x) and np.array_equal(back.labels, ds.labels)


def test_label_count_mismatch(tmp_path):
    save_tensor(tmp_path / "d.qrt", np.zeros((3, 2), dtype="<f4"))
    (tmp_path / "d.qrt.labels").write_bytes(b"\x00\x01")
    with pytest.raises(DataError, match="2 labels for 3"):
        load_tensors(tmp_path / "d.qrt")


def test_cifar_through_container_round_trips_raw_bytes(tmp_path):
    rng = np.random.default_rng(2)
    img = rng.integers(0, 256, size=(6, 32, 32, 3), dtype=np.uint8)
    write_cifar_batch(tmp_path / "test_batch.bin", img, rng.integers(0, 10, size=6))
    ds = load_cifar10(tmp_path / "test_batch.bin")
    save_tensors(tmp_path / "c.qrt", ds)
    back = load_tensors(tmp_path / "c.qrt", num_classes=10)
    write_cifar_batch(tmp_path / "again.bin", back.inputs, back.class_indices)
    assert (tmp_path / "again.bin").read_bytes() == (tmp_path / "test_batch.bin").read_bytes()


# -- datasets ------------------------------------------------------------------------


def test_dataset_invariants():
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 3)), np.array([[1.0, 1.0], [0.0, 1.0]]))
    with pytest.raises(DataError):
        Dataset(np.zeros((3, 3)), one_hot([0, 1], 2))
    with pytest.raises(DataError):
        one_hot([0, 3], 3)


def test_select_classes_relabels_in_order():
    ds = Dataset(np.arange(6, dtype=np.float32)[:, None], one_hot([3, 5, 1, 5, 3, 0], 10))
    sub = ds.select_classes([5, 3])
    assert sub.inputs.ravel().tolist() == [0, 1, 3, 4]
    assert sub.class_indices.tolist() == [1, 0, 0, 1]


def test_synthetic_stand_in_is_deterministic_cifar_shaped():
    a_img, a_lab = synthetic_cifar(5, (0, 3), seed=4)
    b_img, b_lab = synthetic_cifar(5, (0, 3), seed=4)
    assert a_img.shape == (10, 32, 32, 3) and a_img.dtype == np.uint8
    assert sorted(a_lab.tolist()) == [0] * 5 + [3] * 5
    assert np.array_equal(a_img, b_img) and np.array_equal(a_lab, b_lab)


# -- K-fold ----------------------------------------------------------------------------


def test_kfold_examples():
    assert kfold(10, 10).sizes == [1] * 10
    assert sorted(kfold(23, 10, seed=3).sizes) == [2] * 7 + [3] * 3
    assert np.array_equal(kfold(23, 10, 5).assignments, kfold(23, 10, 5).assignments)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 30).flatmap(lambda k: st.tuples(st.just(k), st.integers(k, 300))), st.integers(0, 2**32 - 1))
def test_kfold_partitions(kn, seed):
    k, n = kn
    plan = kfold(n, k, seed)
    assert max(plan.sizes) - min(plan.sizes) <= 1
    held = np.concatenate([val for _, val in plan])
    assert sorted(held.tolist()) == list(range(n))
    for train_idx, val_idx in plan:
        assert not set(train_idx) & set(val_idx)
        assert len(train_idx) + len(val_idx) == n


def test_kfold_errors():
    with pytest.raises(DataError):
        kfold(5, 6)
    with pytest.raises(DataError):
        kfold(5, 1)
    with pytest.raises(IndexError):
        kfold(5, 2).fold(2)


def test_fold_variance_examples():
    assert fold_variance([80, 90]) == 25.0
    assert fold_variance(list(range(1, 11))) == 8.25
    assert fold_variance([70.0] * 4) == 0.0
    with pytest.raises(DataError):
        fold_variance([])
