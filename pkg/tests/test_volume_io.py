import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from corrseg.errors import (BadLabelError, DuplicateIdError, EmptyCaseError, ShapeMismatchError,
                            VolumeIOError)
from corrseg.volume_io import (LabelVolume, ModalityVolume, MultiModalCase, crop_resize,
                               decode_labels, encode_labels, load_case, read_manifest, read_raw,
                               split_dataset, write_manifest, write_raw, ManifestEntry,
                               znormalize)


def _write_case(tmp_path, shapes, labels=None):
    paths = []
    for k, shape in enumerate(shapes):
        p = tmp_path / f"m{k}.mmsv"
        write_raw(p, np.full(shape, k + 1.0, dtype=np.float32))
        paths.append(p)
    label_path = None
    if labels is not None:
        label_path = tmp_path / "seg.mmsv"
        write_raw(label_path, labels, labels=True)
    return paths, label_path


def test_load_case_without_labels(tmp_path):
    paths, _ = _write_case(tmp_path, [(8, 8, 8)] * 4)
    case = load_case(paths, case_id="c0")
    assert case.labels is None
    assert [v.modality_tag for v in case.modalities] == ["FLAIR", "T1", "T1c", "T2"]
    assert case.shape == (8, 8, 8)
    assert case.modalities[2].data[0, 0, 0] == 3.0


def test_load_case_shape_mismatch(tmp_path):
    paths, _ = _write_case(tmp_path, [(8, 8, 8)] * 3 + [(9, 9, 9)])
    with pytest.raises(ShapeMismatchError) as exc:
        load_case(paths)
    assert exc.value.code == "SHAPE_MISMATCH"


def test_load_case_bad_label(tmp_path):
    lab = np.zeros((8, 8, 8), dtype=np.uint8)
    lab[2, 2, 2] = 3
    paths, lp = _write_case(tmp_path, [(8, 8, 8)] * 4, labels=lab)
    with pytest.raises(BadLabelError) as exc:
        load_case(paths, lp)
    assert exc.value.code == "BAD_LABEL"


def test_load_case_missing_file(tmp_path):
    paths, _ = _write_case(tmp_path, [(8, 8, 8)] * 3)
    with pytest.raises(VolumeIOError) as exc:
        load_case(paths + [tmp_path / "nope.mmsv"])
    assert exc.value.code == "IO_ERROR"


def test_labels_remapped_contiguous(tmp_path):
    lab = np.array([0, 1, 2, 4] * 128, dtype=np.uint8).reshape(8, 8, 8)
    paths, lp = _write_case(tmp_path, [(8, 8, 8)] * 4, labels=lab)
    case = load_case(paths, lp)
    assert set(np.unique(case.labels.classes)) == {0, 1, 2, 3}
    np.testing.assert_array_equal(case.labels.values, lab)


def test_raw_format_bit_exact(tmp_path):
    arr = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4) * 0.5
    p = tmp_path / "v.mmsv"
    write_raw(p, arr)
    blob = p.read_bytes()
    assert blob[:4] == b"MMSV"
    assert blob[4:16] == np.array([2, 3, 4], dtype="<u4").tobytes()
    assert blob[16:] == arr.astype("<f4").tobytes()
    np.testing.assert_array_equal(read_raw(p), arr)
    # element 1 in D-major order is arr[0, 0, 1]
    assert np.frombuffer(blob[20:24], "<f4")[0] == arr[0, 0, 1]


def test_raw_label_layout(tmp_path):
    lab = np.array([0, 1, 2, 4], dtype=np.uint8).reshape(1, 2, 2)
    p = tmp_path / "l.mmsv"
    write_raw(p, lab, labels=True)
    assert p.read_bytes()[16:] == bytes([0, 1, 2, 4])
    out = read_raw(p)
    assert out.dtype == np.uint8
    np.testing.assert_array_equal(out, lab)


def test_raw_bad_magic(tmp_path):
    p = tmp_path / "bad.mmsv"
    p.write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(VolumeIOError):
        read_raw(p)


def test_nifti_roundtrip(tmp_path):
    nib = pytest.importorskip("nibabel")
    arr = np.random.default_rng(0).random((6, 7, 8)).astype(np.float32)
    affine = np.diag([1.5, 1.0, 2.0, 1.0])
    paths = []
    for k in range(4):
        p = tmp_path / f"m{k}.nii.gz"
        nib.save(nib.Nifti1Image(arr + k, affine), str(p))
        paths.append(p)
    lab = np.zeros((6, 7, 8), dtype=np.int16)
    lab[1:3, 1:3, 1:3] = 4
    lp = tmp_path / "seg.nii.gz"
    nib.save(nib.Nifti1Image(lab, affine), str(lp))
    case = load_case(paths, lp, case_id="n0")
    assert case.spacing == (1.5, 1.0, 2.0)
    np.testing.assert_allclose(case.modalities[3].data, arr + 3)
    assert case.labels.values.max() == 4


def test_manifest_roundtrip(tmp_path):
    entries = [ManifestEntry("a", [str(tmp_path / f"a{k}.mmsv") for k in range(4)],
                             str(tmp_path / "a_seg.mmsv")),
               ManifestEntry("b", [str(tmp_path / f"b{k}.mmsv") for k in range(4)])]
    write_manifest(tmp_path / "manifest.txt", entries)
    lines = (tmp_path / "manifest.txt").read_text().splitlines()
    assert lines[0] == "a,a0.mmsv,a1.mmsv,a2.mmsv,a3.mmsv,a_seg.mmsv"
    back = read_manifest(tmp_path / "manifest.txt")
    assert back == entries


# --- znormalize -----------------------------------------------------------

def test_znormalize_all_zero():
    out = znormalize(ModalityVolume(np.zeros((4, 4, 4))))
    assert np.all(out.data == 0)


def test_znormalize_known_values():
    data = np.zeros((3, 3, 3))
    data[0, 0, 0], data[1, 1, 1], data[2, 2, 2] = 1, 2, 3
    out = znormalize(ModalityVolume(data)).data
    expected = (np.array([1.0, 2.0, 3.0]) - 2.0) / math.sqrt(2.0 / 3.0)
    np.testing.assert_allclose([out[0, 0, 0], out[1, 1, 1], out[2, 2, 2]], expected, atol=1e-12)
    np.testing.assert_allclose(expected, [-1.2247449, 0.0, 1.2247449], atol=1e-6)
    assert np.count_nonzero(out) == 2


def test_znormalize_constant_foreground():
    data = np.zeros((4, 4, 4))
    data[1:3, 1:3, 1:3] = 5.0
    assert np.all(znormalize(ModalityVolume(data)).data == 0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5, 5, 5),
              elements=st.floats(-100, 100, allow_nan=False, allow_infinity=False)))
def test_znormalize_idempotent(data):
    fg = data[data != 0]
    if fg.size < 2 or fg.std() < 1e-3:
        return
    once = znormalize(ModalityVolume(data))
    twice = znormalize(once)
    # mean-zero output may put a voxel at exactly 0, which then drops out of the mask
    if np.count_nonzero(once.data) != fg.size:
        return
    np.testing.assert_allclose(twice.data, once.data, atol=1e-6)
    out_fg = once.data[data != 0]
    assert abs(out_fg.mean()) < 1e-9 and abs(out_fg.std() - 1) < 1e-9


# --- crop_resize ----------------------------------------------------------

def _case(shape, fill=None, labels=None):
    rng = np.random.default_rng(0)
    mods = [ModalityVolume(rng.random(shape) + 0.1 if fill is None else fill(k), modality_tag=t)
            for k, t in enumerate(["FLAIR", "T1", "T1c", "T2"])]
    lab = LabelVolume.from_values(labels) if labels is not None else None
    return MultiModalCase("c", mods, lab)


def test_crop_resize_brats_shape():
    shape = (155, 240, 240)

    def fill(k):
        v = np.zeros(shape, dtype=np.float32)
        v[10:140, 20:220, 30:200] = 1.0 + k
        return v

    out = crop_resize(_case(shape, fill), (128, 128, 128))
    for v in out.modalities:
        assert v.shape == (128, 128, 128)
    np.testing.assert_allclose(out.modalities[1].data, 2.0, atol=1e-5)


def test_crop_resize_identity():
    case = _case((16, 16, 16))
    out = crop_resize(case, (16, 16, 16))
    for a, b in zip(case.modalities, out.modalities):
        np.testing.assert_array_equal(a.data, b.data)
    assert out.spacing == case.spacing


def test_crop_resize_label_values_preserved():
    rng = np.random.default_rng(3)
    labels = rng.choice([0, 2, 4], size=(20, 18, 22))
    out = crop_resize(_case((20, 18, 22), labels=labels), (16, 16, 16))
    assert set(np.unique(out.labels.values)) <= {0, 2, 4}
    assert out.labels.shape == (16, 16, 16)


def test_crop_resize_crops_to_joint_box():
    shape = (12, 12, 12)

    def fill(k):
        v = np.zeros(shape)
        v[2 + k:6 + k, 3:9, 1:11] = 1.0
        return v

    out = crop_resize(_case(shape, fill), (8, 6, 10))
    # joint box is 7 x 6 x 10; spacing scales with it
    assert out.shape == (8, 6, 10)
    np.testing.assert_allclose(out.spacing, (7 / 8, 1.0, 1.0))


def test_crop_resize_empty_case():
    with pytest.raises(EmptyCaseError) as exc:
        crop_resize(_case((4, 4, 4), fill=lambda k: np.zeros((4, 4, 4))), (4, 4, 4))
    assert exc.value.code == "EMPTY_CASE"


@settings(max_examples=25, deadline=None)
@given(st.tuples(*[st.integers(3, 12)] * 3), st.tuples(*[st.integers(1, 10)] * 3))
def test_crop_resize_shape_property(shape, target):
    out = crop_resize(_case(shape), target)
    assert all(v.shape == target for v in out.modalities)


# --- split ----------------------------------------------------------------

def test_split_reference_sizes():
    ids = [f"p{k:03d}" for k in range(285)]
    train, test = split_dataset(ids, 0.8, seed=1)
    assert (len(train), len(test)) == (228, 57)
    assert set(train) | set(test) == set(ids) and not set(train) & set(test)


def test_split_small_and_deterministic():
    ids = [str(k) for k in range(10)]
    a = split_dataset(ids, 0.8, seed=5)
    b = split_dataset(ids, 0.8, seed=5)
    assert a == b
    assert (len(a[0]), len(a[1])) == (8, 2)


def test_split_duplicates():
    with pytest.raises(DuplicateIdError):
        split_dataset(["a", "b", "a"], 0.8, 0)


@given(st.lists(st.text(min_size=1, max_size=5), unique=True, min_size=1, max_size=40),
       st.floats(0.05, 0.95), st.integers(0, 1000))
def test_split_partition_property(ids, ratio, seed):
    train, test = split_dataset(ids, ratio, seed)
    assert set(train) | set(test) == set(ids)
    assert not set(train) & set(test)
    assert len(train) == math.floor(ratio * len(ids) + 1e-9)


def test_label_codec():
    vals = np.array([0, 1, 2, 4])
    np.testing.assert_array_equal(encode_labels(vals), [0, 1, 2, 3])
    np.testing.assert_array_equal(decode_labels(encode_labels(vals)), vals)
