"""Volume container round-trips, phantom generator, dataset manifests."""

import json

import numpy as np
import pytest

from geoseg.data import (PhantomParams, build_dataset, generate_phantom,
                         load_manifest, load_split, read_array, write_array)
from geoseg.errors import DataError, FileFormatError

rng = np.random.default_rng(41)


# -- volume container ----------------------------------------------------------


def test_array_round_trip_float32(tmp_path):
    arr = rng.standard_normal((9, 7)).astype(np.float32)
    write_array(tmp_path / "vol", arr, (1.0, 1.0))
    back, spacing = read_array(tmp_path / "vol.json")
    assert back.dtype == np.float32 and spacing == (1.0, 1.0)
    assert back.tobytes() == arr.tobytes()


def test_array_round_trip_uint8(tmp_path):
    arr = (rng.random((4, 5, 6)) < 0.5).astype(np.uint8)
    write_array(tmp_path / "m", arr, (1.0, 1.0, 2.5))
    back, _ = read_array(tmp_path / "m.json")
    assert back.dtype == np.uint8
    np.testing.assert_array_equal(back, arr)


def test_payload_size_is_shape_times_itemsize(tmp_path):
    arr = np.zeros((32, 32, 16), dtype=np.float32)
    write_array(tmp_path / "v", arr, (1, 1, 1))
    assert (tmp_path / "v.raw").stat().st_size == 32 * 32 * 16 * 4


def test_truncated_payload_rejected(tmp_path):
    arr = np.zeros((8, 8), dtype=np.float32)
    write_array(tmp_path / "v", arr, (1, 1))
    raw = tmp_path / "v.raw"
    raw.write_bytes(raw.read_bytes()[:-4])
    with pytest.raises(FileFormatError, match="payload"):
        read_array(tmp_path / "v.json")


def test_bad_magic_rejected(tmp_path):
    (tmp_path / "v.json").write_text(json.dumps({"format": "nope"}))
    (tmp_path / "v.raw").write_bytes(b"")
    with pytest.raises(FileFormatError, match="format"):
        read_array(tmp_path / "v.json")


def test_unknown_dtype_rejected(tmp_path):
    header = {"format": "geoseg-volume", "version": 1, "shape": [2],
              "dtype": "float16", "spacing": [1.0], "byte_order": "little"}
    (tmp_path / "v.json").write_text(json.dumps(header))
    (tmp_path / "v.raw").write_bytes(b"\x00" * 4)
    with pytest.raises(FileFormatError, match="dtype"):
        read_array(tmp_path / "v.json")


def test_unsupported_write_dtype_rejected(tmp_path):
    with pytest.raises(FileFormatError):
        write_array(tmp_path / "v", np.zeros(3, dtype=np.int32), (1,))


# -- phantom generator ------------------------------------------------------------


def test_phantom_clean_settings_give_two_level_image():
    params = PhantomParams(noise_sigma=0.0, blur_sigma=0.0)
    image, mask = generate_phantom((32, 32), np.random.default_rng(3), params)
    levels = np.unique(image)
    assert len(levels) == 2
    threshold = params.bg_level + params.contrast / 2
    np.testing.assert_array_equal((image > threshold).astype(np.uint8), mask)


def test_phantom_fixed_seed_bit_identical():
    a_img, a_mask = generate_phantom((24, 24), np.random.default_rng(17))
    b_img, b_mask = generate_phantom((24, 24), np.random.default_rng(17))
    assert a_img.tobytes() == b_img.tobytes()
    assert a_mask.tobytes() == b_mask.tobytes()


def test_phantom_foreground_fraction_band():
    params = PhantomParams()
    lo, hi = params.fg_frac
    for i in range(100):
        _, mask = generate_phantom((32, 32), np.random.default_rng([99, i]),
                                   params)
        assert lo <= mask.mean() <= hi


def test_phantom_rejects_tiny_shapes():
    from geoseg.errors import ConfigError
    with pytest.raises(ConfigError):
        generate_phantom((8, 8), np.random.default_rng(0))


def test_phantom_mask_binary_3d():
    image, mask = generate_phantom((16, 16, 16), np.random.default_rng(5))
    assert set(np.unique(mask)) <= {0, 1}
    assert image.shape == mask.shape == (16, 16, 16)


# -- dataset builder ---------------------------------------------------------------


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    manifest = build_dataset(out, n_labeled=4, n_unlabeled=6, n_test=3,
                             shape=(32, 32), seed=123)
    return out, manifest


def test_dataset_counts_and_tags(dataset):
    _, manifest = dataset
    assert len(manifest.records) == 13
    by_split = {}
    for r in manifest.records:
        by_split.setdefault(r.split, []).append(r)
    assert len(by_split["labeled-train"]) == 4
    assert len(by_split["unlabeled-train"]) == 6
    assert len(by_split["test"]) == 3


def test_dataset_split_disjoint_case_ids(dataset):
    _, manifest = dataset
    ids = [r.case_id for r in manifest.records]
    assert len(ids) == len(set(ids))


def test_unlabeled_records_expose_no_mask(dataset):
    out, manifest = dataset
    split = load_split(manifest)
    assert all(r.mask is None for r in split.unlabeled)
    assert all(r.mask is not None for r in split.labeled + split.test)
    # manifest itself never references the audit sidecar
    text = (out / "manifest.json").read_text()
    assert "audit" not in text


def test_unlabeled_masks_sealed_in_audit_sidecar(dataset):
    out, manifest = dataset
    unlabeled = [r for r in manifest.records if r.split == "unlabeled-train"]
    assert all(r.mask is None for r in unlabeled)
    for r in unlabeled:
        assert (out / "audit" / f"{r.case_id}.mask.raw").exists()


def test_rebuild_same_seed_identical_digests(tmp_path, dataset):
    _, manifest = dataset
    again = build_dataset(tmp_path / "rebuild", n_labeled=4, n_unlabeled=6,
                          n_test=3, shape=(32, 32), seed=123)
    assert again.digests == manifest.digests


def test_manifest_verification_catches_corruption(tmp_path):
    build_dataset(tmp_path, n_labeled=1, n_unlabeled=1, n_test=1,
                  shape=(16, 16), seed=7)
    victim = next((tmp_path / "volumes").glob("*.image.raw"))
    blob = bytearray(victim.read_bytes())
    blob[0] ^= 0xFF
    victim.write_bytes(bytes(blob))
    with pytest.raises(DataError, match="digest"):
        load_manifest(tmp_path)


def test_ten_percent_labeled_regime_shape(tmp_path):
    manifest = build_dataset(tmp_path, n_labeled=4, n_unlabeled=36, n_test=10,
                             shape=(16, 16), seed=1,
                             params=PhantomParams(max_objects=1))
    assert manifest.counts == {"labeled": 4, "unlabeled": 36, "test": 10}
    assert len(manifest.records) == 50
