import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scan2num.data import (ManifestEntry, ScanLabels, SliceStack, Volume, augment, crop_to_mask_bbox,
                           load_volume, mask_bbox, mirror, normalize_hu, read_manifest, rotate,
                           sample_slices, save_volume, slice_indices, split_entries, stratified_split,
                           write_manifest)
from scan2num.errors import DataError


def make_volume(dims=(4, 4, 4), hu=-1000, seed=None):
    if seed is None:
        vox = np.full(dims, hu, np.int16)
    else:
        vox = np.random.default_rng(seed).integers(-1200, 400, size=dims).astype(np.int16)
    return Volume(vox, np.ones(dims, np.uint8), (1.0, 0.7, 0.7))


# ------------------------------------------------------------------- I/O

def test_volume_round_trip_bitwise(tmp_path):
    v = make_volume()
    path = tmp_path / "a.json"
    save_volume(path, v)
    back = load_volume(path)
    assert back.voxels.dtype == np.int16
    np.testing.assert_array_equal(back.voxels, v.voxels)
    np.testing.assert_array_equal(back.mask, v.mask)
    assert back.spacing_mm == v.spacing_mm
    header = json.loads(path.read_text())
    assert header["dtype"] == "int16le" and header["dims"] == [4, 4, 4]


def test_payload_size_mismatch(tmp_path):
    v = make_volume((2, 2, 2))
    path = tmp_path / "b.json"
    save_volume(path, v)
    raw = (tmp_path / "b.i16").read_bytes()
    (tmp_path / "b.i16").write_bytes(raw[:14])   # 7 voxels
    with pytest.raises(DataError):
        load_volume(path)


def test_missing_mask_is_error(tmp_path):
    path = tmp_path / "c.json"
    save_volume(path, make_volume())
    (tmp_path / "c.mask").unlink()
    with pytest.raises(FileNotFoundError):
        load_volume(path)


def test_manifest_round_trip(tmp_path):
    entries = [ManifestEntry(str(tmp_path / f"c{i}.json"), str(tmp_path / f"c{i}.mask"),
                             ScanLabels(float(i), 0.1 * i + 0.3, 80.0 + i), s)
               for i, s in enumerate(["train", "valid", "test"])]
    path = tmp_path / "m.csv"
    write_manifest(path, entries)
    back = read_manifest(path)
    assert [(e.path, e.mask, e.labels, e.split) for e in back] == \
           [(e.path, e.mask, e.labels, e.split) for e in entries]
    assert path.read_text().splitlines()[0] == "path,mask,ve,fev1_fvc,fev1pct,split"
    assert [e.case_id for e in split_entries(back, "test")] == ["c2"]


def test_manifest_bad_split(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("path,mask,ve,fev1_fvc,fev1pct,split\na.json,a.mask,1,0.5,80,holdout\n")
    with pytest.raises(DataError):
        read_manifest(path)


# ------------------------------------------------------------------ crop

def brute_bbox(mask):
    hits = np.argwhere(mask)
    return [(int(hits[:, a].min()), int(hits[:, a].max()) + 1) for a in range(3)]


def test_crop_examples():
    v = make_volume((5, 6, 7), seed=0)
    assert crop_to_mask_bbox(v).dims == v.dims
    mask = np.zeros((8, 8, 8), np.uint8)
    mask[3, 4, 5] = 1
    c = crop_to_mask_bbox(Volume(np.zeros((8, 8, 8), np.int16), mask))
    assert c.dims == (1, 1, 1) and c.origin == (3, 4, 5)
    with pytest.raises(DataError):
        crop_to_mask_bbox(Volume(np.zeros((2, 2, 2), np.int16), np.zeros((2, 2, 2), np.uint8)))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), density=st.floats(0.001, 0.2))
def test_bbox_matches_scan_and_is_idempotent(seed, density):
    rng = np.random.default_rng(seed)
    mask = (rng.random((9, 7, 8)) < density).astype(np.uint8)
    if not mask.any():
        mask[rng.integers(9), rng.integers(7), rng.integers(8)] = 1
    assert mask_bbox(mask) == brute_bbox(mask)
    v = Volume(rng.integers(-1000, 0, mask.shape).astype(np.int16), mask)
    once = crop_to_mask_bbox(v)
    twice = crop_to_mask_bbox(once)
    np.testing.assert_array_equal(once.voxels, twice.voxels)
    assert once.origin == twice.origin


# ------------------------------------------------------------- normalize

def test_normalize_examples():
    np.testing.assert_allclose(normalize_hu(np.array([-1100, 300, -400, -950])),
                               [-1.0, 1.0, 0.0, -0.7857142857], atol=1e-6)


def test_normalize_monotone_and_bounded_over_int16():
    hu = np.arange(-32768, 32768, dtype=np.int64)
    out = normalize_hu(hu)
    assert out.min() >= -1 and out.max() <= 1
    assert np.all(np.diff(out) >= 0)


# -------------------------------------------------------------- sampling

def test_slice_indices_examples():
    np.testing.assert_array_equal(slice_indices(16, 16, 0.5), np.arange(16))
    np.testing.assert_array_equal(slice_indices(160, 16, 0.5), np.arange(5, 160, 10))
    idx = slice_indices(3, 16, 0.5)
    assert set(idx) <= {0, 1, 2} and len(idx) == 16


@settings(max_examples=50, deadline=None)
@given(depth=st.integers(1, 300), n=st.integers(1, 32), offset=st.floats(0, 0.999))
def test_slice_indices_valid_and_sorted(depth, n, offset):
    idx = slice_indices(depth, n, offset)
    assert idx.min() >= 0 and idx.max() <= depth - 1
    assert np.all(np.diff(idx) >= 0)


def test_sample_slices_shape_range_determinism():
    v = make_volume((20, 30, 25), seed=1)
    a = sample_slices(v, 5, 0.5, 64)
    b = sample_slices(v, 5, 0.5, 64)
    assert a.slices.shape == (5, 64, 64) and a.slices.dtype == np.float32
    assert a.slices.min() >= -1 and a.slices.max() <= 1
    np.testing.assert_array_equal(a.slices, b.slices)
    np.testing.assert_array_equal(a.source_indices, slice_indices(20, 5, 0.5))


def test_sample_slices_corner_aligned():
    vox = np.zeros((1, 2, 2), np.int16)
    vox[0] = [[-1100, 300], [300, -1100]]
    out = sample_slices(Volume(vox, np.ones_like(vox, np.uint8)), 1, 0.5, 3).slices[0]
    np.testing.assert_allclose(out[[0, 0, 2, 2], [0, 2, 0, 2]], [-1, 1, 1, -1], atol=1e-6)
    assert out[1, 1] == pytest.approx(0.0, abs=1e-6)


# ---------------------------------------------------------- augmentation

def disc(size=65, r=20):
    # soft edge so the pixel grid itself is (nearly) rotation invariant
    yy, xx = np.mgrid[:size, :size] - (size - 1) / 2
    rad = np.sqrt(yy ** 2 + xx ** 2)
    return (-0.25 + 0.75 * np.tanh((r - rad) / 2.0)).astype(np.float32)


def test_rotate_zero_is_identity_and_disc_invariant():
    img = np.random.default_rng(2).uniform(-1, 1, (2, 17, 17)).astype(np.float32)
    np.testing.assert_array_equal(rotate(img, [0.0, 0.0]), img)
    d = disc()[None]
    for angle in (13.0, 45.0, -30.0):
        assert np.abs(rotate(d, [angle]) - d).mean() < 1e-2


def test_rotate_quarter_turn_matches_rot90():
    # positive angles turn clockwise in (row, col) display
    img = np.random.default_rng(3).uniform(-1, 1, (1, 9, 9)).astype(np.float32)
    out = rotate(img, [90.0])
    np.testing.assert_allclose(out[0], np.rot90(img[0], k=-1), atol=1e-5)


def test_mirror_involution():
    img = np.random.default_rng(4).normal(size=(3, 5, 6)).astype(np.float32)
    np.testing.assert_array_equal(mirror(mirror(img)), img)


def test_augment_reproducible_and_shared_coin():
    img = np.random.default_rng(5).uniform(-1, 1, (4, 16, 16)).astype(np.float32)
    stack = SliceStack(img, np.arange(4))
    a = augment(stack, np.random.default_rng(9))
    b = augment(stack, np.random.default_rng(9))
    np.testing.assert_array_equal(a.slices, b.slices)
    # max angle 0 isolates the mirror coin: every slice flips or none do
    flips = set()
    for seed in range(20):
        out = augment(stack, np.random.default_rng(seed), max_angle_deg=0.0).slices
        same = [np.array_equal(out[i], img[i]) for i in range(4)]
        assert len(set(same)) == 1
        flips.add(same[0])
    assert flips == {True, False}
    forced = augment(stack, np.random.default_rng(0), mirror_prob=1.0, max_angle_deg=0.0)
    np.testing.assert_array_equal(mirror(forced.slices), img)


def test_rotation_fill_is_minus_one():
    img = np.ones((1, 11, 11), np.float32)
    out = rotate(img, [45.0])
    assert out[0, 0, 0] == -1.0 and out[0, 5, 5] == 1.0


# ----------------------------------------------------------------- split

def test_split_single_stratum():
    tags = stratified_split(list(range(100)), (0.8, 0.1, 0.1), lambda c: 0, np.random.default_rng(0))
    assert [tags.count(s) for s in ("train", "valid", "test")] == [80, 10, 10]


def test_split_two_strata_halves():
    cases = list(range(20))
    tags = stratified_split(cases, (0.5, 0.5), lambda c: c % 2, np.random.default_rng(1),
                            names=("a", "b"))
    for parity in (0, 1):
        sub = [t for c, t in zip(cases, tags) if c % 2 == parity]
        assert sub.count("a") == 5 and sub.count("b") == 5


def test_split_paper_sizes():
    rng = np.random.default_rng(2)
    strata = rng.integers(0, 5, 1788)
    tags = stratified_split(list(range(1788)), (1424 / 1789, 170 / 1789, 195 / 1789),
                            lambda c: int(strata[c]), rng)
    for name, want in zip(("train", "valid", "test"), (1424, 170, 195)):
        assert abs(tags.count(name) - want) <= 1


def test_split_reproducible_and_warns_on_empty_bin():
    cases = list(range(30))
    a = stratified_split(cases, (0.7, 0.15, 0.15), lambda c: c % 3, np.random.default_rng(3), bins=range(4))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        b = stratified_split(cases, (0.7, 0.15, 0.15), lambda c: c % 3, np.random.default_rng(3), bins=range(4))
    assert a == b
    assert any("empty" in str(w.message) for w in caught)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 200), k=st.integers(1, 6), seed=st.integers(0, 999))
def test_split_is_partition_with_exact_totals(n, k, seed):
    rng = np.random.default_rng(seed)
    strata = rng.integers(0, k, n)
    tags = stratified_split(list(range(n)), (0.7, 0.15, 0.15), lambda c: int(strata[c]), rng)
    assert len(tags) == n and set(tags) <= {"train", "valid", "test"}
    want = np.array([0.7, 0.15, 0.15]) * n
    got = [tags.count(s) for s in ("train", "valid", "test")]
    assert np.all(np.abs(np.array(got) - want) < 1)
