import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csmlab.errors import (ConfigurationError, ExtentMismatchError, MalformedHeaderError,
                           TruncatedPayloadError, UsageError, VolumeIOError)
from csmlab.phantom import PhantomSpec, SeriesTransform, gen_dataset, gen_phantom
from csmlab.volumes import (LabeledExample, MultiSeriesVolume, drop_series, flip_and_crop,
                            grid_coord, load_dataset, load_volume, normalize_series, patchify,
                            save_dataset, save_volume, token_index, unpatchify, unpatchify_array)


def random_volume(rng, s=3, extents=(8, 8, 8), presence=None):
    data = rng.normal(size=(s, *extents)).astype(np.float32)
    presence = presence or (True,) * s
    for j, p in enumerate(presence):
        if not p:
            data[j] = 0.0
    return MultiSeriesVolume(data, presence, "subj", tuple(f"s{j}" for j in range(s)))


# ---------------------------------------------------------------------------
# tokenization
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("edge,expected", [(96, 216), (48, 27)])
def test_patch_counts(edge, expected):
    vol = MultiSeriesVolume(np.zeros((1, edge, edge, edge), np.float32), (True,))
    grid = patchify(vol, 16)
    assert grid.tokens.shape == (1, expected, 4096)
    assert grid.grid_dims == ((edge // 16),) * 3


@settings(max_examples=30, deadline=None)
@given(s=st.integers(1, 3), dims=st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3)),
       p=st.integers(1, 4), seed=st.integers(0, 2**31))
def test_patchify_round_trip(s, dims, p, seed):
    rng = np.random.default_rng(seed)
    vol = random_volume(rng, s, tuple(d * p for d in dims))
    back = unpatchify(patchify(vol, p))
    np.testing.assert_array_equal(back.data, vol.data)
    # bijection: same multiset of voxel values
    np.testing.assert_array_equal(np.sort(patchify(vol, p).tokens.ravel()),
                                  np.sort(vol.data.ravel()))


def test_unpatchify_zeros():
    out = unpatchify_array(np.zeros((2, 8, 27)), (2, 2, 2), 3)
    assert out.shape == (2, 6, 6, 6) and not out.any()


def test_one_hot_token_probe():
    p = 4
    tokens = np.zeros((1, 27, p ** 3))
    tokens[0, token_index((1, 0, 0), (3, 3, 3))] = 1.0
    vol = unpatchify_array(tokens, (3, 3, 3), p)
    expect = np.zeros((12, 12, 12))
    expect[p:2 * p, 0:p, 0:p] = 1.0
    np.testing.assert_array_equal(vol[0], expect)


@settings(max_examples=40, deadline=None)
@given(dims=st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)),
       data=st.data())
def test_token_order_is_lexicographic(dims, data):
    p = 2
    z = data.draw(st.integers(0, dims[0] - 1))
    y = data.draw(st.integers(0, dims[1] - 1))
    x = data.draw(st.integers(0, dims[2] - 1))
    vol = np.zeros((1, *(d * p for d in dims)))
    vol[0, z * p:(z + 1) * p, y * p:(y + 1) * p, x * p:(x + 1) * p] = 1.0
    tokens = patchify(vol, p).tokens[0]
    hot = np.flatnonzero(tokens.sum(axis=1))
    assert hot.tolist() == [(z * dims[1] + y) * dims[2] + x]
    assert grid_coord(int(hot[0]), dims) == (z, y, x)


def test_patchify_indivisible():
    vol = MultiSeriesVolume(np.zeros((1, 10, 8, 8), np.float32), (True,))
    with pytest.raises(ConfigurationError):
        patchify(vol, 4)


def test_unpatchify_inconsistent_shape():
    with pytest.raises(UsageError):
        unpatchify_array(np.zeros((1, 7, 8)), (2, 2, 2), 2)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def test_normalize_series(rng):
    vol = random_volume(rng, 3, presence=(True, False, True))
    vol = MultiSeriesVolume(vol.data * 5 + 2, vol.presence)
    out = normalize_series(vol)
    for j in (0, 2):
        assert abs(out.data[j].mean()) < 1e-5
        assert abs(out.data[j].std() - 1) < 1e-4
    assert not out.data[1].any()


def test_drop_series(rng):
    out = drop_series(random_volume(rng), [1])
    assert out.presence == (True, False, True) and not out.data[1].any()


def test_flip_is_shared_across_series(rng):
    base = rng.normal(size=(6, 6, 6)).astype(np.float32)
    vol = MultiSeriesVolume(np.stack([base, 2 * base]), (True, True))
    for seed in range(10):
        out = flip_and_crop(vol, np.random.default_rng(seed), crop=(4, 4, 4))
        assert out.extents == (4, 4, 4)
        np.testing.assert_array_equal(out.data[1], 2 * out.data[0])


def test_flip_moves_mask_with_volume(rng):
    data = rng.normal(size=(1, 4, 4, 4)).astype(np.float32)
    mask = (data[0] > 0).astype(np.uint8)
    for seed in range(8):
        vol, m = flip_and_crop(MultiSeriesVolume(data, (True,)), np.random.default_rng(seed),
                               mask=mask)
        np.testing.assert_array_equal(m, (vol.data[0] > 0).astype(np.uint8))


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------


def test_save_load_round_trip(rng, tmp_path):
    vol = random_volume(rng, 3, (4, 6, 8))
    save_volume(vol, tmp_path / "v.vol")
    back = load_volume(tmp_path / "v.vol")
    np.testing.assert_array_equal(back.data, vol.data)
    assert back.presence == vol.presence
    assert back.series_names == vol.series_names
    assert back.subject_id == vol.subject_id


def test_presence_flags_preserved(rng, tmp_path):
    vol = random_volume(rng, 3, presence=(True, False, True))
    save_volume(vol, tmp_path / "v.vol")
    back = load_volume(tmp_path / "v.vol")
    assert back.presence == (True, False, True)
    assert not back.data[1].any()


def _rewrite_header(path, fn):
    blob = path.read_bytes()
    (hlen,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12:12 + hlen])
    fn(header)
    h = json.dumps(header).encode()
    path.write_bytes(blob[:8] + struct.pack("<I", len(h)) + h + blob[12 + hlen:])


def test_truncated_payload(rng, tmp_path):
    path = tmp_path / "v.vol"
    save_volume(random_volume(rng, 2), path)

    def three(h):
        h["series_count"] = 3
        h["presence"] = [True] * 3
        h["series_names"] = ["a", "b", "c"]

    _rewrite_header(path, three)
    with pytest.raises(TruncatedPayloadError):
        load_volume(path)


def test_extent_mismatch(rng, tmp_path):
    path = tmp_path / "v.vol"
    save_volume(random_volume(rng, 1, (4, 4, 4)), path)
    _rewrite_header(path, lambda h: h.update(extents=[4, 4, 2]))
    with pytest.raises(ExtentMismatchError):
        load_volume(path)


def test_malformed_header(rng, tmp_path):
    path = tmp_path / "v.vol"
    save_volume(random_volume(rng, 1, (2, 2, 2)), path)
    blob = bytearray(path.read_bytes())
    blob[12] = ord("#")
    path.write_bytes(bytes(blob))
    with pytest.raises(MalformedHeaderError):
        load_volume(path)
    path.write_bytes(b"NOTAVOL!" + bytes(blob[8:]))
    with pytest.raises(MalformedHeaderError):
        load_volume(path)


def test_io_errors_are_distinct():
    kinds = {MalformedHeaderError, ExtentMismatchError, TruncatedPayloadError}
    assert all(issubclass(k, VolumeIOError) for k in kinds)
    assert not issubclass(TruncatedPayloadError, ExtentMismatchError)


def test_dataset_round_trip(tmp_path, tiny_phantom_spec):
    ds = gen_dataset(tiny_phantom_spec, 10, seed=3, label_kind="mask")
    manifest = save_dataset(ds, tmp_path / "ds")
    back = load_dataset(manifest, normalize=False)
    assert back.label_kind == "mask"
    assert back.splits == ds.splits
    for a, b in zip(ds.examples, back.examples):
        np.testing.assert_array_equal(a.volume.data, b.volume.data)
        np.testing.assert_array_equal(a.mask, b.mask)


# ---------------------------------------------------------------------------
# labeled examples and phantoms
# ---------------------------------------------------------------------------


def test_labeled_example_needs_one_label(rng):
    vol = random_volume(rng, 1, (2, 2, 2))
    with pytest.raises(UsageError):
        LabeledExample(vol)
    with pytest.raises(UsageError):
        LabeledExample(vol, label=1, mask=np.zeros((2, 2, 2)))
    with pytest.raises(UsageError):
        LabeledExample(vol, mask=np.full((2, 2, 2), 2))


def test_phantom_linear_series_relation():
    spec = PhantomSpec(extents=(8, 8, 8), patch_edge=4,
                       series=(SeriesTransform(1.0, 0.0, "identity", 0.0),
                               SeriesTransform(2.0, 0.0, "identity", 0.0)))
    ex = gen_phantom(spec, 5)
    np.testing.assert_array_equal(ex.volume.data[1], 2 * ex.volume.data[0])


def test_phantom_deterministic(small_spec):
    a, b = gen_phantom(small_spec, (4, 2)), gen_phantom(small_spec, (4, 2))
    np.testing.assert_array_equal(a.volume.data, b.volume.data)
    assert a.label == b.label


def test_phantom_class_balance(small_spec):
    labels = [gen_phantom(small_spec, (11, i)).label for i in range(200)]
    assert 0.4 <= np.mean(labels) <= 0.6


def test_phantom_segmentation_label(small_spec):
    ex = gen_phantom(small_spec, 1, label_kind="mask")
    assert ex.mask.shape == small_spec.extents
    assert 0 < ex.mask.sum() < ex.mask.size


def test_phantom_noise_monotone():
    """Oracle cross-series error (known transform, noisy input) grows with sigma."""
    errs = []
    for sigma in (0.0, 0.05, 0.1, 0.2):
        spec = PhantomSpec(extents=(16, 16, 16), patch_edge=8,
                           series=(SeriesTransform(1.0, 0.0, "identity", sigma),
                                   SeriesTransform(1.5, -0.2, "identity", sigma)))
        mse = [np.mean((1.5 * ex.volume.data[0] - 0.2 - ex.volume.data[1]) ** 2)
               for ex in (gen_phantom(spec, (2, i)) for i in range(5))]
        errs.append(np.mean(mse))
    assert errs[0] < 1e-10
    assert all(a < b for a, b in zip(errs, errs[1:]))


def test_phantom_spec_validation():
    with pytest.raises(ConfigurationError):
        PhantomSpec(extents=(10, 10, 10), patch_edge=4).validate()
    with pytest.raises(ConfigurationError):
        PhantomSpec(series=(SeriesTransform(noise=-1.0),)).validate()
    with pytest.raises(ConfigurationError):
        PhantomSpec(class_rule="nope").validate()


def test_gen_dataset_split(small_spec):
    ds = gen_dataset(small_spec, 20, seed=0)
    counts = {k: sum(v == k for v in ds.splits.values()) for k in ("train", "val", "test")}
    assert counts == {"train": 16, "val": 2, "test": 2}
