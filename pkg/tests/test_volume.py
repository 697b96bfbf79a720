import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from asmunet.synthetic import DuctSpec, generate
from asmunet.volume import (AugmentParams, DegenerateInputError, LabelVolume, PatchSpec,
                            SvolFormatError, SvolTruncatedError, Volume3D, augment,
                            extract_patch, flip, read_svol, resample, sample_patch_spec,
                            write_svol, zscore_normalize)


def _rand_vol(rng, dims=(4, 4, 4), spacing=(1.0, 1.0, 1.0)):
    return Volume3D(rng.normal(size=dims).astype(np.float32), spacing)


# ---------------------------------------------------------------- SVOL


def test_svol_roundtrip_float_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    v = _rand_vol(rng, spacing=(0.5, 1.0, 2.5))
    write_svol(tmp_path / "a.svol", v)
    w = read_svol(tmp_path / "a.svol")
    assert isinstance(w, Volume3D)
    assert w.data.tobytes() == v.data.tobytes()
    assert w.spacing == v.spacing


def test_svol_roundtrip_labels(tmp_path):
    lbl = LabelVolume(np.arange(60).reshape(3, 4, 5) % 9, (1.0, 2.0, 3.0))
    write_svol(tmp_path / "l.svol", lbl)
    back = read_svol(tmp_path / "l.svol")
    assert isinstance(back, LabelVolume)
    assert np.array_equal(back.data, lbl.data)


def test_svol_payload_is_w_fastest(tmp_path):
    data = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    write_svol(tmp_path / "o.svol", Volume3D(data))
    raw = (tmp_path / "o.svol").read_bytes()
    header = struct.calcsize("<4sBIIIB3f")
    payload = np.frombuffer(raw[header:], "<f4")
    # element index = w + W*(h + H*d)
    assert payload[1] == data[1, 0, 0]
    assert payload[2] == data[0, 1, 0]
    assert payload[6] == data[0, 0, 1]
    magic, version, w, h, d, code, *_ = struct.unpack_from("<4sBIIIB3f", raw)
    assert (magic, version, w, h, d, code) == (b"SVOL", 1, 2, 3, 4, 0)


def test_svol_bad_magic(tmp_path):
    p = tmp_path / "x.svol"
    write_svol(p, _rand_vol(np.random.default_rng(1)))
    raw = bytearray(p.read_bytes())
    raw[:4] = b"XXXX"
    p.write_bytes(bytes(raw))
    with pytest.raises(SvolFormatError):
        read_svol(p)


def test_svol_truncated(tmp_path):
    p = tmp_path / "t.svol"
    write_svol(p, _rand_vol(np.random.default_rng(2)))
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(SvolTruncatedError):
        read_svol(p)


def test_svol_unknown_dtype(tmp_path):
    p = tmp_path / "d.svol"
    write_svol(p, _rand_vol(np.random.default_rng(3)))
    raw = bytearray(p.read_bytes())
    raw[17] = 7  # dtype byte follows magic(4) + version(1) + 3*u32
    p.write_bytes(bytes(raw))
    with pytest.raises(SvolFormatError):
        read_svol(p)


@settings(max_examples=25, deadline=None)
@given(dims=st.tuples(*[st.integers(1, 6)] * 3), seed=st.integers(0, 2 ** 32 - 1))
def test_svol_roundtrip_property(tmp_path_factory, dims, seed):
    rng = np.random.default_rng(seed)
    v = Volume3D(rng.normal(size=dims), tuple(rng.uniform(0.1, 3.0, 3)))
    p = tmp_path_factory.mktemp("svol") / "v.svol"
    write_svol(p, v)
    w = read_svol(p)
    assert w.data.tobytes() == v.data.tobytes()
    assert np.array_equal(np.float32(w.spacing), np.float32(v.spacing))


def test_volume_rejects_nonpositive_spacing():
    with pytest.raises(ValueError):
        Volume3D(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))


def test_label_volume_rejects_out_of_range():
    with pytest.raises(ValueError):
        LabelVolume(np.full((2, 2, 2), 9), n_classes=9)


# ---------------------------------------------------------------- resample


def test_resample_identity():
    v = _rand_vol(np.random.default_rng(4))
    r = resample(v, v.spacing)
    assert np.array_equal(r.data, v.data)


def test_resample_doubles_w_when_halving_spacing():
    v = Volume3D(np.zeros((5, 4, 3)), (2.0, 1.0, 1.0))
    assert resample(v, (1.0, 1.0, 1.0)).dims == (10, 4, 3)


def test_resample_dims_min_one():
    v = Volume3D(np.zeros((1, 2, 2)), (1.0, 1.0, 1.0))
    assert resample(v, (5.0, 1.0, 1.0)).dims == (1, 2, 2)


def test_resample_rejects_bad_spacing():
    with pytest.raises(ValueError):
        resample(Volume3D(np.zeros((2, 2, 2))), (1.0, -1.0, 1.0))


def test_resample_ramp_compose_and_compare():
    # 2x upsample then 0.5x downsample on a linear ramp; compare interior voxels
    i, j, k = np.meshgrid(*[np.arange(8.0)] * 3, indexing="ij")
    ramp = Volume3D((i + 2 * j + 3 * k) / 8.0, (1.0, 1.0, 1.0))
    up = resample(ramp, (0.5, 0.5, 0.5))
    assert up.dims == (16, 16, 16)
    back = resample(up, (1.0, 1.0, 1.0))
    assert back.dims == ramp.dims
    inner = (slice(1, -1),) * 3
    assert np.abs(back.data[inner] - ramp.data[inner]).max() <= 1e-6


@settings(max_examples=20, deadline=None)
@given(c=st.floats(-100, 100), sp=st.tuples(*[st.sampled_from([0.5, 1.0, 1.5, 2.0])] * 3))
def test_resample_exact_on_constants(c, sp):
    v = Volume3D(np.full((4, 5, 3), c), (1.0, 1.0, 1.0))
    out = resample(v, sp)
    assert np.all(out.data == np.float32(c))
    lbl = LabelVolume(np.full((4, 5, 3), 3), (1.0, 1.0, 1.0))
    assert np.all(resample(lbl, sp).data == 3)


def test_resample_labels_nearest_keeps_label_set():
    rng = np.random.default_rng(5)
    lbl = LabelVolume(rng.integers(0, 4, (6, 6, 6)), (1.0, 1.0, 1.0))
    out = resample(lbl, (0.7, 1.3, 0.9))
    assert set(np.unique(out.data)) <= set(np.unique(lbl.data))


# ---------------------------------------------------------------- z-score


def test_zscore_two_point():
    data = np.zeros((2, 1, 1))
    data[0, 0, 0], data[1, 0, 0] = 1.0, 3.0
    mask = LabelVolume(np.ones((2, 1, 1)))
    out = zscore_normalize(Volume3D(data), mask)
    assert np.allclose(out.data.ravel(), [-1.0, 1.0])


def test_zscore_constant_foreground_errors():
    with pytest.raises(DegenerateInputError):
        zscore_normalize(Volume3D(np.full((3, 3, 3), 2.0)), LabelVolume(np.ones((3, 3, 3))))


def test_zscore_random_recomputed_stats():
    rng = np.random.default_rng(6)
    v = Volume3D(rng.normal(3.0, 2.0, (6, 6, 6)))
    mask = LabelVolume(rng.integers(0, 2, (6, 6, 6)))
    out = zscore_normalize(v, mask).data[mask.data > 0].astype(np.float64)
    assert abs(out.mean()) < 1e-5
    assert abs(out.std() - 1.0) < 1e-5


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_zscore_idempotent(seed):
    rng = np.random.default_rng(seed)
    v = Volume3D(rng.normal(rng.uniform(-5, 5), rng.uniform(0.5, 4), (5, 5, 5)))
    mask = LabelVolume((rng.random((5, 5, 5)) < 0.4).astype(np.uint8))
    if (mask.data > 0).sum() < 2:
        mask.data[0, 0, :2] = 1
    once = zscore_normalize(v, mask)
    twice = zscore_normalize(once, mask)
    fg = mask.data > 0
    assert np.abs(once.data[fg] - twice.data[fg]).max() < 1e-5


# ---------------------------------------------------------------- patches


def test_extract_full_volume_identity():
    rng = np.random.default_rng(7)
    v = _rand_vol(rng, (4, 5, 3))
    lbl = LabelVolume(rng.integers(0, 3, (4, 5, 3)))
    img, l2 = extract_patch(v, lbl, PatchSpec((0, 0, 0), (4, 5, 3)))
    assert np.array_equal(img.data, v.data) and np.array_equal(l2.data, lbl.data)


def test_extract_corner_with_padding():
    rng = np.random.default_rng(8)
    v = _rand_vol(rng, (3, 3, 3))
    lbl = LabelVolume(np.full((3, 3, 3), 2))
    img, l2 = extract_patch(v, lbl, PatchSpec((-1, -1, -1), (2, 2, 2)))
    expected = np.zeros((2, 2, 2), np.float32)
    expected[1, 1, 1] = v.data[0, 0, 0]
    assert np.array_equal(img.data, expected)
    assert l2.data.sum() == 2 and l2.data[1, 1, 1] == 2


def test_patch_spec_rejects_nonpositive_size():
    with pytest.raises(ValueError):
        PatchSpec((0, 0, 0), (0, 2, 2))


def test_foreground_biased_sampling_counts():
    _, lbl = generate(DuctSpec(1, (24, 24, 24), rng_seed=3))
    rng = np.random.default_rng(0)
    hits = 0
    for _ in range(1000):
        spec = sample_patch_spec(lbl, (8, 8, 8), rng, foreground_prob=0.5)
        _, patch = extract_patch(Volume3D(np.zeros(lbl.dims)), lbl, spec)
        hits += bool((patch.data > 0).any())
    assert hits >= 450


# ---------------------------------------------------------------- augmentation


def _pair(seed, dims=(10, 9, 8)):
    rng = np.random.default_rng(seed)
    return _rand_vol(rng, dims), LabelVolume(rng.integers(0, 5, dims))


def test_augment_deterministic():
    v, lbl = _pair(0)
    a = augment(v, lbl, 123)
    b = augment(v, lbl, 123)
    assert a[0].data.tobytes() == b[0].data.tobytes()
    assert a[1].data.tobytes() == b[1].data.tobytes()


def test_flip_involution():
    v, _ = _pair(1)
    for ax in range(3):
        assert np.array_equal(flip(flip(v.data, ax), ax), v.data)


def test_augment_label_set_closure_over_seeds():
    v, lbl = _pair(2)
    before = set(np.unique(lbl.data))
    for seed in range(20):
        _, out = augment(v, lbl, seed)
        assert set(np.unique(out.data)) <= before


def test_augment_identity_draws_is_identity():
    v, lbl = _pair(3)
    params = AugmentParams(flip_prob=0.0, max_angle_deg=0.0, scale_range=(1.0, 1.0))
    img, out = augment(v, lbl, 99, params)
    assert np.array_equal(img.data, v.data) and np.array_equal(out.data, lbl.data)


def test_augment_flip_only_matches_flip():
    v, lbl = _pair(4)
    params = AugmentParams(flip_prob=1.0, max_angle_deg=0.0, scale_range=(1.0, 1.0))
    img, out = augment(v, lbl, 5, params)
    assert np.array_equal(img.data, v.data[::-1, ::-1, ::-1])
    assert np.array_equal(out.data, lbl.data[::-1, ::-1, ::-1])


def test_augment_preserves_shape():
    v, lbl = _pair(5)
    for seed in range(5):
        img, out = augment(v, lbl, seed)
        assert img.dims == v.dims and out.dims == lbl.dims
