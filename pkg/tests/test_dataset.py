import struct
import warnings

import numpy as np
import pytest

from talign import dataset as ds
from talign import geometry as geo
from talign.errors import FormatError


def _two_tooth_sample():
    points = np.zeros((32, 128, 3))
    validity = np.zeros(32, dtype=bool)
    validity[[3, 17]] = True
    points[3] = np.arange(384, dtype=np.float64).reshape(128, 3) / 8
    points[17] = -points[3]
    target = ds.identity_transforms()
    target[3] = geo.translation([1.0, 2.0, 3.0])
    return ds.Sample(ds.Dentition(points, validity), target, id="hand")


def test_round_trip_bitwise(synthetic):
    samples, _ = synthetic
    for s in samples:
        back = ds.decode_sample(ds.encode_sample(s), sample_id=s.id)
        assert np.array_equal(back.input.points, s.input.points)
        assert np.array_equal(back.validity, s.validity)
        assert np.array_equal(back.target, s.target)
        assert ds.encode_sample(back) == ds.encode_sample(s)


def test_header_layout_by_bytes():
    blob = ds.encode_sample(_two_tooth_sample())
    assert blob[:4] == b"TALD"
    version, m, p = struct.unpack_from("<III", blob, 4)
    assert (version, m, p) == (1, 32, 128)
    validity = blob[16:48]
    assert [i for i, v in enumerate(validity) if v] == [3, 17]
    assert set(validity) <= {0, 1}
    assert len(blob) == 16 + 32 + 32 * 128 * 3 * 4 + 32 * 16 * 4
    # tooth-major, point-major xyz: tooth 3 point 1 is (3/8, 4/8, 5/8)
    off = 48 + (3 * 128 + 1) * 12
    assert struct.unpack_from("<3f", blob, off) == (0.375, 0.5, 0.625)
    # row-major 4x4: displacement of tooth 3 sits at flat indices 3, 7, 11
    t3 = struct.unpack_from("<16f", blob, 48 + 32 * 128 * 12 + 3 * 64)
    assert (t3[3], t3[7], t3[11], t3[15]) == (1.0, 2.0, 3.0, 1.0)


@pytest.mark.parametrize("cut", [0, 10, 16, 47, 5000, -1])
def test_truncation_is_reported(cut):
    blob = ds.encode_sample(_two_tooth_sample())
    with pytest.raises(FormatError, match="offset"):
        ds.decode_sample(blob[:cut])


def test_bad_magic_and_version():
    blob = bytearray(ds.encode_sample(_two_tooth_sample()))
    bad = bytes(b"XALD" + blob[4:])
    with pytest.raises(FormatError, match="magic"):
        ds.decode_sample(bad)
    blob[4] = 2
    with pytest.raises(FormatError, match="version"):
        ds.decode_sample(bytes(blob))


def test_generator_is_deterministic():
    a = ds.generate_synthetic(3, seed=11)
    b = ds.generate_synthetic(3, seed=11)
    assert [ds.encode_sample(s) for s in a] == [ds.encode_sample(s) for s in b]
    c = ds.generate_synthetic(3, seed=12)
    assert ds.encode_sample(a[0]) != ds.encode_sample(c[0])


def test_generator_zero_perturbation_gives_identity():
    cfg = ds.GeneratorConfig(perturb_angle=0.0, perturb_shift=0.0)
    for s in ds.generate_synthetic(2, seed=3, config=cfg):
        assert np.array_equal(s.target, ds.identity_transforms())


def test_generator_targets_restore_ideal_arch(synthetic):
    samples, ideals = synthetic
    for s, ideal in zip(samples, ideals):
        v = s.validity
        assert np.max(np.abs(s.aligned_points()[v] - ideal[v])) < 1e-5


def test_generator_shapes_and_masking(synthetic):
    samples, _ = synthetic
    for s in samples:
        assert s.input.points.shape == (32, 128, 3)
        assert s.target.shape == (32, 4, 4)
        assert np.all(s.input.points[~s.validity] == 0)
        assert np.array_equal(s.target[~s.validity], ds.identity_transforms()[~s.validity])
    frac_invalid = np.mean([~s.validity for s in ds.generate_synthetic(60, seed=5)])
    assert 0.02 < frac_invalid < 0.09


def test_augment_zero_angle_is_noop(synthetic, rng):
    s = synthetic[0][0]
    cfg = ds.AugmentConfig(max_angle=0.0)
    out = ds.augment_multi_rotation(s, cfg, rng)
    assert np.allclose(out.input.points, s.input.points, atol=1e-12)
    assert np.allclose(out.target, s.target, atol=1e-12)
    out = ds.augment_single_translation(s, ds.AugmentConfig(max_shift=0.0), rng)
    assert np.array_equal(out.input.points, s.input.points)
    assert np.array_equal(out.target, s.target)


def _consistency_gap(before, after):
    v = before.validity
    return np.max(np.abs(after.aligned_points()[v] - before.aligned_points()[v]))


def test_multi_rotation_label_consistency_and_count(synthetic, rng):
    cfg = ds.AugmentConfig()
    for s in synthetic[0]:
        out = ds.augment_multi_rotation(s, cfg, rng)
        assert _consistency_gap(s, out) <= 1e-5
        moved = np.any(np.abs(out.input.points - s.input.points) > 1e-9, axis=(1, 2))
        assert 5 <= moved.sum() <= 10
        assert not np.any(moved & ~s.validity)
        # rotation is about each tooth's own centroid
        assert np.allclose(out.input.points.mean(1), s.input.points.mean(1), atol=1e-9)


def test_single_translation_moves_exactly_one_tooth(synthetic, rng):
    for s in synthetic[0]:
        out = ds.augment_single_translation(s, ds.AugmentConfig(), rng)
        assert _consistency_gap(s, out) <= 1e-5
        shift = out.input.points.mean(1) - s.input.points.mean(1)
        moved = np.linalg.norm(shift, axis=1) > 0
        assert moved.sum() == 1
        assert np.all(np.abs(shift[moved]) <= 2.0)


def test_multi_rotation_skips_sparse_dentitions(rng):
    s = _two_tooth_sample()
    with pytest.warns(ds.AugmentationSkipped):
        out = ds.augment_multi_rotation(s, ds.AugmentConfig(), rng)
    assert out is s


def test_augment_config_validation():
    with pytest.raises(ValueError):
        ds.AugmentConfig(k_min=6, k_max=5)
    with pytest.raises(ValueError):
        ds.AugmentConfig(k_min=0)


def test_split_74_20_30_counts():
    samples = list(range(124))
    train, val, test = ds.split_dataset(samples, ds.SplitSpec((74, 20, 30)), seed=0)
    assert (len(train), len(val), len(test)) == (74, 20, 30)


def test_split_all_train_and_partition():
    samples = list(range(37))
    assert ds.split_dataset(samples, ds.SplitSpec((1, 0, 0)), seed=1)[0] == ds.split_dataset(samples, ds.SplitSpec((1, 0, 0)), seed=1)[0]
    train, val, test = ds.split_dataset(samples, ds.SplitSpec((1, 0, 0)), seed=1)
    assert len(train) == 37 and not val and not test
    train, val, test = ds.split_dataset(samples, ds.SplitSpec((3, 1, 1)), seed=4)
    assert sorted(train + val + test) == samples
    assert not (set(train) & set(val) or set(train) & set(test) or set(val) & set(test))
    assert ds.split_dataset(samples, ds.SplitSpec((3, 1, 1)), seed=4) == (train, val, test)


def test_split_spec_validation():
    with pytest.raises(ValueError):
        ds.SplitSpec((0, 0, 0))
    with pytest.raises(ValueError):
        ds.SplitSpec((1, -1, 0))


def test_dataset_directory_round_trip(tmp_path):
    samples = ds.generate_synthetic(10, seed=2)
    manifest = ds.save_dataset(tmp_path, samples, ds.SplitSpec((6, 2, 2)), seed=3)
    assert sorted(len(manifest.ids(n)) for n in ds.SPLIT_NAMES) == [2, 2, 6]
    by_id = {s.id: s for s in samples}
    for name in ds.SPLIT_NAMES:
        for s in ds.load_split(tmp_path, name):
            assert ds.encode_sample(s) == ds.encode_sample(by_id[s.id])
