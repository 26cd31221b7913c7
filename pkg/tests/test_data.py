import os

import numpy as np
import pytest
from scipy import ndimage

from taskct import data
from taskct.ctsim import Geometry, NoiseModel, roi_mask
from taskct.errors import ConfigurationError, DataError
from taskct.evaluation import psnr_roi

GEO = Geometry(num_angles=12, num_detectors=91, image_size=64)
NOISE = NoiseModel(photon_count=300.0, rng_seed=0, mu_scale=0.1)


def small_dataset(tmp_path, name="ds", count=10, workers=1):
    out = str(tmp_path / name)
    manifest = data.build_dataset(
        source="phantom", count=count, geometry=GEO, noise=NOISE,
        split_ratio=0.8, seed=123, out_dir=out, workers=workers)
    return out, manifest


def test_phantom_is_deterministic():
    spec = data.PhantomSpec()
    img1, seg1 = data.generate_phantom(spec, seed=11)
    img2, seg2 = data.generate_phantom(spec, seed=11)
    img3, seg3 = data.generate_phantom(spec, seed=12)
    assert np.array_equal(img1, img2) and np.array_equal(seg1, seg2)
    assert not np.array_equal(img1, img3)


def test_phantom_anatomy_and_bands():
    spec = data.PhantomSpec()
    for seed in range(8):
        img, seg = data.generate_phantom(spec, seed=seed)
        assert img.shape == (64, 64) and seg.shape == (64, 64)
        assert seg.dtype == np.uint8
        assert img.min() >= 0.0 and img.max() <= 1.0
        assert set(np.unique(seg)) <= set(data.LABELS)
        liver, tumor = (seg == 1).sum(), (seg == 2).sum()
        assert tumor > 0
        assert liver > tumor
        lo, hi = spec.tumor_count_range
        comps = ndimage.label(seg == 2)[0].max()
        assert 1 <= comps <= hi
        # flat band value plus 0.02 texture: the per-region mean stays in band
        assert 0.06 < img[seg == 0].mean() < 0.18
        assert 0.41 < img[seg == 1].mean() < 0.51
        assert 0.52 < img[seg == 2].mean() < 0.64


def test_phantom_spec_validation():
    with pytest.raises(ConfigurationError):
        data.PhantomSpec(tumor_band=(0.30, 0.35))  # below the liver band
    with pytest.raises(ConfigurationError):
        data.PhantomSpec(liver_band=(0.4, 1.2))
    with pytest.raises(ConfigurationError):
        data.PhantomSpec(tumor_radius_range=(11.0, 13.0),
                         liver_semi_axis_b=(12.0, 14.0))
    spec = data.PhantomSpec()
    assert data.PhantomSpec.from_dict(spec.to_dict()) == spec


def test_sample_pair_invariants():
    ok = np.zeros((8, 8))
    with pytest.raises(DataError):
        data.SamplePair(ok, np.zeros((4, 4)), np.zeros((8, 8), np.uint8), "s")
    with pytest.raises(DataError):
        data.SamplePair(ok, np.full((8, 8), 1.5), np.zeros((8, 8), np.uint8), "s")
    with pytest.raises(DataError):
        data.SamplePair(ok, ok, np.full((8, 8), 7, np.uint8), "s")


def test_build_dataset_layout_and_split(tmp_path):
    out, manifest = small_dataset(tmp_path)
    assert len(manifest.sample_ids) == 10
    assert len(manifest.ids("train")) == 8
    assert len(manifest.ids("test")) == 2
    for sid in manifest.sample_ids:
        for suffix in (".low.f32", ".full.f32", ".seg.u8"):
            path = os.path.join(out, "samples", sid + suffix)
            assert os.path.exists(path)
            assert os.path.basename(path) in manifest.checksums
    with pytest.raises(ConfigurationError):
        manifest.ids("validation")


def test_build_dataset_is_byte_reproducible(tmp_path):
    out1, _ = small_dataset(tmp_path, "a")
    out2, _ = small_dataset(tmp_path, "b")
    names = sorted(os.listdir(os.path.join(out1, "samples")))
    assert names == sorted(os.listdir(os.path.join(out2, "samples")))
    for name in names + [os.path.join(os.pardir, "manifest.json")]:
        b1 = open(os.path.join(out1, "samples", name), "rb").read()
        b2 = open(os.path.join(out2, "samples", name), "rb").read()
        assert b1 == b2, name


def test_build_dataset_workers_do_not_change_bytes(tmp_path):
    out1, _ = small_dataset(tmp_path, "w1", count=6, workers=1)
    out2, _ = small_dataset(tmp_path, "w2", count=6, workers=2)
    m1 = open(os.path.join(out1, "manifest.json"), "rb").read()
    m2 = open(os.path.join(out2, "manifest.json"), "rb").read()
    assert m1 == m2


def test_low_dose_is_aligned_but_degraded(tmp_path):
    out, manifest = small_dataset(tmp_path, count=4)
    sample = next(data.load_split(out, "train"))
    mask = roi_mask(64, 32)
    p = psnr_roi(sample.low_dose, sample.full_dose, mask)
    assert 5.0 < p < 60.0  # same anatomy, visible noise
    rolled = np.roll(sample.low_dose, 3, axis=0)
    assert psnr_roi(rolled, sample.full_dose, mask) < p


def test_load_split_streams_pairs_in_manifest_order(tmp_path):
    out, manifest = small_dataset(tmp_path, count=6)
    got = [s.sample_id for s in data.load_split(out, "train")]
    assert got == manifest.ids("train")
    shuffled = [s.sample_id for s in data.load_split(out, "train", shuffle_seed=5)]
    assert sorted(shuffled) == sorted(got)
    assert shuffled != got
    again = [s.sample_id for s in data.load_split(out, "train", shuffle_seed=5)]
    assert again == shuffled


def test_load_split_detects_corruption(tmp_path):
    out, manifest = small_dataset(tmp_path, count=4)
    sid = manifest.ids("train")[0]
    victim = os.path.join(out, "samples", sid + ".low.f32")
    blob = bytearray(open(victim, "rb").read())
    blob[100] ^= 0xFF
    open(victim, "wb").write(bytes(blob))
    with pytest.raises(DataError):
        list(data.load_split(out, "train"))


def test_build_dataset_argument_validation(tmp_path):
    with pytest.raises(ConfigurationError):
        data.build_dataset("csv", 4, GEO, NOISE, 0.8, 0, str(tmp_path / "x"))
    with pytest.raises(ConfigurationError):
        data.build_dataset("phantom", 4, GEO, NOISE, 1.5, 0, str(tmp_path / "y"))
    with pytest.raises(ConfigurationError):
        data.build_dataset("phantom", 0, GEO, NOISE, 0.8, 0, str(tmp_path / "z"))
    with pytest.raises(ConfigurationError):
        data.build_dataset("volumes", 0, GEO, NOISE, 0.8, 0, str(tmp_path / "v"))
    with pytest.raises(ConfigurationError):
        spec = data.PhantomSpec(image_size=32, liver_semi_axis_a=(8.0, 10.0),
                                liver_semi_axis_b=(6.0, 8.0),
                                tumor_radius_range=(1.5, 2.0))
        data.build_dataset("phantom", 4, GEO, NOISE, 0.8, 0,
                           str(tmp_path / "m"), spec=spec)


def test_slab_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    vol = rng.random((3, 20, 24)).astype(np.float32)
    path = str(tmp_path / "v.vol.slab")
    data.write_slab(path, vol, spacing=(2.5, 1.0, 1.0))
    back, header = data.read_slab(path)
    assert np.array_equal(back, vol)
    assert header["dims"] == [3, 20, 24]
    assert header["spacing"] == [2.5, 1.0, 1.0]
    labels = (rng.random((3, 20, 24)) > 0.7).astype(np.uint8)
    lpath = str(tmp_path / "v.seg.slab")
    data.write_slab(lpath, labels)
    lback, lheader = data.read_slab(lpath)
    assert np.array_equal(lback, labels)
    assert lheader["dtype"] == "u1"


def test_slab_corruption_detected(tmp_path):
    path = str(tmp_path / "x.slab")
    data.write_slab(path, np.zeros((2, 4, 4), np.float32))
    blob = open(path, "rb").read()
    open(path, "wb").write(b"JUNK!\n" + blob[6:])
    with pytest.raises(DataError):
        data.read_slab(path)
    open(path, "wb").write(blob[:-8])
    with pytest.raises(DataError):
        data.read_slab(path)


def make_volume_pair(vdir, name, n_slices, nonempty, seed, size=20):
    rng = np.random.default_rng(seed)
    vol = rng.random((n_slices, size, size)).astype(np.float32) * 0.3
    seg = np.zeros((n_slices, size, size), np.uint8)
    for z in nonempty:
        seg[z, 8:12, 8:12] = 1
        seg[z, 9:11, 9:11] = 2
        vol[z, 8:12, 8:12] += 0.4
    data.write_slab(os.path.join(vdir, f"{name}.vol.slab"), vol)
    data.write_slab(os.path.join(vdir, f"{name}.seg.slab"), seg)


def test_ingest_volumes_keep_rule(tmp_path):
    vdir = str(tmp_path / "vols")
    os.makedirs(vdir)
    make_volume_pair(vdir, "a", 4, [1, 3], seed=1)
    make_volume_pair(vdir, "b", 3, [0], seed=2)
    pairs = data.ingest_volumes(vdir, image_size=32)
    assert len(pairs) == 3  # empty-seg slices dropped
    for img, lab in pairs:
        assert img.shape == (32, 32) and lab.shape == (32, 32)
        assert img.min() >= 0.0 and img.max() <= 1.0
        assert set(np.unique(lab)) <= {0, 1, 2}
        assert (lab == 2).any()  # nearest-neighbour resize keeps labels
    with pytest.raises(ConfigurationError):
        data.ingest_volumes(vdir, keep_rule="all")
    with pytest.raises(DataError):
        data.ingest_volumes(str(tmp_path / "nowhere"))


def test_ingest_volumes_missing_or_mismatched_pair(tmp_path):
    vdir = str(tmp_path / "vols")
    os.makedirs(vdir)
    data.write_slab(os.path.join(vdir, "a.vol.slab"),
                    np.zeros((2, 8, 8), np.float32))
    with pytest.raises(DataError):
        data.ingest_volumes(vdir)
    data.write_slab(os.path.join(vdir, "a.seg.slab"),
                    np.zeros((3, 8, 8), np.uint8))
    with pytest.raises(DataError):
        data.ingest_volumes(vdir)


def test_build_dataset_from_volumes_splits_by_volume(tmp_path):
    vdir = str(tmp_path / "vols")
    os.makedirs(vdir)
    make_volume_pair(vdir, "a", 5, [0, 2, 4], seed=3, size=64)
    make_volume_pair(vdir, "b", 4, [1, 2], seed=4, size=64)
    make_volume_pair(vdir, "c", 3, [0, 1], seed=5, size=64)
    out = str(tmp_path / "ds")
    manifest = data.build_dataset(
        source="volumes", count=0, geometry=GEO, noise=NOISE,
        split_ratio=0.6, seed=9, out_dir=out, volume_dir=vdir)
    assert manifest.split_granularity == "volume"
    assert len(manifest.sample_ids) == 7
    side = {}
    for sid in manifest.sample_ids:
        vol = sid.rsplit("_z", 1)[0]
        side.setdefault(vol, set()).add(manifest.split[sid])
    for vol, groups in side.items():
        assert len(groups) == 1, f"volume {vol} straddles the split"
    assert manifest.ids("test")  # at least one held-out volume
    # count acts as an upper bound for volume sources
    capped = data.build_dataset(
        source="volumes", count=3, geometry=GEO, noise=NOISE,
        split_ratio=0.6, seed=9, out_dir=str(tmp_path / "ds2"), volume_dir=vdir)
    assert len(capped.sample_ids) == 3


def test_manifest_invariants():
    base = dict(
        sample_ids=["a", "b", "c", "d", "e"],
        split={"a": "train", "b": "train", "c": "train", "d": "train",
               "e": "test"},
        geometry=GEO.to_dict(), noise=NOISE.to_dict(), seed=0,
        source="phantom", split_ratio=0.8, image_size=64,
    )
    data.DatasetManifest.from_dict(dict(base))

    bad = dict(base)
    bad["split"] = {k: v for k, v in base["split"].items() if k != "e"}
    with pytest.raises(DataError):
        data.DatasetManifest.from_dict(bad)

    bad = dict(base)
    bad["split"] = dict(base["split"], e="holdout")
    with pytest.raises(DataError):
        data.DatasetManifest.from_dict(bad)

    ok_off_by_one = dict(base)
    ok_off_by_one["split"] = dict(base["split"], d="test")  # 3 train vs 4
    data.DatasetManifest.from_dict(ok_off_by_one)

    bad = dict(base)
    bad["split"] = {k: "test" for k in base["sample_ids"]}
    with pytest.raises(DataError):  # 0 train vs target 4
        data.DatasetManifest.from_dict(bad)
