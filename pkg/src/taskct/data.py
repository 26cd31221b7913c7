"""Dataset construction: synthetic liver phantoms, volume ingestion, splits.

A dataset directory holds `manifest.json` plus `samples/<id>.low.f32`,
`samples/<id>.full.f32` and `samples/<id>.seg.u8`. All randomness is derived
from the dataset seed and the sample id, so parallel builds and rebuilds are
byte-identical.
"""

import concurrent.futures
import glob
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import rawio
from .ctsim import Geometry, NoiseModel, simulate_low_dose
from .errors import ConfigurationError, DataError
from .seeding import derive_seed

LABELS = (0, 1, 2)  # background, liver, tumor


@dataclass
class SamplePair:
    low_dose: np.ndarray
    full_dose: np.ndarray
    seg: np.ndarray
    sample_id: str

    def __post_init__(self):
        if not (self.low_dose.shape == self.full_dose.shape == self.seg.shape):
            raise DataError(f"sample {self.sample_id}: array shapes disagree")
        if self.full_dose.min() < 0 or self.full_dose.max() > 1:
            raise DataError(f"sample {self.sample_id}: full_dose outside [0, 1]")
        if not np.isin(self.seg, LABELS).all():
            raise DataError(f"sample {self.sample_id}: seg labels outside {LABELS}")


@dataclass(frozen=True)
class PhantomSpec:
    """Ranges for the synthetic liver/tumor slice generator.

    The liver is a rotated ellipse on a flat background; tumors are discs
    confined to the liver. Intensities are flat band values plus Gaussian
    texture noise, clipped to [0, 1].
    """

    image_size: int = 64
    liver_semi_axis_a: tuple = (16.0, 22.0)
    liver_semi_axis_b: tuple = (12.0, 18.0)
    center_jitter: float = 4.0
    tumor_count_range: tuple = (1, 2)
    tumor_radius_range: tuple = (2.0, 3.2)
    background_band: tuple = (0.08, 0.16)
    liver_band: tuple = (0.43, 0.49)
    tumor_band: tuple = (0.55, 0.61)
    texture_noise_std: float = 0.02

    def __post_init__(self):
        bands = [self.background_band, self.liver_band, self.tumor_band]
        means = [0.5 * (lo + hi) for lo, hi in bands]
        if not (means[0] < means[1] < means[2]):
            raise ConfigurationError("intensity bands must be ordered bg < liver < tumor")
        for lo, hi in bands:
            if not (0.0 <= lo <= hi <= 1.0):
                raise ConfigurationError(f"band ({lo}, {hi}) outside [0, 1]")
        if self.tumor_radius_range[1] >= self.liver_semi_axis_b[0]:
            raise ConfigurationError("tumor radius must stay below the liver semi-minor axis")
        if self.tumor_count_range[0] < 0 or self.tumor_count_range[0] > self.tumor_count_range[1]:
            raise ConfigurationError("bad tumor_count_range")

    def to_dict(self):
        d = {}
        for k, v in self.__dict__.items():
            d[k] = list(v) if isinstance(v, tuple) else v
        return d

    @classmethod
    def from_dict(cls, d):
        kwargs = {}
        for k, v in d.items():
            kwargs[k] = tuple(v) if isinstance(v, list) else v
        return cls(**kwargs)


def generate_phantom(spec: PhantomSpec, seed: int):
    """Deterministic (image, seg) pair for the given spec and seed."""
    rng = np.random.default_rng(seed)
    size = spec.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0

    img = np.full((size, size), rng.uniform(*spec.background_band))
    seg = np.zeros((size, size), dtype=np.uint8)

    a = rng.uniform(*spec.liver_semi_axis_a)
    b = rng.uniform(*spec.liver_semi_axis_b)
    cy = c + rng.uniform(-spec.center_jitter, spec.center_jitter)
    cx = c + rng.uniform(-spec.center_jitter, spec.center_jitter)
    theta = rng.uniform(0.0, np.pi)
    ct, st = np.cos(theta), np.sin(theta)
    u = (xx - cx) * ct + (yy - cy) * st
    v = -(xx - cx) * st + (yy - cy) * ct
    liver = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    img[liver] = rng.uniform(*spec.liver_band)
    seg[liver] = 1

    n_tumors = int(rng.integers(spec.tumor_count_range[0], spec.tumor_count_range[1] + 1))
    placed = 0
    attempts = 0
    while placed < n_tumors:
        attempts += 1
        if attempts > 100 * max(n_tumors, 1):
            raise ConfigurationError("could not place tumors inside the liver; spec too tight")
        r = rng.uniform(*spec.tumor_radius_range)
        # propose inside the unrotated inner box, then verify against the pixel mask
        ty = cy + rng.uniform(-b + r, b - r)
        tx = cx + rng.uniform(-a + r, a - r)
        tumor = (yy - ty) ** 2 + (xx - tx) ** 2 <= r**2
        if not tumor.any() or (tumor & ~liver).any() or (tumor & (seg == 2)).any():
            continue
        img[tumor] = rng.uniform(*spec.tumor_band)
        seg[tumor] = 2
        placed += 1

    img = img + rng.normal(0.0, spec.texture_noise_std, img.shape)
    return np.clip(img, 0.0, 1.0), seg


# ---------------------------------------------------------------------------
# raw-slab volume ingestion

SLAB_MAGIC = b"SLAB1\n"


def read_slab(path):
    """Read a raw-slab file: magic, one JSON header line, then z-major voxels."""
    try:
        with open(path, "rb") as fh:
            magic = fh.read(len(SLAB_MAGIC))
            if magic != SLAB_MAGIC:
                raise DataError(f"{path}: not a SLAB1 file")
            header_line = fh.readline()
            try:
                header = json.loads(header_line.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise DataError(f"{path}: bad slab header: {exc}") from exc
            dims = header.get("dims")
            dtype = header.get("dtype")
            if not dims or len(dims) != 3 or dtype not in ("<f4", "u1"):
                raise DataError(f"{path}: bad slab header fields")
            count = int(np.prod(dims))
            buf = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    arr = np.frombuffer(buf, dtype=np.dtype(dtype))
    if arr.size != count:
        raise DataError(f"{path}: voxel payload does not match dims {dims}")
    return arr.reshape(dims).copy(), header


def write_slab(path, volume, spacing=(1.0, 1.0, 1.0)):
    volume = np.asarray(volume)
    dtype = "u1" if volume.dtype == np.uint8 else "<f4"
    data = np.ascontiguousarray(volume, dtype=np.dtype(dtype))
    header = {"dims": list(volume.shape), "spacing": list(spacing), "dtype": dtype}
    with open(path, "wb") as fh:
        fh.write(SLAB_MAGIC)
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        fh.write(data.tobytes())


def _resize_slice(img, size, order):
    if img.shape == (size, size):
        return img.copy()
    zoom = (size / img.shape[0], size / img.shape[1])
    return ndimage.zoom(img, zoom, order=order, mode="nearest", grid_mode=True)


def _iter_volume_slices(volume_dir, image_size, window):
    vol_paths = sorted(glob.glob(os.path.join(volume_dir, "*.vol.slab")))
    if not vol_paths:
        raise DataError(f"no *.vol.slab files under {volume_dir}")
    for vol_path in vol_paths:
        seg_path = vol_path[: -len(".vol.slab")] + ".seg.slab"
        if not os.path.exists(seg_path):
            raise DataError(f"missing segmentation pair for {vol_path}")
        vol, _ = read_slab(vol_path)
        seg, _ = read_slab(seg_path)
        if vol.shape != seg.shape:
            raise DataError(f"{vol_path}: volume/segmentation dims disagree")
        vol = vol.astype(np.float64)
        lo, hi = (vol.min(), vol.max()) if window is None else window
        vol = (vol - lo) / max(hi - lo, 1e-12)
        vol = np.clip(vol, 0.0, 1.0)
        vol_id = os.path.basename(vol_path)[: -len(".vol.slab")]
        for z in range(vol.shape[0]):
            seg_slice = seg[z].astype(np.uint8)
            if not seg_slice.any():  # keep rule: non-empty segmentation only
                continue
            img = _resize_slice(vol[z], image_size, order=1)
            lab = _resize_slice(seg_slice, image_size, order=0).astype(np.uint8)
            yield vol_id, z, np.clip(img, 0.0, 1.0), lab


def ingest_volumes(volume_dir, keep_rule="non_empty_seg", image_size=64, window=None):
    """Slice paired raw-slab volumes into normalized (image, seg) pairs."""
    if keep_rule != "non_empty_seg":
        raise ConfigurationError(f"unknown keep rule {keep_rule!r}")
    return [(img, lab) for _, _, img, lab in _iter_volume_slices(volume_dir, image_size, window)]


# ---------------------------------------------------------------------------
# dataset persistence

@dataclass
class DatasetManifest:
    sample_ids: list
    split: dict
    geometry: dict
    noise: dict
    seed: int
    source: str
    split_ratio: float
    image_size: int
    checksums: dict = field(default_factory=dict)
    split_granularity: str = "slice"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if set(self.split) != set(self.sample_ids):
            raise DataError("manifest split does not cover sample ids exactly")
        bad = {v for v in self.split.values() if v not in ("train", "test")}
        if bad:
            raise DataError(f"manifest split has unknown groups {bad}")
        if self.split_granularity == "slice":
            n_train = sum(1 for v in self.split.values() if v == "train")
            target = self.split_ratio * len(self.sample_ids)
            if abs(n_train - target) > 1.0:
                raise DataError(
                    f"train count {n_train} is more than one sample away from "
                    f"ratio target {target:.2f}"
                )

    def ids(self, which):
        if which not in ("train", "test"):
            raise ConfigurationError(f"split must be 'train' or 'test', got {which!r}")
        return [sid for sid in self.sample_ids if self.split[sid] == which]

    def to_dict(self):
        return {
            "sample_ids": self.sample_ids,
            "split": self.split,
            "geometry": self.geometry,
            "noise": self.noise,
            "seed": self.seed,
            "source": self.source,
            "split_ratio": self.split_ratio,
            "image_size": self.image_size,
            "checksums": self.checksums,
            "split_granularity": self.split_granularity,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _sample_paths(root, sample_id):
    base = os.path.join(root, "samples", sample_id)
    return base + ".low.f32", base + ".full.f32", base + ".seg.u8"


def _make_phantom_sample(args):
    spec_dict, geom_dict, noise_dict, seed, sample_id = args
    spec = PhantomSpec.from_dict(spec_dict)
    geometry = Geometry.from_dict(geom_dict)
    full, seg = generate_phantom(spec, derive_seed(seed, "phantom", sample_id))
    noise = NoiseModel(
        photon_count=noise_dict["photon_count"],
        rng_seed=derive_seed(seed, "noise", sample_id),
        mu_scale=noise_dict["mu_scale"],
    )
    low = simulate_low_dose(full, geometry, noise)
    return sample_id, low.astype(np.float32), full.astype(np.float32), seg


def build_dataset(source, count, geometry: Geometry, noise: NoiseModel, split_ratio,
                  seed, out_dir, spec: PhantomSpec = None, volume_dir=None,
                  workers: int = 1) -> DatasetManifest:
    """Generate, degrade and persist `count` samples, then write the manifest.

    source 'phantom' draws synthetic slices from `spec`; source 'volumes'
    ingests every kept slice under `volume_dir` (count then acts as an upper
    bound, 0 meaning all). Per-sample noise seeds derive from (seed, id), so
    `workers` never changes the output bytes.
    """
    if source not in ("phantom", "volumes"):
        raise ConfigurationError(f"unknown dataset source {source!r}")
    if not (0.0 < split_ratio < 1.0):
        raise ConfigurationError(f"split_ratio must be in (0, 1), got {split_ratio}")

    rawio.ensure_dir(os.path.join(out_dir, "samples"))
    checksums = {}
    sample_ids = []
    granularity = "slice"
    volume_of = {}

    if source == "phantom":
        if spec is None:
            spec = PhantomSpec(image_size=geometry.image_size)
        if spec.image_size != geometry.image_size:
            raise ConfigurationError("phantom spec and geometry disagree on image size")
        if count <= 0:
            raise ConfigurationError("phantom dataset needs count > 0")
        ids = [f"p{idx:05d}" for idx in range(count)]
        jobs = [(spec.to_dict(), geometry.to_dict(), noise.to_dict(), seed, sid) for sid in ids]
        if workers > 1:
            with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
                results = {r[0]: r for r in pool.map(_make_phantom_sample, jobs, chunksize=8)}
        else:
            results = {r[0]: r for r in map(_make_phantom_sample, jobs)}
        for sid in ids:  # write in id order regardless of worker completion order
            _, low, full, seg = results[sid]
            checksums.update(_persist_sample(out_dir, sid, low, full, seg))
            sample_ids.append(sid)
    else:
        if volume_dir is None:
            raise ConfigurationError("source 'volumes' requires volume_dir")
        granularity = "volume"
        emitted = 0
        for vol_id, z, full, seg in _iter_volume_slices(volume_dir, geometry.image_size, None):
            if count and emitted >= count:
                break
            sid = f"{vol_id}_z{z:04d}"
            sample_noise = NoiseModel(
                photon_count=noise.photon_count,
                rng_seed=derive_seed(seed, "noise", sid),
                mu_scale=noise.mu_scale,
            )
            low = simulate_low_dose(full, geometry, sample_noise)
            checksums.update(_persist_sample(
                out_dir, sid, low.astype(np.float32), full.astype(np.float32), seg))
            sample_ids.append(sid)
            volume_of[sid] = vol_id
            emitted += 1
        if not sample_ids:
            raise ConfigurationError("volume ingestion produced zero kept slices")

    split = _assign_split(sample_ids, split_ratio, seed, granularity, volume_of)
    manifest = DatasetManifest(
        sample_ids=sample_ids,
        split=split,
        geometry=geometry.to_dict(),
        noise=noise.to_dict(),
        seed=int(seed),
        source=source,
        split_ratio=float(split_ratio),
        image_size=int(geometry.image_size),
        checksums=checksums,
        split_granularity=granularity,
        extra={"phantom_spec": spec.to_dict()} if source == "phantom" else {},
    )
    rawio.write_json(os.path.join(out_dir, "manifest.json"), manifest.to_dict())
    return manifest


def _persist_sample(root, sid, low, full, seg):
    low_p, full_p, seg_p = _sample_paths(root, sid)
    rawio.write_array(low_p, low, "f32")
    rawio.write_array(full_p, full, "f32")
    rawio.write_array(seg_p, seg, "u8")
    out = {}
    for p in (low_p, full_p, seg_p):
        with open(p, "rb") as fh:
            out[os.path.basename(p)] = _sha256(fh.read())
    return out


def _assign_split(sample_ids, ratio, seed, granularity, volume_of):
    rng = np.random.default_rng(derive_seed(seed, "split"))
    if granularity == "slice":
        order = list(rng.permutation(len(sample_ids)))
        n_train = int(round(ratio * len(sample_ids)))
        train_idx = set(order[:n_train])
        return {sid: ("train" if i in train_idx else "test")
                for i, sid in enumerate(sample_ids)}
    # volume granularity: whole volumes go to one side, best-effort ratio
    volumes = sorted(set(volume_of.values()))
    perm = [volumes[i] for i in rng.permutation(len(volumes))]
    counts = {v: sum(1 for s in sample_ids if volume_of[s] == v) for v in volumes}
    total = len(sample_ids)
    train_vols, acc = set(), 0
    for v in perm:
        if acc < ratio * total:
            train_vols.add(v)
            acc += counts[v]
    if len(train_vols) == len(volumes) and len(volumes) > 1:
        train_vols.discard(perm[-1])  # keep at least one test volume
    return {sid: ("train" if volume_of[sid] in train_vols else "test")
            for sid in sample_ids}


def load_manifest(dataset_dir) -> DatasetManifest:
    return DatasetManifest.from_dict(rawio.read_json(os.path.join(dataset_dir, "manifest.json")))


def load_split(dataset_dir, which, shuffle_seed=None):
    """Stream SamplePairs for one split, verifying checksums as files are read."""
    manifest = load_manifest(dataset_dir)
    ids = manifest.ids(which)
    if shuffle_seed is not None:
        rng = np.random.default_rng(shuffle_seed)
        ids = [ids[i] for i in rng.permutation(len(ids))]
    size = manifest.image_size
    for sid in ids:
        yield _load_sample(dataset_dir, manifest, sid, size)


def _load_sample(dataset_dir, manifest, sid, size):
    low_p, full_p, seg_p = _sample_paths(dataset_dir, sid)
    arrays = []
    for path, kind in ((low_p, "f32"), (full_p, "f32"), (seg_p, "u8")):
        try:
            with open(path, "rb") as fh:
                buf = fh.read()
        except OSError as exc:
            raise DataError(f"missing sample file {path}: {exc}") from exc
        want = manifest.checksums.get(os.path.basename(path))
        if want is not None and _sha256(buf) != want:
            raise DataError(f"checksum mismatch for {path}; dataset is corrupt")
        dtype = np.dtype(rawio.DTYPES[kind])
        if len(buf) != size * size * dtype.itemsize:
            raise DataError(f"{path}: wrong byte count for {size}x{size} {kind}")
        arrays.append(np.frombuffer(buf, dtype=dtype).reshape(size, size).copy())
    low, full, seg = arrays
    return SamplePair(low, full, seg, sid)
