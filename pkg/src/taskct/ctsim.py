"""Parallel-beam tomography: forward projection, FBP, low-dose simulation.

Geometry convention: angles uniform over [0, pi), detector bins centered on
the image center, one bin per pixel width. The forward model integrates along
rays with bilinear sampling at half-pixel steps; FBP uses the classic
spatial-domain Ram-Lak kernel (optionally apodized with a Hann window) and
linear-interpolation back-projection.

Low-dose simulation follows the LoDoPaB recipe: scale line integrals by an
attenuation constant, draw Poisson photon counts around N0*exp(-s), clip
counts at 0.1 to keep the log finite, and reconstruct the log-transformed
sinogram with the ramp filter.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, DimensionError
from . import rawio

FILTERS = ("ramp", "hann-ramp")

# integration step along each ray, in pixels
RAY_STEP = 0.5


def _check_positive_int(name, value):
    if not isinstance(value, (int, np.integer)) or value <= 0:
        raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")


@dataclass(frozen=True)
class Geometry:
    """Acquisition geometry: A angles over [0, pi), D detector bins, H=W image."""

    num_angles: int
    num_detectors: int
    image_size: int

    def __post_init__(self):
        _check_positive_int("num_angles", self.num_angles)
        _check_positive_int("num_detectors", self.num_detectors)
        _check_positive_int("image_size", self.image_size)
        min_det = math.ceil(self.image_size * math.sqrt(2.0))
        if self.num_detectors < min_det:
            raise ConfigurationError(
                f"num_detectors={self.num_detectors} cannot cover a "
                f"{self.image_size}px image diagonal (need >= {min_det})"
            )

    @property
    def angles(self):
        return np.linspace(0.0, np.pi, self.num_angles, endpoint=False)

    def to_dict(self):
        return {
            "num_angles": int(self.num_angles),
            "num_detectors": int(self.num_detectors),
            "image_size": int(self.image_size),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["num_angles"]), int(d["num_detectors"]), int(d["image_size"]))


@dataclass(frozen=True)
class NoiseModel:
    """Poisson counting noise: N0 mean photons per bin at zero attenuation.

    mu_scale converts pixel-unit line integrals into attenuation exponents
    (the unit-interval analogue of the LoDoPaB mu_max constant).
    """

    photon_count: float = 4096.0
    rng_seed: int = 0
    mu_scale: float = 0.05

    def __post_init__(self):
        if not (self.photon_count > 0):
            raise ConfigurationError(f"photon_count must be > 0, got {self.photon_count!r}")
        if not (self.mu_scale > 0):
            raise ConfigurationError(f"mu_scale must be > 0, got {self.mu_scale!r}")

    def to_dict(self):
        return {
            "photon_count": float(self.photon_count),
            "rng_seed": int(self.rng_seed),
            "mu_scale": float(self.mu_scale),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["photon_count"]), int(d["rng_seed"]), float(d["mu_scale"]))


@dataclass
class Sinogram:
    """A x D array of line integrals plus the geometry that produced it.

    radon() outputs are non-negative; log-transformed noisy sinograms may dip
    below zero when a bin counts more photons than N0, so only finiteness and
    shape are enforced here.
    """

    values: np.ndarray
    geometry: Geometry = field(compare=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        expected = (self.geometry.num_angles, self.geometry.num_detectors)
        if self.values.shape != expected:
            raise DimensionError(
                f"sinogram shape {self.values.shape} does not match geometry {expected}"
            )
        if not np.all(np.isfinite(self.values)):
            raise DimensionError("sinogram contains non-finite values")


def radon(image, geometry: Geometry) -> Sinogram:
    """Forward-project an H x H image; entry (a, d) is the ray line integral."""
    image = np.asarray(image, dtype=np.float64)
    h = geometry.image_size
    if image.shape != (h, h):
        raise DimensionError(f"image shape {image.shape}, geometry expects {(h, h)}")
    if not np.all(np.isfinite(image)):
        raise DimensionError("image contains non-finite values")

    c = (h - 1) / 2.0
    t = np.arange(geometry.num_detectors, dtype=np.float64)
    t -= (geometry.num_detectors - 1) / 2.0
    half = h * math.sqrt(2.0) / 2.0
    n_s = int(np.ceil(2.0 * half / RAY_STEP)) + 1
    s = np.linspace(-half, half, n_s)
    ds = s[1] - s[0]

    sino = np.empty((geometry.num_angles, geometry.num_detectors), dtype=np.float64)
    tt, ss = np.meshgrid(t, s, indexing="ij")
    for a, th in enumerate(geometry.angles):
        ct, st = np.cos(th), np.sin(th)
        x = tt * ct - ss * st
        y = tt * st + ss * ct
        coords = np.stack([y + c, x + c])
        vals = ndimage.map_coordinates(
            image, coords.reshape(2, -1), order=1, mode="constant",
            cval=0.0, prefilter=False,
        )
        sino[a] = vals.reshape(geometry.num_detectors, n_s).sum(axis=1) * ds
    return Sinogram(sino, geometry)


def _ramp_kernel(n):
    # spatial-domain Ram-Lak: h[0]=1/4, h[odd k]=-1/(pi k)^2, h[even k]=0
    k = np.fft.fftfreq(n) * n
    h = np.zeros(n)
    h[0] = 0.25
    odd = np.abs(k) % 2 == 1
    h[odd] = -1.0 / (np.pi * k[odd]) ** 2
    return np.real(np.fft.fft(h))


def filter_response(n_pad: int, filter_name: str):
    """Frequency response of the named reconstruction filter, length n_pad."""
    if filter_name not in FILTERS:
        raise ConfigurationError(
            f"unknown filter {filter_name!r}, expected one of {FILTERS}"
        )
    f = _ramp_kernel(n_pad)
    if filter_name == "hann-ramp":
        freq = np.fft.fftfreq(n_pad)
        f = f * (0.5 + 0.5 * np.cos(2.0 * np.pi * freq))
    return f


def fbp(sinogram: Sinogram, filter_name: str = "ramp"):
    """Filtered back-projection; returns an H x H image clipped to [0, 1]."""
    geom = sinogram.geometry
    n_det = geom.num_detectors
    n_pad = max(64, int(2 ** np.ceil(np.log2(2 * n_det))))
    f = filter_response(n_pad, filter_name)

    spectra = np.fft.fft(sinogram.values, n=n_pad, axis=1) * f[None, :]
    filtered = np.fft.ifft(spectra, axis=1).real[:, :n_det]

    h = geom.image_size
    c = (h - 1) / 2.0
    xs = np.arange(h, dtype=np.float64) - c
    grid_x, grid_y = np.meshgrid(xs, xs)  # grid_x varies along columns
    det = np.arange(n_det, dtype=np.float64) - (n_det - 1) / 2.0
    out = np.zeros((h, h), dtype=np.float64)
    for a, th in enumerate(geom.angles):
        t_pix = grid_x * np.cos(th) + grid_y * np.sin(th)
        out += np.interp(t_pix.ravel(), det, filtered[a], left=0.0, right=0.0).reshape(h, h)
    out *= np.pi / geom.num_angles
    return np.clip(out, 0.0, 1.0)


def poisson_counts(expected, rng):
    """Draw Poisson counts around `expected`, clipped below at 0.1.

    The clip keeps the subsequent log transform finite on zero-count bins.
    """
    expected = np.asarray(expected, dtype=np.float64)
    counts = rng.poisson(expected).astype(np.float64)
    return np.maximum(counts, 0.1)


def simulate_low_dose(full_dose, geometry: Geometry, noise: NoiseModel):
    """Simulate a low-dose image from a full-dose image.

    Pipeline: s = mu_scale * radon(x); lambda = N0 * exp(-s); counts ~
    Poisson(lambda) clipped at 0.1; noisy = -ln(counts / N0) / mu_scale;
    return fbp(noisy, ramp). Pure function of (image, geometry, noise).
    """
    full_dose = np.asarray(full_dose, dtype=np.float64)
    if not np.all((full_dose >= 0.0) & (full_dose <= 1.0)):
        raise ConfigurationError("full_dose image must lie in [0, 1]")
    sino = radon(full_dose, geometry)
    s = sino.values * noise.mu_scale
    expected = noise.photon_count * np.exp(-s)
    rng = np.random.default_rng(noise.rng_seed)
    counts = poisson_counts(expected, rng)
    noisy = -np.log(counts / noise.photon_count) / noise.mu_scale
    return fbp(Sinogram(noisy, geometry), "ramp")


def roi_mask(image_size: int, radius: int):
    """Boolean mask of pixels whose center is within `radius` of the center.

    Center convention: ((H-1)/2, (W-1)/2). For even sizes no pixel center
    coincides with the image center, so radius 0 yields an all-false mask.
    """
    if radius < 0 or radius > math.ceil(image_size / 2):
        raise ConfigurationError(
            f"radius {radius} out of range [0, ceil({image_size}/2)]"
        )
    c = (image_size - 1) / 2.0
    yy, xx = np.mgrid[:image_size, :image_size]
    return np.hypot(yy - c, xx - c) <= radius


def save_sinogram(stem, sinogram: Sinogram, noise: NoiseModel = None):
    """Persist as <stem>.f32 raw little-endian floats plus <stem>.json sidecar."""
    rawio.write_array(str(stem) + ".f32", sinogram.values, "f32")
    sidecar = {
        "kind": "sinogram",
        "shape": list(sinogram.values.shape),
        "dtype": "<f4",
        "geometry": sinogram.geometry.to_dict(),
    }
    if noise is not None:
        sidecar["noise"] = noise.to_dict()
    rawio.write_json(str(stem) + ".json", sidecar)


def load_sinogram(stem) -> Sinogram:
    meta = rawio.read_json(str(stem) + ".json")
    geom = Geometry.from_dict(meta["geometry"])
    values = rawio.read_array(str(stem) + ".f32", meta["shape"], "f32")
    return Sinogram(values, geom)


def save_image(stem, image, meta=None):
    image = np.asarray(image)
    rawio.write_array(str(stem) + ".f32", image, "f32")
    sidecar = {"kind": "image", "shape": list(image.shape), "dtype": "<f4"}
    if meta:
        sidecar.update(meta)
    rawio.write_json(str(stem) + ".json", sidecar)


def load_image(stem):
    meta = rawio.read_json(str(stem) + ".json")
    return rawio.read_array(str(stem) + ".f32", meta["shape"], "f32")
