"""FAZ-centered Cartesian <-> polar resampling.

Coordinate conventions
----------------------
* Pixel (x, y) means column x, row y; rows grow downward as stored.
* The abstract plane used by `map_c2p`/`map_p2c` is the usual mathematical
  one: angle 0 along +u, increasing counter-clockwise.
* Image sampling bridges the two by measuring angles counter-clockwise *as
  displayed*: the +90 degree direction points toward decreasing row, so
  after laterality normalization angle 0 is the temporal side, 90 degrees
  is superior, 180 nasal, 270 inferior.
* Polar bins are sampled at their centers: row i covers the angle
  start_angle + 2*pi*i/theta_samples, column j the radius R*(j+0.5)/r_samples.
* Samples falling outside the source image clamp to the nearest boundary
  pixel, so the outermost content is kept rather than zero-filled.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DataError

TWO_PI = 2.0 * np.pi


@dataclass
class CartesianImage:
    """Pixel grid with physical metadata.

    pixels: (C, H, W) float32 in [0, 1]; center: subpixel (u, v) in pixel
    coordinates (u = column, v = row); laterality: 'OD', 'OS' or 'unknown'.
    """

    pixels: np.ndarray
    center: tuple[float, float]
    laterality: str = "unknown"
    mm_per_pixel: float = 0.0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim == 2:
            self.pixels = self.pixels[None]
        if self.pixels.ndim != 3:
            raise ConfigError(f"pixels must be (C, H, W), got {self.pixels.shape}")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise ConfigError("pixel values must lie in [0, 1]")
        u, v = self.center
        if not (0.0 < u < self.width - 1 and 0.0 < v < self.height - 1):
            raise ConfigError(f"center {self.center} not strictly inside "
                              f"{self.width}x{self.height} image")
        if self.laterality not in ("OD", "OS", "unknown"):
            raise ConfigError(f"laterality must be OD/OS/unknown, got {self.laterality!r}")

    @property
    def channels(self):
        return self.pixels.shape[0]

    @property
    def height(self):
        return self.pixels.shape[1]

    @property
    def width(self):
        return self.pixels.shape[2]

    @property
    def plane(self) -> np.ndarray:
        """The single gray plane; most of the pipeline is single-channel."""
        if self.channels != 1:
            raise ConfigError(f"expected 1 channel, image has {self.channels}")
        return self.pixels[0]

    def edge_radius(self) -> float:
        """Minimal distance from the center to any image edge."""
        u, v = self.center
        return float(min(u, v, self.width - 1 - u, self.height - 1 - v))


@dataclass
class PolarImage:
    """Resampled image on the (theta, r) grid around `origin`.

    R is the transform radius in source pixels; `origin` is a copy of the
    source center so the inverse transform can re-anchor itself.
    """

    pixels: np.ndarray          # (C, theta_samples, r_samples) float32
    R: float
    origin: tuple[float, float]
    start_angle: float = 0.0
    laterality: str = "unknown"

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim == 2:
            self.pixels = self.pixels[None]

    @property
    def theta_samples(self):
        return self.pixels.shape[1]

    @property
    def r_samples(self):
        return self.pixels.shape[2]

    @property
    def plane(self) -> np.ndarray:
        if self.pixels.shape[0] != 1:
            raise ConfigError("expected a single-channel polar image")
        return self.pixels[0]

    def theta_of_row(self, i):
        return self.start_angle + TWO_PI * (np.asarray(i) + 0.5) / self.theta_samples

    def radius_of_col(self, j):
        return self.R * (np.asarray(j) + 0.5) / self.r_samples


def map_c2p(point, origin=(0.0, 0.0)):
    """Cartesian (u, v) -> polar (theta, r) relative to `origin`.

    theta = atan2(v, u) normalized to [0, 2*pi); r = sqrt(u^2 + v^2).
    Accepts scalars or arrays.
    """
    u = np.asarray(point[0], dtype=np.float64) - origin[0]
    v = np.asarray(point[1], dtype=np.float64) - origin[1]
    r = np.hypot(u, v)
    theta = np.mod(np.arctan2(v, u), TWO_PI)
    return theta, r


def map_p2c(point, origin=(0.0, 0.0)):
    """Polar (theta, r) -> Cartesian (u, v) relative to `origin`."""
    theta = np.asarray(point[0], dtype=np.float64)
    r = np.asarray(point[1], dtype=np.float64)
    return origin[0] + r * np.cos(theta), origin[1] + r * np.sin(theta)


def _nearest_index(coord, limit):
    """Nearest-neighbor pixel index, clamped to the image bounds."""
    return np.clip(np.floor(coord + 0.5).astype(np.int64), 0, limit - 1)


def to_polar(img: CartesianImage, theta_samples=224, r_samples=224,
             start_angle=0.0, radius_override=None) -> PolarImage:
    """Resample a Cartesian image onto a FAZ-centered polar grid.

    Every (theta, r) bin center is mapped back to the source plane and
    filled by nearest-neighbor lookup.  The radius defaults to the minimal
    center-to-edge distance unless overridden.
    """
    if theta_samples < 8 or r_samples < 8:
        raise ConfigError("theta_samples and r_samples must be >= 8")
    if radius_override is not None and radius_override <= 0:
        raise ConfigError(f"radius_override must be positive, got {radius_override}")
    R = float(radius_override) if radius_override is not None else img.edge_radius()
    u0, v0 = img.center

    theta = start_angle + TWO_PI * (np.arange(theta_samples) + 0.5) / theta_samples
    radius = R * (np.arange(r_samples) + 0.5) / r_samples
    # Angles are measured counter-clockwise as displayed: +sin goes up,
    # which is toward decreasing row index.
    cols = u0 + radius[None, :] * np.cos(theta)[:, None]
    rows = v0 - radius[None, :] * np.sin(theta)[:, None]
    ci = _nearest_index(cols, img.width)
    ri = _nearest_index(rows, img.height)
    pixels = img.pixels[:, ri, ci]
    return PolarImage(pixels=pixels, R=R, origin=(u0, v0),
                      start_angle=float(start_angle), laterality=img.laterality)


def from_polar(pimg: PolarImage, out_width, out_height):
    """Inverse polar resampling back onto a Cartesian grid.

    Each output pixel inside the disk of radius R takes the value of the
    polar bin containing its (theta, r); pixels outside the disk are zero.
    Returns (CartesianImage, validity mask) where the mask flags in-disk
    pixels.
    """
    u0, v0 = pimg.origin
    if (u0 - pimg.R < -0.5 or u0 + pimg.R > out_width - 0.5
            or v0 - pimg.R < -0.5 or v0 + pimg.R > out_height - 0.5):
        raise ConfigError("output dimensions do not cover the transform disk")
    x = np.arange(out_width, dtype=np.float64)
    y = np.arange(out_height, dtype=np.float64)
    du = x[None, :] - u0
    dv = v0 - y[:, None]          # displayed-up is decreasing row
    theta, r = map_c2p((du, dv))
    inside = r <= pimg.R

    dtheta = TWO_PI / pimg.theta_samples
    ti = np.floor(np.mod(theta - pimg.start_angle, TWO_PI) / dtheta).astype(np.int64)
    ti = np.clip(ti, 0, pimg.theta_samples - 1)
    rj = np.floor(r / (pimg.R / pimg.r_samples)).astype(np.int64)
    rj = np.clip(rj, 0, pimg.r_samples - 1)

    pixels = np.where(inside[None], pimg.pixels[:, ti, rj], 0.0).astype(np.float32)
    img = CartesianImage(pixels=pixels, center=(u0, v0), laterality=pimg.laterality)
    return img, inside


def augment_polar(img: CartesianImage, theta_samples=224, r_samples=224,
                  start_angle_jitter=0.0, center_jitter=(0.0, 0.0),
                  radius_scale=1.0, start_angle=0.0) -> PolarImage:
    """Polar transform with perturbed start angle, center and radius.

    A start-angle jitter of 2*pi*k/theta_samples realizes an exact cyclic
    row shift; radius_scale < 1 realizes a crop-factor augmentation.
    """
    if not 0.0 < radius_scale <= 1.0:
        raise ConfigError(f"radius_scale must be in (0, 1], got {radius_scale}")
    du, dv = center_jitter
    u0, v0 = img.center[0] + du, img.center[1] + dv
    if not (0.0 < u0 < img.width - 1 and 0.0 < v0 < img.height - 1):
        raise ConfigError("center jitter pushes the origin outside the image")
    jittered = replace(img, center=(u0, v0))
    R = jittered.edge_radius() * radius_scale

    # A jitter that is an exact multiple of the bin angle leaves the sampling
    # grid aligned, so it is realized as a cyclic row shift (bit-exact); any
    # other jitter resamples through the general path.
    bins = start_angle_jitter * theta_samples / TWO_PI
    k = int(np.round(bins))
    if np.isclose(bins, k, rtol=0.0, atol=1e-9):
        out = to_polar(jittered, theta_samples, r_samples,
                       start_angle=start_angle, radius_override=R)
        out.pixels = np.roll(out.pixels, -k, axis=1)
        out.start_angle = float(start_angle + start_angle_jitter)
        return out
    return to_polar(jittered, theta_samples, r_samples,
                    start_angle=start_angle + start_angle_jitter,
                    radius_override=R)


def mirror_horizontal(img: CartesianImage) -> CartesianImage:
    """Reflect left-right; the center and laterality flip accordingly."""
    flipped = np.ascontiguousarray(img.pixels[:, :, ::-1])
    u0, v0 = img.center
    swap = {"OD": "OS", "OS": "OD", "unknown": "unknown"}
    return CartesianImage(pixels=flipped, center=(img.width - 1 - u0, v0),
                          laterality=swap[img.laterality],
                          mm_per_pixel=img.mm_per_pixel)


def normalize_laterality(img: CartesianImage) -> CartesianImage:
    """Mirror left-eye images so all inputs share one angular layout.

    OD images pass through; OS images are mirrored horizontally (and
    relabeled OD, the reference orientation).  Unknown laterality warns and
    passes through unchanged.
    """
    if img.laterality == "OD":
        return img
    if img.laterality == "OS":
        return mirror_horizontal(img)
    warnings.warn("laterality unknown; image not normalized", RuntimeWarning,
                  stacklevel=2)
    return img


def read_faz_sidecar(path):
    """Load the FAZ sidecar JSON: {"center": [u, v], "laterality": "OD"}."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read sidecar {path}: {exc}") from exc
    try:
        u, v = (float(c) for c in meta["center"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"sidecar {path} lacks a valid center") from exc
    return (u, v), meta.get("laterality", "unknown")


def write_faz_sidecar(path, center, laterality, extra=None):
    meta = {"center": [float(center[0]), float(center[1])],
            "laterality": laterality}
    if extra:
        meta.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
