"""ETDRS-style grids: region geometry, pooling and clinical prior weights.

A grid partitions the disk of radius R around the transform origin.  In the
polar index space produced by `geometry.to_polar` (start angle 0) every
annular sector becomes an axis-aligned rectangle, which is what makes
region-level pooling cheap and exact.

Conventions (shared with `geometry`): angle 0 is temporal after laterality
normalization, 90 degrees superior; quadrants are reported in T, S, N, I
order and rings in (inner, external) order.  Pixels exactly on a quadrant
boundary belong to the counter-clockwise-later quadrant, pixels exactly on
a ring boundary to the outer ring.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

TWO_PI = 2.0 * np.pi

QUADRANTS = ("T", "S", "N", "I")
RINGS = ("inner", "external")
PROJECTIONS = ("SVC", "DVC", "CC")

_DEFAULT_OFFSETS = {
    # Boundaries listed counter-clockwise; quadrant k spans the arc that
    # *ends* at offsets[k], so T is centered on angle 0.
    "ETDRS": (np.pi / 4, 3 * np.pi / 4, 5 * np.pi / 4, 7 * np.pi / 4),
    "IE": (),
    "Hemispheric": (np.pi, TWO_PI),
}
_HALF_NAMES = ("S", "I")


@dataclass
class GridSpec:
    """Geometric definition of a region grid.

    radii_fractions are relative to the transform radius, strictly
    increasing with last element 1.  ETDRS and IE use three fractions
    (center disk + two rings); Hemispheric uses (1,).
    """

    kind: str = "ETDRS"
    radii_fractions: tuple = (1 / 3, 2 / 3, 1.0)
    quadrant_offsets: tuple = None

    def __post_init__(self):
        if self.kind not in ("ETDRS", "IE", "Hemispheric"):
            raise ConfigError(f"unknown grid kind {self.kind!r}")
        fr = tuple(float(f) for f in self.radii_fractions)
        if self.kind == "Hemispheric" and len(fr) != 1:
            raise ConfigError("Hemispheric grid takes a single radius fraction")
        if self.kind in ("ETDRS", "IE") and len(fr) != 3:
            raise ConfigError(f"{self.kind} grid needs 3 radii fractions")
        if any(f2 <= f1 for f1, f2 in zip(fr, fr[1:])) or fr[0] <= 0:
            raise ConfigError(f"radii fractions must be strictly increasing: {fr}")
        if fr[-1] != 1.0:
            raise ConfigError("last radius fraction must be 1")
        self.radii_fractions = fr
        if self.quadrant_offsets is None:
            self.quadrant_offsets = _DEFAULT_OFFSETS[self.kind]
        off = tuple(float(o) % TWO_PI for o in self.quadrant_offsets)
        n_needed = {"ETDRS": 4, "IE": 0, "Hemispheric": 2}[self.kind]
        if len(off) != n_needed:
            raise ConfigError(f"{self.kind} grid needs {n_needed} quadrant offsets")
        if len(set(off)) != len(off):
            raise ConfigError("quadrant offsets must be distinct")
        self.quadrant_offsets = off

    @property
    def has_center(self) -> bool:
        return len(self.radii_fractions) > 1

    def sector_names(self):
        """Angular sector names in reporting order."""
        if self.kind == "ETDRS":
            return QUADRANTS
        if self.kind == "Hemispheric":
            return _HALF_NAMES
        return ()

    def sector_spans(self):
        """(name, theta_lo, theta_hi) per sector; theta_lo may be negative
        when the sector wraps through angle 0."""
        names = self.sector_names()
        if not names:
            return []
        off = self.quadrant_offsets
        spans = []
        for k, name in enumerate(names):
            lo, hi = off[k - 1], off[k]
            if lo >= hi:  # this sector wraps through angle 0
                lo -= TWO_PI
            spans.append((name, lo, hi))
        return spans

    def region_names(self):
        """All region names in reporting order (center first if present)."""
        names = ["C"] if self.has_center else []
        if self.kind == "ETDRS":
            names += [q + r[0].upper() for q in QUADRANTS for r in RINGS]
        elif self.kind == "IE":
            names += list(RINGS)
        else:
            names += list(_HALF_NAMES)
        return names


@dataclass
class RegionMask:
    """Per-pixel labels plus the polar rectangles of each region.

    label_map holds 0 outside the disk and 1-based ids in region_names()
    order.  polar_rects maps each name to a list of (row0, row1, col0, col1)
    rectangles in continuous polar index units; wrapped sectors contribute
    two rectangles for one logical region.
    """

    spec: GridSpec
    radius: float
    origin: tuple
    label_map: np.ndarray
    names: list = field(default_factory=list)

    def id_of(self, name) -> int:
        return self.names.index(name) + 1

    def pixels_of(self, name) -> np.ndarray:
        return self.label_map == self.id_of(name)


def _sector_index(spec: GridSpec, theta):
    """Sector id for each angle in [0, 2*pi); -1 when the grid has none."""
    theta = np.asarray(theta)
    if not spec.sector_names():
        return np.full(theta.shape, -1, dtype=np.int8)
    idx = np.full(theta.shape, -1, dtype=np.int8)
    for k, (_, lo, hi) in enumerate(spec.sector_spans()):
        if lo < 0:
            hit = (theta >= lo + TWO_PI) | (theta < hi)
        else:
            hit = (theta >= lo) & (theta < hi)
        idx[hit] = k
    return idx


def _ring_index(spec: GridSpec, r, R):
    """Radial zone per radius: 0 is the center disk when present."""
    bounds = np.asarray(spec.radii_fractions) * R
    zone = np.searchsorted(bounds, r, side="right")
    return np.minimum(zone, len(bounds) - 1)  # r == R stays inside


def build_grid(spec: GridSpec, radius, origin, width, height) -> RegionMask:
    """Rasterize the grid into a per-pixel label map.

    Angles follow the displayed-counter-clockwise convention of the polar
    transform (superior toward decreasing row).
    """
    if radius <= 0:
        raise ConfigError(f"grid radius must be positive, got {radius}")
    u0, v0 = origin
    x = np.arange(width, dtype=np.float64)
    y = np.arange(height, dtype=np.float64)
    du = x[None, :] - u0
    dv = v0 - y[:, None]
    r = np.hypot(du, dv)
    theta = np.mod(np.arctan2(dv, du), TWO_PI)

    inside = r <= radius
    zone = _ring_index(spec, r, radius)
    sector = _sector_index(spec, theta)

    names = spec.region_names()
    label = np.zeros((height, width), dtype=np.int16)
    for name_id, name in enumerate(names, start=1):
        if name == "C":
            hit = zone == 0
        elif spec.kind == "ETDRS":
            q = QUADRANTS.index(name[0])
            ring = RINGS.index({"I": "inner", "E": "external"}[name[1]])
            hit = (sector == q) & (zone == ring + 1)
        elif spec.kind == "IE":
            hit = zone == RINGS.index(name) + 1
        else:
            hit = sector == _HALF_NAMES.index(name)
        label[inside & hit] = name_id
    return RegionMask(spec=spec, radius=float(radius), origin=tuple(origin),
                      label_map=label, names=names)


def polar_region_rects(spec: GridSpec, theta_samples, r_samples):
    """Axis-aligned rectangles of every region in polar index space.

    Returns a list of (name, [(row0, row1, col0, col1), ...]) with
    continuous (float) boundaries; sectors wrapping through angle 0 yield
    two rectangles flagged as one logical region.  Assumes the transform's
    default start angle 0.
    """
    fr = spec.radii_fractions
    rows_full = (0.0, float(theta_samples))
    out = []

    def rows_of(lo, hi):
        scale = theta_samples / TWO_PI
        if lo < 0:
            return [((lo + TWO_PI) * scale, float(theta_samples)),
                    (0.0, hi * scale)]
        return [(lo * scale, hi * scale)]

    if spec.has_center:
        out.append(("C", [(rows_full[0], rows_full[1], 0.0, fr[0] * r_samples)]))
        ring_cols = [(fr[i] * r_samples, fr[i + 1] * r_samples)
                     for i in range(len(fr) - 1)]
    else:
        ring_cols = [(0.0, fr[0] * r_samples)]

    if spec.kind == "ETDRS":
        spans = {name: (lo, hi) for name, lo, hi in spec.sector_spans()}
        for q in QUADRANTS:
            for ring_i, ring in enumerate(RINGS):
                name = q + ring[0].upper()
                c0, c1 = ring_cols[ring_i]
                rects = [(r0, r1, c0, c1) for r0, r1 in rows_of(*spans[q])]
                out.append((name, rects))
    elif spec.kind == "IE":
        for ring_i, ring in enumerate(RINGS):
            c0, c1 = ring_cols[ring_i]
            out.append((ring, [(rows_full[0], rows_full[1], c0, c1)]))
    else:
        c0, c1 = ring_cols[0]
        for name, lo, hi in spec.sector_spans():
            out.append((name, [(r0, r1, c0, c1) for r0, r1 in rows_of(lo, hi)]))
    return out


def _axis_overlap(lo, hi, n):
    """Weight of each unit cell [i, i+1) inside the interval [lo, hi)."""
    i = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(hi, i + 1.0) - np.maximum(lo, i), 0.0, 1.0)


@dataclass
class RegionMeans:
    """Per-region means of a polar-domain map, in reporting order."""

    spec: GridSpec
    by_name: dict

    @property
    def center(self):
        return self.by_name.get("C")

    def matrix(self) -> np.ndarray:
        """Sector x ring matrix (4x2 for ETDRS); the center disk is
        reported separately through `.center`."""
        if self.spec.kind == "ETDRS":
            return np.array([[self.by_name[q + r[0].upper()] for r in RINGS]
                             for q in QUADRANTS])
        if self.spec.kind == "IE":
            return np.array([[self.by_name[r] for r in RINGS]])
        return np.array([[self.by_name[n]] for n in _HALF_NAMES])


def region_pool(pmap, spec: GridSpec) -> RegionMeans:
    """Mean of a polar map over each region rectangle.

    Fractional rows/columns at rectangle boundaries contribute by covered
    area, so pooled values are stable across map resolutions.  `pmap` is a
    (theta, r) array (a `tensor.Tensor` is unwrapped).
    """
    data = np.asarray(getattr(pmap, "data", pmap), dtype=np.float64)
    if data.ndim != 2:
        raise ConfigError(f"region_pool expects a 2-D map, got {data.shape}")
    H, W = data.shape
    means = {}
    for name, rects in polar_region_rects(spec, H, W):
        acc = 0.0
        area = 0.0
        for r0, r1, c0, c1 in rects:
            wr = _axis_overlap(r0, r1, H)
            wc = _axis_overlap(c0, c1, W)
            acc += wr @ data @ wc
            area += wr.sum() * wc.sum()
        if area <= 0.0:
            raise ConfigError(f"region {name} is empty at {H}x{W}")
        means[name] = acc / area
    return RegionMeans(spec=spec, by_name=means)


# ---------------------------------------------------------------------------
# clinical prior weights

@dataclass
class PriorMatrix:
    """Per-projection sector-by-ring weight grids (4x2 for ETDRS).

    Weights default to 1 (neutral); the center disk always gates at 1.
    """

    weights: dict

    def __post_init__(self):
        validate_prior(self)

    @classmethod
    def neutral(cls) -> "PriorMatrix":
        return cls({p: np.ones((4, 2), dtype=np.float32) for p in PROJECTIONS})

    def for_projection(self, name) -> np.ndarray:
        return self.weights[name]


def validate_prior(prior: PriorMatrix):
    for proj in PROJECTIONS:
        w = np.asarray(prior.weights.get(proj))
        if w.shape != (4, 2):
            raise ConfigError(f"prior for {proj} must be 4x2, got {w.shape}")
        if not np.all(np.isfinite(w)) or (w < 0).any():
            raise ConfigError(f"prior weights for {proj} must be finite and >= 0")
        prior.weights[proj] = w.astype(np.float32)


def load_prior(path) -> PriorMatrix:
    """Read the prior file: JSON {"SVC": [[..4x2..]], "DVC": ..., "CC": ...}.

    Projections missing from the file default to all-ones.
    """
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    weights = {}
    for proj in PROJECTIONS:
        if proj in raw:
            weights[proj] = np.asarray(raw[proj], dtype=np.float32)
        else:
            weights[proj] = np.ones((4, 2), dtype=np.float32)
    return PriorMatrix(weights)


def prior_gate_map(weights, theta_samples, r_samples,
                   spec: GridSpec = None) -> np.ndarray:
    """Paint sector/ring weights onto a (theta, r) gating map.

    Nearest upsampling in region-aligned form: every polar pixel takes the
    weight of the region containing its bin center; the center disk (and
    anything outside the grid) gates at 1.
    """
    spec = spec or GridSpec("ETDRS")
    weights = np.asarray(weights, dtype=np.float32)
    n_sectors = len(spec.sector_names())
    if weights.shape != (n_sectors, len(spec.radii_fractions) - 1 if spec.has_center else 1):
        raise ConfigError(f"prior shape {weights.shape} does not match grid {spec.kind}")
    theta = TWO_PI * (np.arange(theta_samples) + 0.5) / theta_samples
    radius = (np.arange(r_samples) + 0.5) / r_samples
    sector = _sector_index(spec, theta)
    zone = _ring_index(spec, radius, 1.0)
    gate = np.ones((theta_samples, r_samples), dtype=np.float32)
    ring_of_zone = zone - 1 if spec.has_center else zone
    valid_cols = ring_of_zone >= 0
    gate[:, valid_cols] = weights[sector[:, None],
                                  ring_of_zone[None, valid_cols]]
    return gate
