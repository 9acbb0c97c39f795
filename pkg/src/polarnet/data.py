"""Synthetic OCTA-like data, dataset ingestion, subject folds and metrics.

The generator draws branching vessel trees as seeded random walks starting
on a ring around a synthetic FAZ.  Case subjects get their vessel density
multiplied by a configured factor inside configured grid regions, so the
discriminative region is known by construction and can be checked against
what the trained model reports.  It is a test fixture, not a biophysical
model.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DataError
from .geometry import CartesianImage, mirror_horizontal
from .grids import GridSpec, PROJECTIONS, build_grid
from .imageio import read_pgm, write_pgm

RING_SHORTHAND = {
    "inner": ("TI", "SI", "NI", "II"),
    "external": ("TE", "SE", "NE", "IE"),
}


@dataclass
class Subject:
    """One study participant; every eye shares the subject's label."""

    id: str
    label: int                      # 1 = case, 0 = control
    eyes: list = field(default_factory=list)  # (laterality, {proj: CartesianImage})


@dataclass
class SynthConfig:
    n_per_class: int = 20
    image_size: int = 256
    seed: int = 0
    laterality_mix: bool = True
    faz_radius: float = 18.0
    center_jitter: float = 5.0
    # Per-projection branch-count scale; CC is the densest plexus.
    density: dict = field(default_factory=lambda: {"SVC": 1.0, "DVC": 0.9, "CC": 1.3})
    # (projection, region, density multiplier); region names are grid names
    # plus the 'inner'/'external' ring shorthands.
    effects: list = field(default_factory=list)

    def __post_init__(self):
        if self.n_per_class < 1:
            raise ConfigError("need at least one subject per class")
        known = set(GridSpec("ETDRS").region_names()) | set(RING_SHORTHAND)
        for proj, region, mult in self.effects:
            if proj not in PROJECTIONS:
                raise ConfigError(f"unknown projection {proj!r}")
            if region not in known:
                raise ConfigError(f"unknown region {region!r}")
            if not 0.0 < mult <= 1.0:
                raise ConfigError(f"density multiplier must be in (0, 1], got {mult}")

    def to_dict(self):
        return {"n_per_class": self.n_per_class, "image_size": self.image_size,
                "seed": self.seed, "laterality_mix": self.laterality_mix,
                "faz_radius": self.faz_radius, "center_jitter": self.center_jitter,
                "density": dict(self.density),
                "effects": [list(e) for e in self.effects]}

    @classmethod
    def from_dict(cls, d) -> "SynthConfig":
        d = dict(d)
        d["effects"] = [tuple(e) for e in d.get("effects", [])]
        return cls(**d)


def _effect_regions(effects, proj):
    """{region name: multiplier} for one projection, shorthands expanded."""
    out = {}
    for p, region, mult in effects:
        if p != proj:
            continue
        for name in RING_SHORTHAND.get(region, (region,)):
            out[name] = min(out.get(name, 1.0), float(mult))
    return out


_SPLAT_CACHE = {}


def _splat_kernel(width):
    """Gaussian stamp for a vessel cross-section, cached on quantized width."""
    key = int(width * 16)
    kern = _SPLAT_CACHE.get(key)
    if kern is None:
        w = (key + 0.5) / 16.0
        rad = max(1, int(w + 0.5))
        ys, xs = np.ogrid[-rad:rad + 1, -rad:rad + 1]
        kern = np.exp(-(xs ** 2 + ys ** 2) / (2 * (w / 2.0) ** 2)).astype(np.float32)
        _SPLAT_CACHE[key] = kern
    return kern


def _draw_projection(rng, size, center, faz_radius, density, keep_prob):
    """One vessel-tree projection as a float image in [0, 1].

    keep_prob maps region ids to keep probabilities; splats landing in a
    suppressed region are dropped with the complementary probability, which
    is what 'density multiplier' means operationally.
    """
    img = np.zeros((size, size), dtype=np.float32)
    u0, v0 = center
    n_branches = int(rng.integers(24, 41) * density)
    walkers = []
    for _ in range(n_branches):
        ang = rng.uniform(0, 2 * np.pi)
        walkers.append((u0 + faz_radius * math.cos(ang),
                        v0 - faz_radius * math.sin(ang),
                        ang, rng.uniform(1.0, 3.0)))
    label_map, region_keep = keep_prob
    max_steps = size
    while walkers:
        x, y, heading, width = walkers.pop()
        for _ in range(max_steps):
            xi, yi = int(x + 0.5), int(y + 0.5)
            if not (1 <= xi < size - 1 and 1 <= yi < size - 1):
                break
            keep = 1.0
            if region_keep:
                keep = region_keep.get(label_map[yi, xi], 1.0)
            if keep >= 1.0 or rng.uniform() < keep:
                kern = _splat_kernel(width)
                rad = kern.shape[0] // 2
                y0, y1 = max(0, yi - rad), min(size, yi + rad + 1)
                x0, x1 = max(0, xi - rad), min(size, xi + rad + 1)
                img[y0:y1, x0:x1] += kern[y0 - yi + rad:y1 - yi + rad,
                                          x0 - xi + rad:x1 - xi + rad]
            # Drift mostly outward with angular noise; occasionally branch.
            heading += rng.normal(0.0, 0.25)
            radial = math.atan2(-(y - v0), x - u0)
            heading += 0.15 * math.sin(radial - heading)
            x += 1.6 * math.cos(heading)
            y -= 1.6 * math.sin(heading)
            width *= 0.995
            if rng.uniform() < 0.02 and len(walkers) < 3 * n_branches:
                walkers.append((x, y, heading + rng.choice((-0.7, 0.7)),
                                width * 0.8))
    img = gaussian_filter(img, sigma=0.8)
    peak = img.max()
    if peak > 0:
        img /= peak
    return np.clip(img, 0.0, 1.0)


def _subject_rng(seed, subject_index):
    # Derived per-subject streams keep generation order-independent.
    return np.random.default_rng(np.random.SeedSequence((seed, subject_index)))


def generate_subject(config: SynthConfig, subject_index, label) -> Subject:
    """Build one subject (single eye, three projections) in memory."""
    rng = _subject_rng(config.seed, subject_index)
    size = config.image_size
    c = (size - 1) / 2.0
    center = (c + rng.uniform(-config.center_jitter, config.center_jitter),
              c + rng.uniform(-config.center_jitter, config.center_jitter))
    laterality = "OD"
    if config.laterality_mix and rng.uniform() < 0.5:
        laterality = "OS"

    radius = min(center[0], center[1], size - 1 - center[0], size - 1 - center[1])
    mask = build_grid(GridSpec("ETDRS"), radius, center, size, size)
    images = {}
    for proj in PROJECTIONS:
        region_keep = {}
        if label == 1:
            for name, mult in _effect_regions(config.effects, proj).items():
                region_keep[mask.id_of(name)] = mult
        plane = _draw_projection(rng, size, center, config.faz_radius,
                                 config.density.get(proj, 1.0),
                                 (mask.label_map, region_keep))
        img = CartesianImage(plane, center=center, laterality="OD")
        if laterality == "OS":
            img = mirror_horizontal(img)
        images[proj] = img
    sid = f"subj{subject_index:03d}"
    return Subject(id=sid, label=label, eyes=[(laterality, images)])


def synth_generate(config: SynthConfig, out_dir) -> list:
    """Write a synthetic dataset to disk and return its subjects.

    Layout: <root>/<subject-id>/<eye>/{SVC,DVC,CC}.pgm + meta.json, with the
    ground-truth effect list in <root>/groundtruth.json.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    subjects = []
    n = config.n_per_class
    for i in range(2 * n):
        label = 1 if i < n else 0
        subj = generate_subject(config, i, label)
        subjects.append(subj)
        for laterality, images in subj.eyes:
            eye_dir = out / subj.id / laterality
            eye_dir.mkdir(parents=True, exist_ok=True)
            center = None
            for proj, img in images.items():
                write_pgm(eye_dir / f"{proj}.pgm", img.plane)
                center = img.center
            meta = {"label": "case" if subj.label == 1 else "control",
                    "laterality": laterality,
                    "center": [center[0], center[1]]}
            with open(eye_dir / "meta.json", "w", encoding="utf-8") as fh:
                json.dump(meta, fh, indent=2, sort_keys=True)
                fh.write("\n")
    with open(out / "groundtruth.json", "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return subjects


def load_dataset(root) -> list:
    """Read a dataset directory back into Subject records."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    subjects = []
    for subj_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        eyes = []
        label = None
        for eye_dir in sorted(p for p in subj_dir.iterdir() if p.is_dir()):
            meta_path = eye_dir / "meta.json"
            try:
                with open(meta_path, "r", encoding="utf-8") as fh:
                    meta = json.load(fh)
            except (OSError, json.JSONDecodeError) as exc:
                raise DataError(f"cannot read {meta_path}: {exc}") from exc
            label_here = {"case": 1, "control": 0}.get(meta.get("label"))
            if label_here is None:
                raise DataError(f"{meta_path}: label must be case/control")
            if label is None:
                label = label_here
            elif label != label_here:
                raise DataError(f"{subj_dir.name}: conflicting labels across eyes")
            center = tuple(float(c) for c in meta["center"])
            laterality = meta.get("laterality", "unknown")
            images = {}
            for proj in PROJECTIONS:
                path = eye_dir / f"{proj}.pgm"
                if not path.exists():
                    raise DataError(f"missing projection {path}")
                images[proj] = CartesianImage(read_pgm(path), center=center,
                                              laterality=laterality)
            eyes.append((laterality, images))
        if not eyes:
            continue
        subjects.append(Subject(id=subj_dir.name, label=label, eyes=eyes))
    if not subjects:
        raise DataError(f"no subjects found under {root}")
    return subjects


def kfold_split(subjects, k, seed):
    """Stratified subject-level folds.

    Subjects of each class are shuffled and dealt round-robin, so fold
    sizes differ by at most one subject per class and no subject appears
    twice.  Returns a list of k lists of subject ids.
    """
    if k < 2:
        raise ConfigError(f"need at least 2 folds, got {k}")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xF01D)))
    folds = [[] for _ in range(k)]
    for label in (1, 0):
        ids = sorted(s.id for s in subjects if s.label == label)
        if len(ids) < k:
            raise ConfigError(f"class {label} has {len(ids)} subjects; "
                              f"cannot stratify into {k} folds")
        rng.shuffle(ids)
        for i, sid in enumerate(ids):
            folds[i % k].append(sid)
    return folds


def metrics(y_true, y_score):
    """ACC / AUROC / Kappa for binary labels and scores in [0, 1].

    ACC and Kappa threshold at 0.5; AUROC is the rank statistic with ties
    counting one half.  A single-class truth vector has no ROC and raises.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    y_score = np.asarray(y_score, dtype=np.float64)
    if y_true.shape != y_score.shape or y_true.ndim != 1:
        raise ConfigError("y_true and y_score must be equal-length vectors")
    if y_score.size and (y_score.min() < 0.0 or y_score.max() > 1.0):
        raise ConfigError("scores must lie in [0, 1]")
    n_pos = int((y_true == 1).sum())
    n_neg = int((y_true == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUROC undefined: y_true contains a single class")

    y_pred = (y_score >= 0.5).astype(np.int64)
    acc = float((y_pred == y_true).mean())

    # Mann-Whitney form: average ranks handle ties as one half each.
    order = np.argsort(y_score, kind="mergesort")
    ranks = np.empty(y_score.size, dtype=np.float64)
    sorted_scores = y_score[order]
    i = 0
    while i < y_score.size:
        j = i
        while j + 1 < y_score.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    auroc = float((ranks[y_true == 1].sum() - n_pos * (n_pos + 1) / 2.0)
                  / (n_pos * n_neg))

    po = acc
    p_yes = ((y_pred == 1).mean() * (y_true == 1).mean())
    p_no = ((y_pred == 0).mean() * (y_true == 0).mean())
    pe = float(p_yes + p_no)
    kappa = 0.0 if pe == 1.0 else float((po - pe) / (1.0 - pe))
    return {"ACC": acc, "AUROC": auroc, "Kappa": kappa}
