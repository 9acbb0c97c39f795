"""Class-activation maps, per-region importance and heatmap rendering.

The CAM of the fusion block is the cross-projection ("global") view.
Per-projection views use the same backward pass but read activations and
gradients at one branch's final (post-prior) feature map, which is the same
as masking the other branches' gradients out: the branches only meet at the
fusion concat, so their gradient paths are independent.

Region importance is pooled directly in polar index space over the grid
rectangles; the inverse mapping to Cartesian is for display only.  Raw
(unnormalized) values are always retained; unit-max normalization is a
display convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .geometry import PolarImage, from_polar
from .grids import GridSpec, PROJECTIONS, build_grid, region_pool

CASE_CLASS = 1


@dataclass
class ImportanceMatrix:
    """Sector-by-ring importance (4x2 for ETDRS) plus the center scalar."""

    matrix: np.ndarray
    center: float
    class_index: int
    grid: str = "ETDRS"
    normalization: str = "raw"

    def normalized(self) -> "ImportanceMatrix":
        """Unit-max display copy; the argmax cell maps to exactly 1."""
        peak = max(float(self.matrix.max()), self.center)
        scale = 1.0 / peak if peak > 0 else 1.0
        return ImportanceMatrix(matrix=self.matrix * scale,
                                center=self.center * scale,
                                class_index=self.class_index,
                                grid=self.grid, normalization="unit-max")

    def argmax_cell(self):
        """(sector index, ring index) of the strongest matrix cell."""
        return np.unravel_index(int(self.matrix.argmax()), self.matrix.shape)


@dataclass
class HeatmapImage:
    """Rendered Cartesian heatmap.

    `values` keeps the raw scalar field that was painted (so per-region
    means recover the source matrix exactly); `rgb` applies the blue-to-red
    colormap to the unit-max normalized field, black outside the disk.
    """

    rgb: np.ndarray
    values: np.ndarray
    mask: np.ndarray


def class_score(logits: T.Tensor, class_index) -> T.Tensor:
    """Summed per-sample class scores across the batch (per-sample grads
    stay separated because each row only feeds its own logit).

    class_index: an int applied to every row, "predicted" for each row's
    argmax class, or an (N,) array of per-row class indices.
    """
    n, k = logits.shape
    if isinstance(class_index, str):
        if class_index != "predicted":
            raise ConfigError(f"unknown class selector {class_index!r}")
        rows = logits.data.argmax(axis=1)
    else:
        rows = np.broadcast_to(np.asarray(class_index, dtype=np.int64), (n,))
        if rows.min() < 0 or rows.max() >= k:
            raise ConfigError(f"class index {class_index} out of range for {k} classes")
    mask = np.zeros((n, k), dtype=np.float32)
    mask[np.arange(n), rows] = 1.0
    return T.sum_all(T.mul(logits, T.Tensor(mask)))


def cam_from_activations(activations: T.Tensor) -> np.ndarray:
    """CAM = ReLU(sum_k alpha_k * A_k) with alpha the spatially averaged
    gradient; requires a backward pass to have populated the gradients."""
    if activations.grad is None:
        raise ConfigError("no cached gradients: run backward over a class score first")
    A = activations.data
    alpha = activations.grad.mean(axis=(2, 3))          # (N, K)
    cam = np.einsum("nk,nkhw->nhw", alpha, A)
    return np.maximum(cam, 0.0).astype(np.float32)


def grad_cam(model, inputs, class_index=CASE_CLASS, projection=None) -> np.ndarray:
    """Polar-domain CAM of shape (N, H', W') for one class.

    projection=None uses the last fusion block; naming a projection reads
    that branch's final feature map instead.
    """
    cams = grad_cam_all(model, inputs, class_index)
    return cams["fusion"] if projection is None else cams[projection]


def grad_cam_all(model, inputs, class_index=CASE_CLASS) -> dict:
    """One forward/backward pass; CAMs for the fusion block and each branch."""
    cache = model.forward(inputs)
    score = class_score(cache.logits, class_index)
    model.params.zero_grads()
    T.backward(score)
    out = {"fusion": cam_from_activations(cache.fusion)}
    for b, amap in enumerate(cache.branch_maps):
        out[PROJECTIONS[b]] = cam_from_activations(amap)
    return out


def region_importance(cams, spec: GridSpec = None, class_index=CASE_CLASS) -> ImportanceMatrix:
    """Average-pooled CAM per grid region, aggregated over samples.

    cams: (H, W) or (N, H, W) non-negative polar maps.  Aggregation is the
    mean of per-sample matrices, so it is order independent.
    """
    spec = spec or GridSpec("ETDRS")
    cams = np.asarray(cams, dtype=np.float64)
    if cams.ndim == 2:
        cams = cams[None]
    mats = []
    centers = []
    for cam in cams:
        pooled = region_pool(cam, spec)
        mats.append(pooled.matrix())
        centers.append(pooled.center if pooled.center is not None else 0.0)
    return ImportanceMatrix(matrix=np.mean(mats, axis=0),
                            center=float(np.mean(centers)),
                            class_index=class_index, grid=spec.kind)


def importance_report(matrices: dict, global_matrix: ImportanceMatrix) -> dict:
    """JSON-ready report: per-projection raw matrices plus the fusion-level
    center scalar."""
    return {
        "class": global_matrix.class_index,
        "grid": global_matrix.grid,
        "projections": {name: m.matrix.tolist() for name, m in matrices.items()},
        "center": global_matrix.center,
        "projection_centers": {name: m.center for name, m in matrices.items()},
        "global": global_matrix.matrix.tolist(),
    }


def _colormap(t: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Linear blue-to-red: t=0 -> (0,0,255), t=1 -> (255,0,0); black outside."""
    rgb = np.zeros(t.shape + (3,), dtype=np.uint8)
    tt = np.clip(t, 0.0, 1.0)
    rgb[..., 0] = np.rint(255.0 * tt).astype(np.uint8)
    rgb[..., 2] = np.rint(255.0 * (1.0 - tt)).astype(np.uint8)
    rgb[~mask] = 0
    return rgb


def matrix_to_cartesian(imp: ImportanceMatrix, radius, origin, out_size,
                        spec: GridSpec = None) -> HeatmapImage:
    """Paint each Cartesian grid region with its matrix value."""
    spec = spec or GridSpec(imp.grid)
    w, h = out_size
    mask = build_grid(spec, radius, origin, w, h)
    values = np.zeros((h, w), dtype=np.float32)
    fill = {"C": imp.center}
    names = spec.region_names()
    flat = imp.matrix.reshape(-1)
    fill.update({n: flat[i] for i, n in enumerate(x for x in names if x != "C")})
    for name in names:
        values[mask.pixels_of(name)] = fill[name]
    inside = mask.label_map > 0
    peak = float(values[inside].max()) if inside.any() else 0.0
    t = values / peak if peak > 0 else values
    return HeatmapImage(rgb=_colormap(t, inside), values=values, mask=inside)


def cam_to_cartesian(cam: np.ndarray, radius, origin, out_size) -> HeatmapImage:
    """Inverse-map a dense polar CAM and colorize it."""
    cam = np.asarray(cam, dtype=np.float32)
    if cam.ndim != 2:
        raise ConfigError(f"expected a single 2-D CAM, got shape {cam.shape}")
    peak = float(cam.max())
    unit = cam / peak if peak > 0 else cam
    pimg = PolarImage(pixels=unit, R=float(radius),
                      origin=(float(origin[0]), float(origin[1])))
    w, h = out_size
    img, mask = from_polar(pimg, w, h)
    values = img.plane * (peak if peak > 0 else 1.0)
    return HeatmapImage(rgb=_colormap(img.plane, mask), values=values, mask=mask)


def importance_to_cartesian(source, radius, origin, out_size,
                            spec: GridSpec = None) -> HeatmapImage:
    """Render either an ImportanceMatrix (region fill) or a dense CAM."""
    if isinstance(source, ImportanceMatrix):
        return matrix_to_cartesian(source, radius, origin, out_size, spec)
    return cam_to_cartesian(source, radius, origin, out_size)


def explain_samples(model, samples, class_index=CASE_CLASS,
                    spec: GridSpec = None, batch_size=16):
    """Aggregate importance over a sample list.

    Returns (per-projection {name: ImportanceMatrix}, global ImportanceMatrix,
    mean fusion CAM).  Aggregation is the mean of per-sample matrices.
    """
    from .training import _batch_tensors  # local import avoids a cycle

    spec = spec or GridSpec("ETDRS")
    norm = getattr(model, "normalization", None)
    per_proj_mats = {name: [] for name in PROJECTIONS[:model.config.branches]}
    per_proj_centers = {name: [] for name in per_proj_mats}
    fusion_mats, fusion_centers, fusion_cams = [], [], []
    for lo in range(0, len(samples), batch_size):
        idx = list(range(lo, min(lo + batch_size, len(samples))))
        inputs, _ = _batch_tensors(samples, idx, norm=norm)
        cams = grad_cam_all(model, inputs, class_index)
        for name in per_proj_mats:
            for cam in cams[name]:
                pooled = region_pool(cam, spec)
                per_proj_mats[name].append(pooled.matrix())
                per_proj_centers[name].append(pooled.center or 0.0)
        for cam in cams["fusion"]:
            pooled = region_pool(cam, spec)
            fusion_mats.append(pooled.matrix())
            fusion_centers.append(pooled.center or 0.0)
            fusion_cams.append(cam)
    projections = {
        name: ImportanceMatrix(matrix=np.mean(per_proj_mats[name], axis=0),
                               center=float(np.mean(per_proj_centers[name])),
                               class_index=class_index, grid=spec.kind)
        for name in per_proj_mats
    }
    global_imp = ImportanceMatrix(matrix=np.mean(fusion_mats, axis=0),
                                  center=float(np.mean(fusion_centers)),
                                  class_index=class_index, grid=spec.kind)
    return projections, global_imp, np.mean(fusion_cams, axis=0)
