"""Evaluation measures: 3D Dice, Chamfer distance, 2D projection protocol."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .dwm import surface_mask
from .grid import BONE_CLASSES, CLASS_NAMES, Image2D, Mesh, as_array, spacing_of
from .projection import ViewAxis


class EmptyPointSetError(ValueError):
    """Chamfer distance is undefined for an empty set (a failed reconstruction)."""


def dice(pred, gt, class_id: int) -> float:
    a, b = as_array(pred), as_array(gt)
    if a.shape != b.shape:
        raise ValueError(f"dims differ: {a.shape} vs {b.shape}")
    x, y = a == class_id, b == class_id
    total = int(x.sum()) + int(y.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((x & y).sum()) / total


def chamfer(a, b) -> float:
    """Symmetric mean nearest-neighbour distance between two point sets."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise EmptyPointSetError("chamfer distance of an empty point set")
    a, b = a.reshape(len(a), -1), b.reshape(len(b), -1)
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return 0.5 * (d_ab.mean() + d_ba.mean())


def surface_points_mm(labels, class_id: int) -> np.ndarray:
    """Centers (mm) of the boundary voxels of one class."""
    lab = as_array(labels)
    surf = surface_mask(np.where(lab == class_id, class_id, 0))
    return np.argwhere(surf) * np.asarray(spacing_of(labels))


def sample_mesh_points(mesh: Mesh, n: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface."""
    if mesh.is_empty:
        return np.zeros((0, 3))
    v = mesh.vertices[mesh.triangles]
    area = 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(area), size=n, p=area / area.sum())
    r1, r2 = rng.random(n), rng.random(n)
    flip = r1 + r2 > 1
    r1[flip], r2[flip] = 1 - r1[flip], 1 - r2[flip]
    t = v[tri]
    return t[:, 0] + r1[:, None] * (t[:, 1] - t[:, 0]) + r2[:, None] * (t[:, 2] - t[:, 0])


def mesh_chamfer(mesh: Mesh, gt_labels, samples: int | None = None) -> float:
    """Chamfer (mm) between a reconstructed bone mesh and the GT surface voxels."""
    pts = mesh.vertices if samples is None else sample_mesh_points(mesh, samples)
    return chamfer(pts, surface_points_mm(gt_labels, mesh.class_id))


# ---------------------------------------------------------------- 2D protocol


def project_mask(labels, class_id: int, axis) -> Image2D:
    axis = ViewAxis.parse(axis)
    lab = as_array(labels)
    mask = (lab == class_id).any(axis=axis.ray_axis)
    return Image2D(mask.astype(np.float32), spacing_of(labels)[0])


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """(row, col) of mask pixels with an 8-neighbour outside the mask."""
    m = np.asarray(mask) > 0
    p = np.pad(m, 1, constant_values=False)
    interior = np.ones_like(m)
    rows, cols = m.shape
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            interior &= p[1 + dr : 1 + dr + rows, 1 + dc : 1 + dc + cols]
    return np.argwhere(m & ~interior)


def dice_2d(pred: np.ndarray, gt: np.ndarray) -> float:
    x, y = np.asarray(pred) > 0, np.asarray(gt) > 0
    total = int(x.sum()) + int(y.sum())
    return 1.0 if total == 0 else 2.0 * int((x & y).sum()) / total


def chamfer_2d(pred: Image2D, gt: Image2D) -> float:
    return chamfer(boundary_pixels(pred.data) * pred.pixel_mm, boundary_pixels(gt.data) * gt.pixel_mm)


def evaluate_2d(pred, gt_masks: dict, requested=None) -> dict:
    """Compare projected predicted masks with GT masks.

    ``gt_masks`` maps (class_id, ViewAxis) to a binary Image2D; ``requested``
    lists the (class_id, view) pairs to score (defaults to every key of
    ``gt_masks``). A pair without a GT mask raises KeyError.
    """
    requested = list(gt_masks) if requested is None else [(c, ViewAxis.parse(v)) for c, v in requested]
    report = {}
    for cls, view in requested:
        if (cls, view) not in gt_masks:
            raise KeyError(f"no GT mask for class {cls} view {view.name}")
        gt = gt_masks[(cls, view)]
        pm = project_mask(pred, cls, view)
        if pm.dims != gt.dims:
            raise ValueError(f"projection {pm.dims} and GT mask {gt.dims} differ")
        entry = report.setdefault(CLASS_NAMES[cls], {"dice2d": {}, "chamfer2d_mm": {}})
        entry["dice2d"][view.name.lower()] = dice_2d(pm.data, gt.data)
        try:
            entry["chamfer2d_mm"][view.name.lower()] = chamfer_2d(pm, gt)
        except EmptyPointSetError:
            entry["chamfer2d_mm"][view.name.lower()] = None
    for entry in report.values():
        entry["dice2d_mean"] = float(np.mean(list(entry["dice2d"].values())))
        ch = [c for c in entry["chamfer2d_mm"].values() if c is not None]
        entry["chamfer2d_mm_mean"] = float(np.mean(ch)) if ch else None
    return report


def gt_masks_from_labels(labels, classes=BONE_CLASSES, views=(ViewAxis.AP, ViewAxis.LAT)) -> dict:
    return {(c, v): project_mask(labels, c, v) for c in classes for v in views}


# ---------------------------------------------------------------- full case


def evaluate_case(pred_labels, gt_labels, meshes: list[Mesh], chamfer_samples: int | None = None) -> dict:
    """Per-class 3D and 2D metrics for one reconstructed case plus bone averages."""
    gt2d = gt_masks_from_labels(gt_labels)
    rep2d = evaluate_2d(pred_labels, gt2d)
    out = {}
    for mesh in meshes:
        cls = mesh.class_id
        name = CLASS_NAMES[cls]
        try:
            ch = mesh_chamfer(mesh, gt_labels, chamfer_samples)
            failed = False
        except EmptyPointSetError:
            ch, failed = None, True
        out[name] = {
            "dice3d": dice(pred_labels, gt_labels, cls),
            "chamfer_mm": ch,
            "reconstruction_failed": failed,
            "dice2d": rep2d[name]["dice2d"],
            "chamfer2d_mm": rep2d[name]["chamfer2d_mm"],
        }
    out["background"] = {"dice3d": dice(pred_labels, gt_labels, 0)}
    out["bones_average"] = bones_average(out)
    return out


def bones_average(per_class: dict) -> dict:
    names = [CLASS_NAMES[c] for c in BONE_CLASSES]
    d = [per_class[n]["dice3d"] for n in names]
    ch = [per_class[n]["chamfer_mm"] for n in names if per_class[n]["chamfer_mm"] is not None]
    return {"dice3d": float(np.mean(d)), "chamfer_mm": float(np.mean(ch)) if ch else None}
