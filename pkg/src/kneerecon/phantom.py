"""Procedural knee phantoms and rotation augmentation.

Bones are unions of simple primitives placed in normalized coordinates
(fractions of the volume side): a femur shaft with two condyles on top, a
tibia shaft with a plateau below, a thin fibula lateral to the tibia and a
small patella in front of the femoral condyles (low d1 is anterior).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import LabelVolume, Volume, as_array

FEMUR, PATELLA, TIBIA, FIBULA = 1, 2, 3, 4
CORTICAL_RIM = 0.15
MAX_ROTATION_DEG = 45.0
AUGMENT_RANGE_DEG = 5.0


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 32
    seed: int = 0
    bone_intensity: tuple[float, float] = (0.6, 0.9)
    soft_tissue: float = 0.2
    position_jitter: float = 0.03
    scale_jitter: float = 0.08

    def __post_init__(self):
        lo, hi = self.bone_intensity
        if self.size < 16:
            raise ValueError(f"phantom size must be >= 16 to place all four bones, got {self.size}")
        if not (0 <= lo <= hi <= 1 and 0 <= self.soft_tissue <= 1):
            raise ValueError("intensities must lie in [0, 1]")
        if not self.soft_tissue < lo:
            raise ValueError("soft tissue must be darker than every bone")
        if not (0 <= self.position_jitter < 0.1 and 0 <= self.scale_jitter < 0.3):
            raise ValueError("jitter ranges too large to keep bones separated")


def _capsule(coords, a, b, r):
    """Mask of points within ``r`` of segment a-b (coords: (3, ...) normalized)."""
    a = np.asarray(a)[:, None, None, None]
    ab = (np.asarray(b) - np.asarray(a[:, 0, 0, 0]))[:, None, None, None]
    t = np.clip(((coords - a) * ab).sum(0) / (ab * ab).sum(), 0.0, 1.0)
    d = coords - (a + t * ab)
    return (d * d).sum(0) <= r * r


def _ellipsoid(coords, c, radii):
    c = np.asarray(c)[:, None, None, None]
    radii = np.asarray(radii)[:, None, None, None]
    return (((coords - c) / radii) ** 2).sum(0) <= 1.0


def _bone_masks(size: int, rng: np.random.Generator, pos_jit: float, scale_jit: float) -> dict[int, np.ndarray]:
    idx = (np.indices((size,) * 3, dtype=np.float64) + 0.5) / size

    def jitter():
        return rng.uniform(-pos_jit, pos_jit, 3), rng.uniform(1 - scale_jit, 1 + scale_jit)

    masks = {}
    off, s = jitter()
    c = np.array([0.0, 0.52, 0.5]) + off
    shaft = _capsule(idx, c + [-0.2, -0.02, 0], [0.40 + off[0], c[1] - 0.02, c[2]], 0.12 * s)
    cond = _ellipsoid(idx, [0.42 + off[0], c[1], c[2] - 0.09 * s], [0.1 * s, 0.12 * s, 0.1 * s])
    cond |= _ellipsoid(idx, [0.42 + off[0], c[1], c[2] + 0.09 * s], [0.1 * s, 0.12 * s, 0.1 * s])
    masks[FEMUR] = shaft | cond

    off, s = jitter()
    c = np.array([0.62, 0.52, 0.46]) + off
    shaft = _capsule(idx, c, c + [0.6, 0, 0], 0.11 * s)
    plateau = _ellipsoid(idx, c, [0.06 * s, 0.15 * s, 0.19 * s])
    masks[TIBIA] = shaft | plateau

    off, s = jitter()
    c = np.array([0.72, 0.57, 0.73]) + off
    masks[FIBULA] = _capsule(idx, c, c + [0.5, 0, 0], 0.065 * s)

    off, s = jitter()
    c = np.array([0.36, 0.26, 0.5]) + off
    masks[PATELLA] = _ellipsoid(idx, c, [0.1 * s, 0.065 * s, 0.09 * s])
    return masks


def _boundary(mask: np.ndarray) -> np.ndarray:
    """Voxels of ``mask`` with at least one 6-neighbour outside it."""
    p = np.pad(mask, 1, constant_values=False)
    inner = np.ones_like(mask)
    for ax in range(3):
        for sh in (-1, 1):
            inner &= np.roll(p, sh, axis=ax)[1:-1, 1:-1, 1:-1]
    return mask & ~inner


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, LabelVolume]:
    """Return (intensity, labels) for one phantom; a pure function of ``spec``."""
    n = spec.size
    rng = np.random.default_rng(spec.seed)
    masks = _bone_masks(n, rng, spec.position_jitter, spec.scale_jitter)

    idx = (np.indices((n,) * 3, dtype=np.float64) + 0.5) / n
    body = _ellipsoid(idx, [0.5, 0.5, 0.5], [0.75, 0.46, 0.46])
    intensity = np.where(body, spec.soft_tissue, 0.0)
    labels = np.zeros((n,) * 3, dtype=np.uint8)
    lo, hi = spec.bone_intensity
    for cls in (FEMUR, TIBIA, FIBULA, PATELLA):
        m = masks[cls] & (labels == 0)
        labels[m] = cls
        intensity[m] = rng.uniform(lo, hi)
        intensity[_boundary(m)] += CORTICAL_RIM
    for cls in (FEMUR, PATELLA, TIBIA, FIBULA):
        if not (labels == cls).any():
            raise ValueError(f"size {n} too small to place bone class {cls}")
    return Volume(intensity.astype(np.float32)[None]), LabelVolume(labels)


# ---------------------------------------------------------------- rotation


def _axis_rotation(axis: int, deg: float) -> np.ndarray:
    t = np.deg2rad(deg)
    c, s = np.cos(t), np.sin(t)
    i, j = (axis + 1) % 3, (axis + 2) % 3  # cyclic order keeps every axis right-handed
    r = np.eye(3)
    r[i, i], r[i, j], r[j, i], r[j, j] = c, -s, s, c
    return r


def rotation_matrix(angles_deg) -> np.ndarray:
    """Forward rotation, applied about d0 first, then d1, then d2."""
    a0, a1, a2 = angles_deg
    return _axis_rotation(2, a2) @ _axis_rotation(1, a1) @ _axis_rotation(0, a0)


def source_coordinates(dims, angles_deg) -> np.ndarray:
    """Inverse-mapped sample positions, shape (3, d0, d1, d2)."""
    center = (np.asarray(dims, dtype=np.float64) - 1) / 2
    grid = np.indices(dims, dtype=np.float64).reshape(3, -1) - center[:, None]
    src = rotation_matrix(angles_deg).T @ grid + center[:, None]
    return src.reshape(3, *dims)


def _sample_nearest(a: np.ndarray, src: np.ndarray, fill) -> np.ndarray:
    idx = np.floor(src + 0.5).astype(np.int64)
    dims = np.array(a.shape)[:, None, None, None]
    if fill is None:
        idx = np.clip(idx, 0, dims - 1)
        return a[idx[0], idx[1], idx[2]]
    inside = ((idx >= 0) & (idx < dims)).all(0)
    idx = np.clip(idx, 0, dims - 1)
    return np.where(inside, a[idx[0], idx[1], idx[2]], fill).astype(a.dtype)


def _sample_trilinear(a: np.ndarray, src: np.ndarray, fill) -> np.ndarray:
    base = np.floor(src).astype(np.int64)
    frac = src - base
    dims = np.array(a.shape)[:, None, None, None]
    out = np.zeros(src.shape[1:], dtype=np.float64)
    for corner in np.ndindex(2, 2, 2):
        off = np.array(corner)[:, None, None, None]
        idx = base + off
        w = np.prod(np.where(off == 1, frac, 1 - frac), axis=0)
        inside = ((idx >= 0) & (idx < dims)).all(0)
        idx = np.clip(idx, 0, dims - 1)
        out += w * np.where(inside, a[idx[0], idx[1], idx[2]], fill)
    return out.astype(a.dtype)


def rotate_volume(v, angles_deg, interpolation: str = "trilinear"):
    """Rotate about the volume center by inverse-mapping resampling.

    Out-of-range reads take the volume minimum for intensity volumes; label
    volumes clamp to the nearest in-range voxel so no class is invented.
    """
    angles = tuple(float(a) for a in angles_deg)
    if any(abs(a) > MAX_ROTATION_DEG for a in angles):
        raise ValueError(f"rotation angles limited to +/-{MAX_ROTATION_DEG} deg, got {angles}")
    if interpolation not in ("trilinear", "nearest"):
        raise ValueError(f"unknown interpolation {interpolation!r}")
    is_labels = isinstance(v, LabelVolume)
    if is_labels and interpolation != "nearest":
        raise ValueError("label volumes must use nearest interpolation")
    data = as_array(v)
    if angles == (0.0, 0.0, 0.0):
        return type(v)(data.copy(), v.spacing_mm)
    chans = data[None] if is_labels else data
    src = source_coordinates(chans.shape[1:], angles)
    out = []
    for ch in chans:
        if is_labels:
            out.append(_sample_nearest(ch, src, None))
        elif interpolation == "nearest":
            out.append(_sample_nearest(ch, src, ch.min()))
        else:
            out.append(_sample_trilinear(ch, src, ch.min()))
    out = np.stack(out)
    return LabelVolume(out[0], v.spacing_mm) if is_labels else Volume(out, v.spacing_mm)


def draw_augmentation_angles(seed) -> tuple[float, float, float]:
    rng = np.random.default_rng(seed)
    return tuple(float(a) for a in rng.uniform(-AUGMENT_RANGE_DEG, AUGMENT_RANGE_DEG, 3))


def augment_case(intensity: Volume, labels: LabelVolume, seed) -> tuple[Volume, LabelVolume, tuple]:
    """Rotate intensity (trilinear) and labels (nearest) by the same random angles.

    Returns the two rotated volumes and the angles used.
    """
    angles = draw_augmentation_angles(seed)
    return (
        rotate_volume(intensity, angles, "trilinear"),
        rotate_volume(labels, angles, "nearest"),
        angles,
    )
