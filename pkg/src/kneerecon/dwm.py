"""Distance Weight Map: near-surface emphasis for the cross-entropy loss."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .grid import Volume, as_array, spacing_of

_BORDER = 255  # pad value that differs from every class id


class EmptySurfaceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class DwmParams:
    gamma: float = 8.0
    sigma: float = 10.0  # voxels

    def __post_init__(self):
        if self.gamma < 0 or not self.sigma > 0:
            raise ValueError(f"need gamma >= 0 and sigma > 0, got {self}")


def surface_mask(labels: np.ndarray) -> np.ndarray:
    """Bone voxels whose 6-neighbourhood contains another label or the border."""
    lab = np.asarray(labels)
    p = np.pad(lab.astype(np.int16), 1, constant_values=_BORDER)
    core = p[1:-1, 1:-1, 1:-1]
    differs = np.zeros(lab.shape, dtype=bool)
    for ax in range(3):
        lo = [slice(1, -1)] * 3
        hi = [slice(1, -1)] * 3
        lo[ax] = slice(0, -2)
        hi[ax] = slice(2, None)
        differs |= (p[tuple(lo)] != core) | (p[tuple(hi)] != core)
    return differs & (lab != 0)


def surface_voxels(labels) -> Volume:
    return Volume(surface_mask(as_array(labels))[None].astype(np.float32), spacing_of(labels))


def distance_array(surface: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance (voxels) to the nearest nonzero voxel of ``surface``."""
    surf = np.asarray(surface) != 0
    if not surf.any():
        warnings.warn("no surface voxels: distances are infinite", EmptySurfaceWarning, stacklevel=2)
        return np.full(surf.shape, np.inf)
    return ndimage.distance_transform_edt(~surf)


def distance_transform(surface) -> Volume:
    a = as_array(surface)
    if a.ndim == 4:
        a = a[0]
    return Volume(distance_array(a)[None], spacing_of(surface))


def weight_array(d: np.ndarray, params: DwmParams = DwmParams()) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    if (d < 0).any():
        raise ValueError("distances must be non-negative")
    return 1.0 + params.gamma * np.exp(-d / params.sigma)


def weight_map(d, params: DwmParams = DwmParams()) -> Volume:
    return Volume(weight_array(as_array(d), params), spacing_of(d))


def distance_weight_map(labels, params: DwmParams = DwmParams()) -> Volume:
    """surface -> distance -> weight in one call."""
    lab = as_array(labels)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptySurfaceWarning)
        d = distance_array(surface_mask(lab))
    return Volume(weight_array(d, params)[None], spacing_of(labels))
