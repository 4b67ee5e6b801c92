"""Orthographic DRRs and the two-channel epipolar input volume.

AP rays run along d1 (image = (d0, d2)), lateral rays along d2
(image = (d0, d1)). Ray sums accumulate in float64 so that projecting a
replicated image gives the image back bit for bit.
"""

from __future__ import annotations

import enum

import numpy as np

from .grid import Image2D, Volume, as_array, spacing_of


class ViewAxis(enum.Enum):
    AP = 1
    LAT = 2

    @property
    def ray_axis(self) -> int:
        """Spatial axis (0-based over d0, d1, d2) integrated by the view."""
        return self.value

    @classmethod
    def parse(cls, name) -> "ViewAxis":
        if isinstance(name, cls):
            return name
        return cls[str(name).upper()]


def _single_channel(v) -> np.ndarray:
    a = as_array(v)
    if a.ndim == 4:
        if a.shape[0] != 1:
            raise ValueError(f"expected a single-channel volume, got {a.shape[0]} channels")
        a = a[0]
    if a.ndim != 3:
        raise ValueError(f"expected a 3D volume, got shape {a.shape}")
    return a


def drr_array(a: np.ndarray, axis: ViewAxis, mode: str = "mean", ray_step_mm: float = 1.0) -> np.ndarray:
    """Ray integral of a (d0, d1, d2) array; result keeps ``a``'s float precision."""
    axis = ViewAxis.parse(axis)
    out_dtype = np.float64 if a.dtype == np.float64 else np.float32
    if mode == "mean":
        return a.mean(axis=axis.ray_axis, dtype=np.float64).astype(out_dtype)
    if mode in ("attenuation", "atten"):
        path = a.sum(axis=axis.ray_axis, dtype=np.float64) * ray_step_mm
        return (-np.expm1(-path)).astype(out_dtype)
    raise ValueError(f"unknown DRR mode {mode!r}")


def render_drr(v, axis, mode: str = "mean") -> Image2D:
    """Render a DRR image from a single-channel volume."""
    axis = ViewAxis.parse(axis)
    a = _single_channel(v)
    s = spacing_of(v)
    in_plane = s[2] if axis is ViewAxis.AP else s[1]
    if not np.isclose(s[0], in_plane):
        raise ValueError(f"image rows ({s[0]} mm) and columns ({in_plane} mm) need equal spacing")
    return Image2D(drr_array(a, axis, mode, s[axis.ray_axis]), s[0])


# ---------------------------------------------------------------- prediction re-projection


def bone_max(prob: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Max over bone channels 1..4 and the winning channel (ties -> lowest)."""
    if prob.ndim != 4 or prob.shape[0] != 5:
        raise ValueError(f"expected a 5-channel probability volume, got shape {prob.shape}")
    arg = np.argmax(prob[1:], axis=0)
    return np.take_along_axis(prob[1:], arg[None], 0)[0], arg + 1


def project_prediction_array(prob: np.ndarray, axis) -> np.ndarray:
    return drr_array(bone_max(prob)[0], axis, "mean")


def project_prediction_backward(prob: np.ndarray, axis, grad_img: np.ndarray) -> np.ndarray:
    """Pull a gradient on the projected image back onto ``prob``.

    Each pixel's gradient is spread uniformly over its ray and routed to the
    arg-max bone channel of every voxel on it.
    """
    axis = ViewAxis.parse(axis)
    _, arg = bone_max(prob)
    n = prob.shape[1 + axis.ray_axis]
    per_voxel = np.expand_dims(np.asarray(grad_img, dtype=prob.dtype) / n, axis.ray_axis)
    per_voxel = np.broadcast_to(per_voxel, arg.shape)
    grad = np.zeros_like(prob)
    np.put_along_axis(grad, arg[None], per_voxel[None], 0)
    return grad


def project_prediction(prob, axis) -> Image2D:
    p = as_array(prob)
    s = spacing_of(prob)
    return Image2D(project_prediction_array(p, axis), s[0])


# ---------------------------------------------------------------- epipolar volume


def epipolar_array(ap: np.ndarray, lat: np.ndarray) -> np.ndarray:
    """(2, S, S, S) array: channel 0 repeats ``ap`` along d1, channel 1 repeats ``lat`` along d2."""
    if ap.ndim != 2 or ap.shape[0] != ap.shape[1]:
        raise ValueError(f"AP image must be square, got {ap.shape}")
    if lat.shape != ap.shape:
        raise ValueError(f"AP {ap.shape} and lateral {lat.shape} images differ in shape")
    s = ap.shape[0]
    out = np.empty((2, s, s, s), dtype=np.result_type(ap, lat))
    out[0] = ap[:, None, :]
    out[1] = lat[:, :, None]
    return out


def build_epipolar_volume(ap: Image2D, lat: Image2D) -> Volume:
    if not np.isclose(ap.pixel_mm, lat.pixel_mm):
        raise ValueError(f"pixel sizes differ: AP {ap.pixel_mm} mm, lateral {lat.pixel_mm} mm")
    return Volume(epipolar_array(ap.data, lat.data), (ap.pixel_mm,) * 3)
