"""Training objectives and their gradients.

* weighted cross-entropy with a per-voxel distance weight map
* NGCC / ZNGCC: cosine similarity of image gradient fields (ZNGCC mean-
  subtracts each field first)
* reconstruction loss: NGCC between each input image and the mean
  projection of the bone-max probability map, for both views
* total loss: mean of the two terms
* content loss: the ZNGCC analogue used for style-transfer consistency

Functions ending in ``_grad`` return ``(value, gradient)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .grid import as_array
from .projection import ViewAxis, project_prediction_array, project_prediction_backward

NORM_EPS = 1e-8
LOG_CLAMP = 1e-12

_SOBEL_X = np.array([[1, 0, -1], [2, 0, -2], [1, 0, -1]], dtype=np.float64) / -8.0


@dataclass(frozen=True)
class GradientPair:
    gx: np.ndarray  # along columns
    gy: np.ndarray  # along rows


def _diff(a: np.ndarray, axis: int) -> np.ndarray:
    a = np.moveaxis(a, axis, 0)
    out = np.empty_like(a)
    out[1:-1] = (a[2:] - a[:-2]) / 2
    out[0] = a[1] - a[0]
    out[-1] = a[-1] - a[-2]
    return np.moveaxis(out, 0, axis)


def _diff_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    """Transpose of :func:`_diff` applied to ``g``."""
    g = np.moveaxis(g, axis, 0)
    out = np.zeros_like(g)
    out[2:] += g[1:-1] / 2
    out[:-2] -= g[1:-1] / 2
    out[1] += g[0]
    out[0] -= g[0]
    out[-1] += g[-1]
    out[-2] -= g[-1]
    return np.moveaxis(out, 0, axis)


def _sobel(a: np.ndarray, axis: int, adjoint: bool = False) -> np.ndarray:
    k = _SOBEL_X if axis == 1 else _SOBEL_X.T
    if adjoint:
        k = k[::-1, ::-1]
    return ndimage.correlate(a, k, mode="constant")


def _apply(img: np.ndarray, axis: int, operator: str) -> np.ndarray:
    if operator == "central":
        return _diff(img, axis)
    if operator == "sobel":
        return _sobel(img, axis)
    raise ValueError(f"unknown gradient operator {operator!r}")


def _apply_adjoint(g: np.ndarray, axis: int, operator: str) -> np.ndarray:
    return _diff_adjoint(g, axis) if operator == "central" else _sobel(g, axis, adjoint=True)


def image_gradients(img, operator: str = "central") -> GradientPair:
    """Central differences inside, one-sided at the border (``operator="sobel"`` optional)."""
    a = np.asarray(as_array(img))
    if a.ndim != 2 or min(a.shape) < 2:
        raise ValueError(f"image needs at least 2 rows and 2 columns, got {a.shape}")
    a = a.astype(np.float64) if a.dtype != np.float64 else a
    return GradientPair(_apply(a, 1, operator), _apply(a, 0, operator))


def _cosine_grad(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """cos(a, b) and d cos / d a; zero (with zero gradient) when either norm < eps."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < NORM_EPS or nb < NORM_EPS:
        return 0.0, np.zeros_like(a)
    cos = float((a * b).sum() / (na * nb))
    return cos, b / (na * nb) - cos * a / (na * na)


def _check_pair(i1, i2) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(as_array(i1), dtype=np.float64), np.asarray(as_array(i2), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _gcc_grad(i1, i2, zero_mean: bool, operator: str) -> tuple[float, np.ndarray]:
    a, b = _check_pair(i1, i2)
    total, grad = 0.0, np.zeros_like(a)
    for axis in (1, 0):
        ga, gb = _apply(a, axis, operator), _apply(b, axis, operator)
        if zero_mean:
            ga, gb = ga - ga.mean(), gb - gb.mean()
        cos, dcos = _cosine_grad(ga, gb)
        if zero_mean:
            dcos = dcos - dcos.mean()
        total += cos / 2
        grad += _apply_adjoint(dcos, axis, operator) / 2
    return total, grad


def ngcc_grad(i1, i2, operator: str = "central") -> tuple[float, np.ndarray]:
    """NGCC value and its gradient with respect to ``i1``."""
    return _gcc_grad(i1, i2, False, operator)


def ngcc(i1, i2, operator: str = "central") -> float:
    return ngcc_grad(i1, i2, operator)[0]


def zngcc(i1, i2, operator: str = "central") -> float:
    return _gcc_grad(i1, i2, True, operator)[0]


# ---------------------------------------------------------------- supervised term


def weighted_cross_entropy_grad(prob, labels, dwm) -> tuple[float, np.ndarray]:
    """Mean over voxels of -DWM * log p_label, and its gradient w.r.t. ``prob``."""
    p = np.asarray(as_array(prob))
    lab = np.asarray(as_array(labels))
    w = np.asarray(as_array(dwm))
    if w.ndim == 4:
        w = w[0]
    if p.ndim != 4 or p.shape[1:] != lab.shape or w.shape != lab.shape:
        raise ValueError(f"shape mismatch: prob {p.shape}, labels {lab.shape}, dwm {w.shape}")
    if lab.size and lab.max() >= p.shape[0]:
        raise ValueError("label exceeds the number of probability channels")
    n = lab.size
    p_true = np.take_along_axis(p, lab[None].astype(np.intp), 0)[0]
    clamped = np.maximum(p_true, LOG_CLAMP)
    value = float(-(w * np.log(clamped)).sum(dtype=np.float64) / n)
    g_true = np.where(p_true > LOG_CLAMP, -w / (n * clamped), 0.0).astype(p.dtype)
    grad = np.zeros_like(p)
    np.put_along_axis(grad, lab[None].astype(np.intp), g_true[None], 0)
    return value, grad


def weighted_cross_entropy(prob, labels, dwm) -> float:
    return weighted_cross_entropy_grad(prob, labels, dwm)[0]


def weighted_cross_entropy_logit_grad(prob, labels, dwm) -> np.ndarray:
    """Gradient of the weighted cross-entropy w.r.t. the softmax logits.

    Equals DWM / N * (p - q); unlike the chain through ``prob`` it stays
    informative when the softmax underflows below the log clamp.
    """
    p = np.asarray(as_array(prob))
    lab = np.asarray(as_array(labels)).astype(np.intp)
    w = np.asarray(as_array(dwm))
    if w.ndim == 4:
        w = w[0]
    g = p.copy()
    np.put_along_axis(g, lab[None], np.take_along_axis(p, lab[None], 0) - 1, 0)
    return (g * (w / lab.size)).astype(p.dtype)


# ---------------------------------------------------------------- reconstruction term


def reconstruction_loss_grad(prob, i_ap, i_lat, operator: str = "central") -> tuple[float, np.ndarray]:
    p = np.asarray(as_array(prob))
    value, grad = 1.0, np.zeros_like(p)
    for axis, img in ((ViewAxis.AP, i_ap), (ViewAxis.LAT, i_lat)):
        img = np.asarray(as_array(img))
        drr = project_prediction_array(p, axis)
        if drr.shape != img.shape:
            raise ValueError(f"{axis.name} image {img.shape} does not match projection {drr.shape}")
        # NGCC is symmetric, so differentiate it with the DRR in first position
        cc, g_drr = ngcc_grad(drr, img, operator)
        value -= cc / 2
        grad -= project_prediction_backward(p, axis, g_drr / 2)
    return value, grad


def reconstruction_loss(prob, i_ap, i_lat, operator: str = "central") -> float:
    return reconstruction_loss_grad(prob, i_ap, i_lat, operator)[0]


def total_loss_grad(prob, labels, dwm, i_ap, i_lat, use_dwm: bool = True,
                    use_reconstruction: bool = True) -> tuple[float, np.ndarray, dict]:
    """Combined objective; returns (value, d/d prob, {"ce": ..., "reconst": ...}).

    ``use_dwm=False`` replaces the weight map by ones; ``use_reconstruction=False``
    makes the loss the cross-entropy alone.
    """
    p = np.asarray(as_array(prob))
    w = as_array(dwm) if use_dwm else np.ones(p.shape[1:])
    ce, g_ce = weighted_cross_entropy_grad(p, labels, w)
    if not use_reconstruction:
        return ce, g_ce, {"ce": ce, "reconst": None}
    rec, g_rec = reconstruction_loss_grad(p, i_ap, i_lat)
    return (ce + rec) / 2, (g_ce + g_rec) / 2, {"ce": ce, "reconst": rec}


def total_loss_logit_grad(prob, labels, dwm, i_ap, i_lat, use_dwm: bool = True,
                          use_reconstruction: bool = True) -> tuple[float, np.ndarray | None, np.ndarray, dict]:
    """Training form of :func:`total_loss_grad`.

    Returns (value, grad w.r.t. prob or None, grad w.r.t. logits, parts):
    the cross-entropy part is expressed on the logits, the reconstruction
    part on the probabilities.
    """
    p = np.asarray(as_array(prob))
    w = as_array(dwm) if use_dwm else np.ones(p.shape[1:])
    ce = weighted_cross_entropy(p, labels, w)
    g_logits = weighted_cross_entropy_logit_grad(p, labels, w)
    if not use_reconstruction:
        return ce, None, g_logits, {"ce": ce, "reconst": None}
    rec, g_rec = reconstruction_loss_grad(p, i_ap, i_lat)
    return (ce + rec) / 2, g_rec / 2, g_logits / 2, {"ce": ce, "reconst": rec}


def total_loss(prob, labels, dwm, i_ap, i_lat, **toggles) -> float:
    return total_loss_grad(prob, labels, dwm, i_ap, i_lat, **toggles)[0]


def content_loss(ia, ib, ic, id_) -> float:
    return 1.0 - 0.5 * (zngcc(ia, ib) + zngcc(ic, id_))

