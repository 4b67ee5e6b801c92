"""Finite-difference verification of every hand-written backward pass.

Each suite compares analytic gradients with 64-bit central differences at
randomly chosen coordinates. Functions are looked up through their modules
at call time, so a monkeypatched (corrupted) backward is caught by the
suites that depend on it.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from . import losses, network, projection
from .network import ArchSpec

TOLERANCE = 1e-4
STEP = 1e-5
FLOOR = 1e-6  # relative errors use max(|analytic|, |numeric|, FLOOR) as scale


def rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), FLOOR)


def _central(f, flat, i, h):
    old = flat[i]
    flat[i] = old + h
    fp = f()
    flat[i] = old - h
    fm = f()
    flat[i] = old
    return fp, fm


_RETRIES = {"count": 0}


def fd_errors(f, x: np.ndarray, analytic: np.ndarray, rng, count: int, h: float = STEP) -> list[float]:
    """Relative errors at ``count`` random coordinates of ``x`` (perturbed in place, then restored).

    The network losses are only piecewise smooth (ReLU, bone max), so a
    step can straddle a kink. A mismatching coordinate is retried with a
    10x and 100x smaller step; a wrong backward mismatches at every step.
    """
    errs = []
    flat, grad = x.reshape(-1), analytic.reshape(-1)
    for i in rng.choice(flat.size, size=min(count, flat.size), replace=False):
        for step in (h, h / 10, h / 100):
            old = flat[i]
            flat[i] = old + step
            fp = f()
            flat[i] = old - step
            fm = f()
            flat[i] = old
            err = rel_err(grad[i], (fp - fm) / (2 * step))
            if err < TOLERANCE:
                break
            _RETRIES["count"] += 1
        errs.append(err)
    return errs


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(margin, 1.0, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def _random_prob(rng, shape):
    # mild logits keep p away from 0, where the log term makes differences inaccurate
    return network.softmax(rng.normal(0, 0.7, shape))


def _smooth_image(rng, n):
    r, c = np.mgrid[:n, :n] / n
    return np.sin(3 * r + rng.uniform(0, 3)) * np.cos(2 * c + rng.uniform(0, 3)) + 0.1 * rng.random((n, n))


# ---------------------------------------------------------------- suites


def suite_conv3d(rng, stride: int):
    x = rng.normal(size=(2, 6, 6, 6)) if stride == 1 else rng.normal(size=(2, 8, 8, 8))
    w, b = rng.normal(size=(3, 2, 3, 3, 3)), rng.normal(size=3)
    out = network.conv3d_forward(x, w, b, stride)
    c = rng.normal(size=out.shape)
    gx, gw, gb = network.conv3d_backward(x, w, c, stride)
    f = lambda: float((network.conv3d_forward(x, w, b, stride) * c).sum())
    return (fd_errors(f, x, gx, rng, 20) + fd_errors(f, w, gw, rng, 20) + fd_errors(f, b, gb, rng, 3))


def suite_conv_transpose3d(rng):
    x, w, b = rng.normal(size=(3, 4, 4, 4)), rng.normal(size=(3, 2, 2, 2, 2)), rng.normal(size=2)
    c = rng.normal(size=(2, 8, 8, 8))
    gx, gw, gb = network.conv_transpose3d_backward(x, w, c)
    f = lambda: float((network.conv_transpose3d_forward(x, w, b) * c).sum())
    return fd_errors(f, x, gx, rng, 20) + fd_errors(f, w, gw, rng, 20) + fd_errors(f, b, gb, rng, 2)


def suite_relu(rng):
    errs = []
    for leak in (0.0, 0.1):
        x = _away_from_zero(rng, (2, 4, 4, 4))
        c = rng.normal(size=x.shape)
        g = network.relu_backward(network.relu(x, leak), c, leak)
        errs += fd_errors(lambda: float((network.relu(x, leak) * c).sum()), x, g, rng, 30)
    return errs


def suite_instance_norm(rng):
    x = rng.normal(size=(3, 4, 4, 4))
    gain, shift = rng.normal(size=3), rng.normal(size=3)
    c = rng.normal(size=x.shape)
    _, x_hat, inv_std = network.instance_norm(x, gain, shift)
    gx, gg, gs = network.instance_norm_backward(x_hat, inv_std, gain, c)
    f = lambda: float((network.instance_norm(x, gain, shift)[0] * c).sum())
    return fd_errors(f, x, gx, rng, 30) + fd_errors(f, gain, gg, rng, 3) + fd_errors(f, shift, gs, rng, 3)


def suite_softmax_ce(rng):
    """Softmax followed by DWM-weighted CE, through both gradient routes."""
    z = rng.normal(0, 1.5, (5, 6, 6, 6))
    labels = rng.integers(0, 5, (6, 6, 6))
    dwm = rng.uniform(1, 9, (6, 6, 6))
    f = lambda: losses.weighted_cross_entropy(network.softmax(z), labels, dwm)
    p = network.softmax(z)
    fused = losses.weighted_cross_entropy_logit_grad(p, labels, dwm)
    _, g_prob = losses.weighted_cross_entropy_grad(p, labels, dwm)
    chained = network.softmax_backward(p, g_prob)
    return fd_errors(f, z, fused, rng, 30) + fd_errors(f, z, chained, rng, 30)


def suite_ngcc(rng, operator: str = "central"):
    i1, i2 = _smooth_image(rng, 8), _smooth_image(rng, 8)
    _, g = losses.ngcc_grad(i1, i2, operator)
    return fd_errors(lambda: losses.ngcc(i1, i2, operator), i1, g, rng, 40)


def suite_project_prediction(rng):
    errs = []
    for axis in projection.ViewAxis:
        prob = _random_prob(rng, (5, 6, 6, 6))
        c = rng.normal(size=(6, 6))
        g = projection.project_prediction_backward(prob, axis, c)
        f = lambda: float((projection.project_prediction_array(prob, axis) * c).sum())
        errs += fd_errors(f, prob, g, rng, 20)
    return errs


def _phantom_drrs(rng, n=8):
    from .phantom import PhantomSpec, generate_phantom

    vol, labels = generate_phantom(PhantomSpec(size=2 * n, seed=int(rng.integers(1 << 31))))
    v = vol.data[0].astype(np.float64).reshape(n, 2, n, 2, n, 2).mean(axis=(1, 3, 5))
    lab = labels.data[::2, ::2, ::2]
    ap = projection.drr_array(v, projection.ViewAxis.AP)
    lat = projection.drr_array(v, projection.ViewAxis.LAT)
    return ap, lat, lab


def suite_reconstruction_loss(rng):
    ap, lat, _ = _phantom_drrs(rng)
    prob = _random_prob(rng, (5, 8, 8, 8))
    _, g = losses.reconstruction_loss_grad(prob, ap, lat)
    return fd_errors(lambda: losses.reconstruction_loss(prob, ap, lat), prob, g, rng, 40)


def suite_total_loss(rng):
    ap, lat, labels = _phantom_drrs(rng)
    dwm = rng.uniform(1, 9, labels.shape)
    prob = _random_prob(rng, (5, 8, 8, 8))
    _, g, _ = losses.total_loss_grad(prob, labels, dwm, ap, lat)
    errs = fd_errors(lambda: losses.total_loss(prob, labels, dwm, ap, lat), prob, g, rng, 30)
    # training form: split gradient, prob part chained through the softmax
    z = rng.normal(0, 1.5, (5, 8, 8, 8))
    p = network.softmax(z)
    _, g_prob, g_logits, _ = losses.total_loss_logit_grad(p, labels, dwm, ap, lat)
    g_z = network.softmax_backward(p, g_prob) + g_logits
    errs += fd_errors(lambda: losses.total_loss(network.softmax(z), labels, dwm, ap, lat), z, g_z, rng, 30)
    return errs


def suite_network(rng, coords: int = 60):
    """Whole network plus total loss at S=8, L=2, C0=2 in 64-bit."""
    spec = ArchSpec(input_side=8, levels=2, base_channels=2)
    params = network.init_params(spec, int(rng.integers(1 << 31)), np.float64)
    for name in params:
        if name.endswith((".b", ".shift", ".gain")):
            params[name] += rng.normal(0, 0.1, params[name].shape)
    ap, lat, labels = _phantom_drrs(rng)
    dwm = rng.uniform(1, 9, labels.shape)
    x = projection.epipolar_array(ap, lat)

    def f():
        prob, _ = network.forward(spec, params, x, keep_tape=False)
        return losses.total_loss(prob, labels, dwm, ap, lat)

    prob, tape = network.forward(spec, params, x)
    _, g_prob, g_logits, _ = losses.total_loss_logit_grad(prob, labels, dwm, ap, lat)
    grads = network.backward(tape, g_prob, grad_logits=g_logits)
    names = list(params)
    picks = rng.choice(len(names), size=coords)
    errs = []
    for k in picks:
        name = names[k]
        errs += fd_errors(f, params[name], grads[name], rng, 1)
    # directional derivative along a random direction in the full parameter space
    direction = {k: rng.normal(size=v.shape) for k, v in params.items()}
    norm = np.sqrt(sum(float((d * d).sum()) for d in direction.values()))
    direction = {k: d / norm for k, d in direction.items()}  # unit length keeps the probe off kinks
    analytic = sum(float((grads[k] * direction[k]).sum()) for k in params)

    def shifted(t):
        for k in params:
            params[k] += t * direction[k]
        val = f()
        for k in params:
            params[k] -= t * direction[k]
        return val

    errs.append(rel_err(analytic, (shifted(STEP) - shifted(-STEP)) / (2 * STEP)))
    return errs


SUITES = {
    "conv3d_stride1": lambda rng: suite_conv3d(rng, 1),
    "conv3d_stride2": lambda rng: suite_conv3d(rng, 2),
    "conv_transpose3d": suite_conv_transpose3d,
    "relu": suite_relu,
    "instance_norm": suite_instance_norm,
    "softmax_ce": suite_softmax_ce,
    "ngcc": suite_ngcc,
    "ngcc_sobel": lambda rng: suite_ngcc(rng, "sobel"),
    "project_prediction": suite_project_prediction,
    "reconstruction_loss": suite_reconstruction_loss,
    "total_loss": suite_total_loss,
    "network": suite_network,
}


def run(seed: int = 0, suites=None, tolerance: float = TOLERANCE) -> dict:
    """Run the suites; failures (including exceptions) become report entries."""
    report = {"seed": seed, "tolerance": tolerance, "step": STEP, "suites": {}}
    t0 = time.perf_counter()
    for name in suites or SUITES:
        rng = np.random.default_rng([seed, list(SUITES).index(name)])
        t = time.perf_counter()
        _RETRIES["count"] = 0
        try:
            errs = SUITES[name](rng)
            worst = float(max(errs))
            entry = {"max_rel_err": worst, "checked": len(errs), "passed": bool(worst < tolerance)}
        except Exception as exc:  # a crashing backward is a failed suite, not a crashed harness
            entry = {"max_rel_err": None, "checked": 0, "passed": False, "error": repr(exc)}
        entry["small_step_retries"] = _RETRIES["count"]
        entry["seconds"] = time.perf_counter() - t
        report["suites"][name] = entry
    report["seconds"] = time.perf_counter() - t0
    report["passed"] = all(e["passed"] for e in report["suites"].values())
    return report


def write_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=1))
