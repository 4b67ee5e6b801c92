"""3D encoder-decoder with skip connections, written directly in numpy.

Layout for ``levels = L`` and ``base_channels = C0`` (level l has C0 * 2**l
channels at side S / 2**l)::

    enc0: conv3 -> relu -> conv3 -> relu                      (skip 0)
    enc l (l >= 1): stride-2 conv3 -> relu, then two conv3 -> relu blocks
    dec l (l = L-2 .. 0): transposed conv2 (stride 2) -> concat skip l
                          -> conv3 -> relu -> conv3 -> relu
    head: conv1 -> softmax over 5 classes

Every op keeps what its backward pass needs in a plain dict (the tape).
All kernels loop over kernel offsets in a fixed order, so results are
deterministic for a given BLAS thread setting.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from itertools import product
from pathlib import Path

import numpy as np

Params = "OrderedDict[str, np.ndarray]"


@dataclass(frozen=True)
class ArchSpec:
    input_side: int = 32
    in_channels: int = 2
    num_classes: int = 5
    levels: int = 3
    base_channels: int = 8
    leak: float = 0.01  # negative-side slope of the activation; 0 is plain ReLU
    norm: str = "instance"  # "instance": per-channel normalization before each activation

    def __post_init__(self):
        if self.levels < 2 or self.base_channels < 2:
            raise ValueError("need levels >= 2 and base_channels >= 2")
        if self.norm not in ("none", "instance"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.input_side % 2 ** (self.levels - 1):
            raise ValueError(f"input_side {self.input_side} not divisible by 2**{self.levels - 1}")

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    def side(self, level: int) -> int:
        return self.input_side // 2**level


FULL_PRESET = ArchSpec(input_side=128, levels=5, base_channels=16)


# ---------------------------------------------------------------- kernels


def conv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1) -> np.ndarray:
    """Zero-padded ("same") cross-correlation; stride 2 halves each side.

    x: (Cin, D, H, W), w: (Cout, Cin, k, k, k), b: (Cout,).
    """
    cout, cin, k = w.shape[:3]
    if x.shape[0] != cin:
        raise ValueError(f"input has {x.shape[0]} channels, kernel expects {cin}")
    pad = k // 2
    xp = np.pad(x, ((0, 0),) + ((pad, pad),) * 3) if pad else x
    out_dims = tuple((n + 2 * pad - k) // stride + 1 for n in x.shape[1:])
    n_out = int(np.prod(out_dims))
    y = np.zeros((cout, n_out), dtype=np.result_type(x, w))
    for a, bb, c in product(range(k), repeat=3):
        xs = xp[:, a : a + stride * out_dims[0] : stride,
                bb : bb + stride * out_dims[1] : stride,
                c : c + stride * out_dims[2] : stride]
        y += w[:, :, a, bb, c] @ xs.reshape(cin, n_out)
    y += b[:, None]
    return y.reshape(cout, *out_dims)


def conv3d_backward(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray, stride: int = 1,
                    need_w: bool = True) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (grad_x, grad_w, grad_b) of :func:`conv3d_forward`."""
    cout, cin, k = w.shape[:3]
    if grad_out.shape[0] != cout:
        raise ValueError(f"grad_out has {grad_out.shape[0]} channels, expected {cout}")
    pad = k // 2
    xp = np.pad(x, ((0, 0),) + ((pad, pad),) * 3) if pad else x
    out_dims = grad_out.shape[1:]
    if out_dims != tuple((n + 2 * pad - k) // stride + 1 for n in x.shape[1:]):
        raise ValueError(f"grad_out shape {grad_out.shape} does not match forward output")
    n_out = int(np.prod(out_dims))
    g = grad_out.reshape(cout, n_out)
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w) if need_w else None
    for a, bb, c in product(range(k), repeat=3):
        sl = (slice(None), slice(a, a + stride * out_dims[0], stride),
              slice(bb, bb + stride * out_dims[1], stride),
              slice(c, c + stride * out_dims[2], stride))
        gxp[sl] += (w[:, :, a, bb, c].T @ g).reshape(cin, *out_dims)
        if need_w:
            gw[:, :, a, bb, c] = g @ xp[sl].reshape(cin, n_out).T
    gx = gxp[:, pad:-pad, pad:-pad, pad:-pad] if pad else gxp
    return np.ascontiguousarray(gx), gw, g.sum(axis=1)


def conv_transpose3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Kernel-2, stride-2 transposed convolution; w: (Cin, Cout, 2, 2, 2)."""
    cin, cout = w.shape[:2]
    if x.shape[0] != cin:
        raise ValueError(f"input has {x.shape[0]} channels, kernel expects {cin}")
    d, h, wd = x.shape[1:]
    xf = x.reshape(cin, -1)
    y = np.empty((cout, 2 * d, 2 * h, 2 * wd), dtype=np.result_type(x, w))
    for a, bb, c in product(range(2), repeat=3):
        y[:, a::2, bb::2, c::2] = (w[:, :, a, bb, c].T @ xf).reshape(cout, d, h, wd)
    y += b[:, None, None, None]
    return y


def conv_transpose3d_backward(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray,
                              need_w: bool = True) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    cin, cout = w.shape[:2]
    xf = x.reshape(cin, -1)
    gx = np.zeros_like(xf)
    gw = np.zeros_like(w) if need_w else None
    for a, bb, c in product(range(2), repeat=3):
        g = grad_out[:, a::2, bb::2, c::2].reshape(cout, -1)
        gx += w[:, :, a, bb, c] @ g
        if need_w:
            gw[:, :, a, bb, c] = xf @ g.T
    return gx.reshape(x.shape), gw, grad_out.reshape(cout, -1).sum(axis=1)


def relu(x: np.ndarray, leak: float = 0.0) -> np.ndarray:
    return np.maximum(x, 0) if leak == 0 else np.where(x > 0, x, leak * x)


def relu_backward(y: np.ndarray, grad: np.ndarray, leak: float = 0.0) -> np.ndarray:
    """Gradient through the activation given its output ``y``."""
    return np.where(y > 0, grad, leak * grad)


NORM_EPS = 1e-5


def instance_norm(x: np.ndarray, gain: np.ndarray, shift: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Normalize each channel over its voxels; returns (out, x_hat, inv_std)."""
    flat = x.reshape(x.shape[0], -1)
    mu = flat.mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(flat.var(axis=1, keepdims=True) + NORM_EPS)
    x_hat = ((flat - mu) * inv_std).astype(x.dtype)
    out = gain[:, None] * x_hat + shift[:, None]
    return out.reshape(x.shape), x_hat.reshape(x.shape), inv_std.astype(x.dtype)


def instance_norm_backward(x_hat: np.ndarray, inv_std: np.ndarray, gain: np.ndarray,
                           grad: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    c = grad.shape[0]
    g = grad.reshape(c, -1)
    xh = x_hat.reshape(c, -1)
    g_gain = (g * xh).sum(axis=1)
    g_shift = g.sum(axis=1)
    gxh = g * gain[:, None]
    gx = inv_std * (gxh - gxh.mean(axis=1, keepdims=True) - xh * (gxh * xh).mean(axis=1, keepdims=True))
    return gx.reshape(grad.shape), g_gain, g_shift


def softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax over axis 0."""
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def softmax_backward(prob: np.ndarray, grad_prob: np.ndarray) -> np.ndarray:
    return prob * (grad_prob - (grad_prob * prob).sum(axis=0, keepdims=True))


# ---------------------------------------------------------------- parameters


def param_shapes(spec: ArchSpec) -> "OrderedDict[str, tuple]":
    shapes = OrderedDict()

    def conv(name, cin, cout, k=3):
        shapes[f"{name}.w"] = (cout, cin, k, k, k)
        if spec.norm == "instance" and k == 3:
            # a bias in front of the normalization would be cancelled by it
            shapes[f"{name}.gain"] = (cout,)
            shapes[f"{name}.shift"] = (cout,)
        else:
            shapes[f"{name}.b"] = (cout,)

    for lvl in range(spec.levels):
        c = spec.channels(lvl)
        if lvl == 0:
            conv("enc0.conv1", spec.in_channels, c)
        else:
            conv(f"enc{lvl}.down", spec.channels(lvl - 1), c)
            conv(f"enc{lvl}.conv1", c, c)
        conv(f"enc{lvl}.conv2", c, c)
    for lvl in range(spec.levels - 2, -1, -1):
        c = spec.channels(lvl)
        shapes[f"dec{lvl}.up.w"] = (spec.channels(lvl + 1), c, 2, 2, 2)
        shapes[f"dec{lvl}.up.b"] = (c,)
        conv(f"dec{lvl}.conv1", 2 * c, c)
        conv(f"dec{lvl}.conv2", c, c)
    conv("head", spec.base_channels, spec.num_classes, k=1)
    return shapes


def init_params(spec: ArchSpec, seed: int = 0, dtype=np.float32) -> Params:
    """He-normal weights (fan-in), zero biases."""
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for name, shape in param_shapes(spec).items():
        if name.endswith((".b", ".shift")):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        if name.endswith(".gain"):
            params[name] = np.ones(shape, dtype=dtype)
            continue
        fan_in = shape[0] * 8 if name.endswith("up.w") else int(np.prod(shape[1:]))
        params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    return params


def check_params(spec: ArchSpec, params) -> None:
    expected = param_shapes(spec)
    if list(params) != list(expected):
        raise ValueError("parameter names do not match the architecture")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ValueError(f"{name}: shape {params[name].shape}, expected {shape}")


# ---------------------------------------------------------------- network


def forward(spec: ArchSpec, params, x: np.ndarray, keep_tape: bool = True) -> tuple[np.ndarray, dict]:
    """Run the network on a (2, S, S, S) input; returns (prob, tape)."""
    x = np.asarray(getattr(x, "data", x))
    if x.shape != (spec.in_channels,) + (spec.input_side,) * 3:
        raise ValueError(f"input shape {x.shape} does not match {spec}")
    check_params(spec, params)
    tape = {"spec": spec, "params": params}

    def conv_relu(name, h, stride=1):
        w = params[f"{name}.w"]
        z = conv3d_forward(h, w, params.get(f"{name}.b", np.zeros(w.shape[0], w.dtype)), stride)
        norm = None
        if spec.norm == "instance":
            z, x_hat, inv_std = instance_norm(z, params[f"{name}.gain"], params[f"{name}.shift"])
            norm = (x_hat, inv_std)
        out = relu(z, spec.leak)
        if keep_tape:
            tape[name] = (h, out, stride, norm)
        return out

    h = x
    skips = []
    for lvl in range(spec.levels):
        if lvl > 0:
            h = conv_relu(f"enc{lvl}.down", h, stride=2)
            h = conv_relu(f"enc{lvl}.conv1", h)
        else:
            h = conv_relu("enc0.conv1", h)
        h = conv_relu(f"enc{lvl}.conv2", h)
        skips.append(h)
    for lvl in range(spec.levels - 2, -1, -1):
        if keep_tape:
            tape[f"dec{lvl}.up"] = h
        up = conv_transpose3d_forward(h, params[f"dec{lvl}.up.w"], params[f"dec{lvl}.up.b"])
        h = np.concatenate([up, skips[lvl]], axis=0)
        h = conv_relu(f"dec{lvl}.conv1", h)
        h = conv_relu(f"dec{lvl}.conv2", h)
    if keep_tape:
        tape["head"] = h
    logits = conv3d_forward(h, params["head.w"], params["head.b"])
    prob = softmax(logits)
    if keep_tape:
        tape["prob"] = prob
    return prob, tape


def backward(tape: dict, grad_prob: np.ndarray | None = None, frozen=(),
             grad_logits: np.ndarray | None = None) -> Params:
    """Parameter gradients for a scalar loss with d(loss)/d(prob) = ``grad_prob``.

    ``grad_logits`` is added after the softmax backward; losses that fuse
    softmax and cross-entropy pass their gradient there. Names in ``frozen``
    get exact zero gradients and skip weight-gradient work.
    """
    spec, params = tape["spec"], tape["params"]
    frozen = set(frozen)
    grads = OrderedDict((k, np.zeros_like(v)) for k, v in params.items())

    def store(name, gw, gb, **extra):
        if name + ".w" not in frozen and gw is not None:
            grads[name + ".w"] = gw
        if name + ".b" not in frozen and name + ".b" in params:
            grads[name + ".b"] = gb
        for key, val in extra.items():
            if f"{name}.{key}" not in frozen:
                grads[f"{name}.{key}"] = val

    def conv_relu_back(name, g):
        h, out, stride, norm = tape[name]
        g = relu_backward(out, g, spec.leak)
        extra = {}
        if norm is not None:
            g, extra["gain"], extra["shift"] = instance_norm_backward(*norm, params[name + ".gain"], g)
        gx, gw, gb = conv3d_backward(h, params[name + ".w"], g, stride, need_w=name + ".w" not in frozen)
        store(name, gw, gb, **extra)
        return gx

    g = np.zeros_like(tape["prob"]) if grad_prob is None else softmax_backward(tape["prob"], grad_prob)
    if grad_logits is not None:
        g = g + grad_logits
    h = tape["head"]
    gx, gw, gb = conv3d_backward(h, params["head.w"], g, 1, need_w="head.w" not in frozen)
    store("head", gw, gb)
    g = gx
    skip_grads = {}
    for lvl in range(spec.levels - 1):
        g = conv_relu_back(f"dec{lvl}.conv2", g)
        g = conv_relu_back(f"dec{lvl}.conv1", g)
        c = spec.channels(lvl)
        g_up, skip_grads[lvl] = g[:c], g[c:]
        name = f"dec{lvl}.up"
        gx, gw, gb = conv_transpose3d_backward(tape[name], params[name + ".w"], g_up,
                                               need_w=name + ".w" not in frozen)
        store(name, gw, gb)
        g = gx
    # g now holds d/d(output of the bottom encoder level)
    for lvl in range(spec.levels - 1, -1, -1):
        if lvl < spec.levels - 1:
            g = g + skip_grads[lvl]
        g = conv_relu_back(f"enc{lvl}.conv2", g)
        g = conv_relu_back(f"enc{lvl}.conv1", g)
        if lvl > 0:
            g = conv_relu_back(f"enc{lvl}.down", g)
    return grads


# ---------------------------------------------------------------- optimizer


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr0: float = 1e-2
    decay_factor: float = 10.0
    decay_every: int = 10

    def learning_rate(self, epoch: int | None = None) -> float:
        epoch = self.epoch if epoch is None else epoch
        return self.lr0 / self.decay_factor ** (epoch // self.decay_every)


def adam_step(params, grads, state: AdamState, lr: float | None = None, frozen=()) -> None:
    """In-place Adam update with bias correction; ``lr`` defaults to the schedule."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    lr = state.learning_rate() if lr is None else lr
    state.step += 1
    t = state.step
    for name, p in params.items():
        if name in frozen:
            continue
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1**t)
        v_hat = v / (1 - state.beta2**t)
        p -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)


# ---------------------------------------------------------------- model files


def save_model(path, spec: ArchSpec, params) -> None:
    """JSON manifest at ``path`` plus a little-endian f32 blob next to it."""
    path = Path(path)
    blob = path.with_suffix(".bin")
    entries, offset, chunks = [], 0, []
    for name, arr in params.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size
        chunks.append(a.tobytes())
    blob.write_bytes(b"".join(chunks))
    path.write_text(json.dumps({"arch": asdict(spec), "blob": blob.name, "params": entries}, indent=1))


def load_model(path) -> tuple[ArchSpec, Params]:
    path = Path(path)
    manifest = json.loads(path.read_text())
    spec = ArchSpec(**manifest["arch"])
    flat = np.fromfile(path.parent / manifest["blob"], dtype="<f4")
    params = OrderedDict()
    for e in manifest["params"]:
        n = int(np.prod(e["shape"]))
        params[e["name"]] = flat[e["offset"] : e["offset"] + n].reshape(e["shape"]).astype(np.float32)
    check_params(spec, params)
    return spec, params
