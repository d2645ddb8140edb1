"""Minimal NHWC convolutional network engine with manual backpropagation.

Parameters live in one flat float64 vector. The vector is laid out layer by
layer, so the shared (pre-boundary) block is always a prefix and the local
(dense-stage) block the matching suffix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import NumericError, RejectedInputError

EPS = 1e-7  # prediction clamp before the log


@dataclass(frozen=True)
class Conv2D:
    filters: int
    kernel: tuple[int, int] = (5, 5)
    stride: int = 1
    padding: str = "same"


@dataclass(frozen=True)
class BatchNorm:
    momentum: float = 0.99
    eps: float = 1e-5


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    window: int = 2
    stride: int = 2


@dataclass(frozen=True)
class Dense:
    units: int


@dataclass(frozen=True)
class Sigmoid:
    pass


@dataclass(frozen=True)
class ParamSlot:
    layer: int
    name: str
    shape: tuple[int, ...]
    offset: int
    trainable: bool = True

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@dataclass(frozen=True)
class Model:
    """An ordered stack of layer descriptors over a fixed input shape.

    ``boundary`` is the index of the first local layer. Every parameter of
    layers before it is shared; the rest are local. Defaults to the first
    ``Dense`` layer. ``dtype`` is the compute precision of activations; the
    flat parameter vector is always float64.
    """

    layers: tuple
    input_shape: tuple[int, int, int]
    boundary: int | None = None
    dtype: str = "float64"
    shapes: tuple = field(init=False, repr=False, compare=False)
    slots: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if not layers or not isinstance(layers[-1], Sigmoid):
            raise RejectedInputError("model must end in exactly one Sigmoid layer")
        if sum(isinstance(l, Sigmoid) for l in layers) != 1:
            raise RejectedInputError("model must contain exactly one Sigmoid layer")
        if self.boundary is None:
            dense = [i for i, l in enumerate(layers) if isinstance(l, Dense)]
            object.__setattr__(self, "boundary", dense[0] if dense else len(layers))
        if not 0 <= self.boundary <= len(layers):
            raise RejectedInputError(f"boundary {self.boundary} outside [0, {len(layers)}]")

        shapes = []
        slots = []
        offset = 0
        shape = self.input_shape
        for i, layer in enumerate(layers):
            specs, shape = _infer(layer, shape)
            for name, pshape, trainable in specs:
                slot = ParamSlot(i, name, pshape, offset, trainable)
                slots.append(slot)
                offset += slot.size
            shapes.append(shape)
        if shapes[-1] != (1,):
            raise RejectedInputError(f"terminal output shape must be (1,), got {shapes[-1]}")
        object.__setattr__(self, "shapes", tuple(shapes))
        object.__setattr__(self, "slots", tuple(slots))

    @property
    def n_params(self) -> int:
        return sum(s.size for s in self.slots)

    @property
    def n_shared(self) -> int:
        return sum(s.size for s in self.slots if s.layer < self.boundary)

    @property
    def n_local(self) -> int:
        return self.n_params - self.n_shared

    def layer_slots(self, i: int) -> list[ParamSlot]:
        return [s for s in self.slots if s.layer == i]

    def trainable_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_params, dtype=bool)
        for s in self.slots:
            if s.trainable:
                mask[s.offset:s.offset + s.size] = True
        return mask

    def with_boundary(self, boundary: int) -> "Model":
        return Model(self.layers, self.input_shape, boundary, self.dtype)


def _same_out(n: int, k: int, s: int) -> tuple[int, int, int]:
    out = -(-n // s)
    total = max((out - 1) * s + k - n, 0)
    return out, total // 2, total - total // 2


def _infer(layer, shape):
    if isinstance(layer, Conv2D):
        if len(shape) != 3:
            raise RejectedInputError(f"Conv2D needs a 3-D input, got {shape}")
        h, w, c = shape
        kh, kw = layer.kernel
        if layer.padding == "same":
            ho = _same_out(h, kh, layer.stride)[0]
            wo = _same_out(w, kw, layer.stride)[0]
        elif layer.padding == "valid":
            ho = (h - kh) // layer.stride + 1
            wo = (w - kw) // layer.stride + 1
        else:
            raise RejectedInputError(f"unknown padding {layer.padding!r}")
        if ho < 1 or wo < 1:
            raise RejectedInputError(f"Conv2D kernel {layer.kernel} too large for {shape}")
        specs = [("W", (kh, kw, c, layer.filters), True), ("b", (layer.filters,), True)]
        return specs, (ho, wo, layer.filters)
    if isinstance(layer, BatchNorm):
        c = shape[-1]
        specs = [("gamma", (c,), True), ("beta", (c,), True),
                 ("mean", (c,), False), ("var", (c,), False)]
        return specs, shape
    if isinstance(layer, (ReLU, Sigmoid)):
        return [], shape
    if isinstance(layer, MaxPool):
        if len(shape) != 3:
            raise RejectedInputError(f"MaxPool needs a 3-D input, got {shape}")
        h, w, c = shape
        ho = (h - layer.window) // layer.stride + 1
        wo = (w - layer.window) // layer.stride + 1
        if ho < 1 or wo < 1:
            raise RejectedInputError(f"MaxPool window too large for {shape}")
        return [], (ho, wo, c)
    if isinstance(layer, Dense):
        fan_in = int(np.prod(shape))
        return [("W", (fan_in, layer.units), True), ("b", (layer.units,), True)], (layer.units,)
    raise RejectedInputError(f"unknown layer {layer!r}")


def pain_cnn(
    input_size: int = 28,
    filters=(32, 32, 64),
    kernel: int = 5,
    pool: str = "each",
    dense_units: int = 128,
    local: str = "dense",
    dtype: str = "float64",
) -> Model:
    """Build the lightweight three-conv pain network.

    Args:
        input_size: side length of the square single-channel input.
        filters: filter count of each conv block.
        kernel: square kernel side.
        pool: ``"each"`` puts a 2x2 max-pool after every conv block,
            ``"single"`` one after the whole stack.
        dense_units: width of the hidden dense layer.
        local: ``"dense"`` keeps both dense layers local, ``"prediction"``
            only the final one.
    """
    layers: list = []
    for i, f in enumerate(filters):
        layers += [Conv2D(f, (kernel, kernel)), BatchNorm(), ReLU()]
        if pool == "each" or (pool == "single" and i == len(filters) - 1):
            layers.append(MaxPool(2, 2))
    if pool not in ("each", "single"):
        raise RejectedInputError(f"unknown pool placement {pool!r}")
    first_dense = len(layers)
    layers += [Dense(dense_units), ReLU(), Dense(1), Sigmoid()]
    if local == "dense":
        boundary = first_dense
    elif local == "prediction":
        boundary = first_dense + 2
    else:
        raise RejectedInputError(f"unknown local block {local!r}")
    return Model(tuple(layers), (input_size, input_size, 1), boundary, dtype)


def init_params(model: Model, rng: np.random.Generator) -> np.ndarray:
    """Uniform fan-in initialization, ``U(-sqrt(6/fan_in), sqrt(6/fan_in))``."""
    flat = np.zeros(model.n_params)
    for s in model.slots:
        view = flat[s.offset:s.offset + s.size]
        if s.name == "W":
            fan_in = int(np.prod(s.shape[:-1]))
            limit = math.sqrt(6.0 / fan_in)
            view[:] = rng.uniform(-limit, limit, s.size)
        elif s.name in ("gamma", "var"):
            view[:] = 1.0
    return flat


# -- parameter partitioning ------------------------------------------------


@dataclass(frozen=True)
class ParameterSet:
    """Flat parameters split into the shared and local blocks."""

    shared: np.ndarray
    local: np.ndarray
    layout: tuple = ()

    def merge(self) -> np.ndarray:
        return np.concatenate([self.shared, self.local])

    def __len__(self):
        return len(self.shared) + len(self.local)


def partition_params(model: Model, flat) -> ParameterSet:
    flat = np.asarray(flat, dtype=float)
    if flat.ndim != 1 or flat.size != model.n_params:
        raise RejectedInputError(
            f"flat vector has {flat.size} entries, model has {model.n_params}")
    k = model.n_shared
    return ParameterSet(flat[:k].copy(), flat[k:].copy(), model.slots)


def merge_params(params: ParameterSet) -> np.ndarray:
    return params.merge()


def _as_flat(model: Model, params) -> np.ndarray:
    flat = params.merge() if isinstance(params, ParameterSet) else np.asarray(params, dtype=float)
    if flat.ndim != 1 or flat.size != model.n_params:
        raise RejectedInputError(
            f"parameter vector has {flat.size} entries, model has {model.n_params}")
    if not np.all(np.isfinite(flat)):
        raise NumericError("non-finite parameter")
    return flat


def _as_inputs(model: Model, x, start: int = 0) -> np.ndarray:
    x = np.asarray(x, dtype=model.dtype)
    want = model.input_shape if start == 0 else model.shapes[start - 1]
    if start == 0 and x.ndim == 3 and model.input_shape[-1] == 1:
        x = x[..., None]
    if x.ndim != len(want) + 1 or tuple(x.shape[1:]) != tuple(want):
        raise RejectedInputError(f"input shape {x.shape[1:]} does not match {tuple(want)}")
    if x.shape[0] < 1:
        raise RejectedInputError("empty batch")
    return x


def _views(model: Model, flat: np.ndarray, i: int) -> dict:
    return {s.name: flat[s.offset:s.offset + s.size].reshape(s.shape).astype(model.dtype, copy=False)
            for s in model.layer_slots(i)}


# -- layer passes ----------------------------------------------------------


def _conv_fwd(layer: Conv2D, p, x, training):
    kh, kw = layer.kernel
    s = layer.stride
    n, h, w, c = x.shape
    if layer.padding == "same":
        _, top, bottom = _same_out(h, kh, s)
        _, left, right = _same_out(w, kw, s)
    else:
        top = bottom = left = right = 0
    xp = np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0))) if top + bottom + left + right else x
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::s, ::s]
    ho, wo = win.shape[1], win.shape[2]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    wmat = p["W"].reshape(-1, layer.filters)
    out = (cols @ wmat + p["b"]).reshape(n, ho, wo, layer.filters)
    return out, (cols, xp.shape, (top, left), (h, w))


def _conv_bwd(layer: Conv2D, p, cache, dout, need_dx):
    cols, xp_shape, (top, left), (h, w) = cache
    kh, kw = layer.kernel
    s = layer.stride
    n, ho, wo, f = dout.shape
    d2 = dout.reshape(-1, f)
    grads = {"W": (cols.T @ d2).reshape(p["W"].shape), "b": d2.sum(axis=0)}
    if not need_dx:
        return None, grads
    c = xp_shape[-1]
    if s == 1:
        # full convolution of the output gradient with the flipped kernel
        dpad = np.pad(dout, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
        win = sliding_window_view(dpad, (kh, kw), axis=(1, 2))[:, top:top + h, left:left + w]
        dcols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, kh * kw * f)
        wflip = p["W"][::-1, ::-1].transpose(0, 1, 3, 2).reshape(-1, c)
        return (dcols @ wflip).reshape(n, h, w, c), grads
    dcols = (d2 @ p["W"].reshape(-1, f).T).reshape(n, ho, wo, kh, kw, c)
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += dcols[:, :, :, i, j, :]
    return dxp[:, top:top + h, left:left + w, :], grads


def _bn_fwd(layer: BatchNorm, p, x, training):
    axes = tuple(range(x.ndim - 1))
    if training:
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        m = layer.momentum
        stats = (m * p["mean"] + (1.0 - m) * mu, m * p["var"] + (1.0 - m) * var)
    else:
        mu, var, stats = p["mean"], p["var"], None
    inv = 1.0 / np.sqrt(var + layer.eps)
    xhat = (x - mu) * inv
    return p["gamma"] * xhat + p["beta"], (xhat, inv, training, stats)


def _bn_bwd(layer, p, cache, dout, need_dx):
    xhat, inv, training, _ = cache
    axes = tuple(range(dout.ndim - 1))
    grads = {"gamma": (dout * xhat).sum(axis=axes), "beta": dout.sum(axis=axes)}
    if not need_dx:
        return None, grads
    dxhat = dout * p["gamma"]
    if not training:
        return dxhat * inv, grads
    m = dout.size // dout.shape[-1]
    dx = inv / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, grads


def _relu_fwd(layer, p, x, training):
    mask = x > 0
    return x * mask, mask


def _relu_bwd(layer, p, mask, dout, need_dx):
    return dout * mask, {}


def _pool_fwd(layer: MaxPool, p, x, training):
    k, s = layer.window, layer.stride
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]
    n, ho, wo, c = win.shape[:4]
    flat = win.reshape(n, ho, wo, c, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape)


def _pool_bwd(layer: MaxPool, p, cache, dout, need_dx):
    arg, xshape = cache
    k, s = layer.window, layer.stride
    _, ho, wo, _ = dout.shape
    dx = np.zeros(xshape, dtype=dout.dtype)
    for idx in range(k * k):
        i, j = divmod(idx, k)
        dx[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += dout * (arg == idx)
    return dx, {}


def _dense_fwd(layer: Dense, p, x, training):
    x2 = x.reshape(x.shape[0], -1)
    return x2 @ p["W"] + p["b"], (x2, x.shape)


def _dense_bwd(layer, p, cache, dout, need_dx):
    x2, xshape = cache
    grads = {"W": x2.T @ dout, "b": dout.sum(axis=0)}
    if not need_dx:
        return None, grads
    return (dout @ p["W"].T).reshape(xshape), grads


def _sigmoid_fwd(layer, p, x, training):
    return expit(x), None


_FWD = {Conv2D: _conv_fwd, BatchNorm: _bn_fwd, ReLU: _relu_fwd, MaxPool: _pool_fwd,
        Dense: _dense_fwd, Sigmoid: _sigmoid_fwd}
_BWD = {Conv2D: _conv_bwd, BatchNorm: _bn_bwd, ReLU: _relu_bwd, MaxPool: _pool_bwd,
        Dense: _dense_bwd}


def _run(model, flat, x, start, stop, training):
    caches = []
    for i in range(start, stop):
        layer = model.layers[i]
        x, cache = _FWD[type(layer)](layer, _views(model, flat, i), x, training)
        caches.append(cache)
    return x, caches


# -- public passes ---------------------------------------------------------


def forward(model: Model, params, inputs, training: bool = False) -> np.ndarray:
    """Predict one clamped probability per input.

    Inference mode (the default) normalizes with batchnorm running
    statistics; ``training=True`` uses batch statistics, as the gradient does.
    """
    flat = _as_flat(model, params)
    x = _as_inputs(model, inputs)
    out, _ = _run(model, flat, x, 0, len(model.layers), training)
    return np.clip(out[:, 0].astype(float), EPS, 1.0 - EPS)


def features(model: Model, params, inputs, stop: int | None = None) -> np.ndarray:
    """Inference-mode activations entering layer ``stop`` (default: the boundary)."""
    flat = _as_flat(model, params)
    x = _as_inputs(model, inputs)
    stop = model.boundary if stop is None else stop
    out, _ = _run(model, flat, x, 0, stop, False)
    return out


def bce_loss(predictions, labels) -> float:
    p = np.clip(np.asarray(predictions, dtype=float).ravel(), EPS, 1.0 - EPS)
    y = np.asarray(labels, dtype=float).ravel()
    if p.size == 0:
        raise RejectedInputError("empty batch")
    if p.size != y.size:
        raise RejectedInputError(f"{p.size} predictions for {y.size} labels")
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def loss(model: Model, params, inputs, labels, training: bool = True, start: int = 0) -> float:
    flat = _as_flat(model, params)
    x = _as_inputs(model, inputs, start)
    out, _ = _run(model, flat, x, start, len(model.layers), training)
    return bce_loss(out[:, 0], labels)


def loss_and_grad(model: Model, params, inputs, labels, start: int = 0):
    """Training-mode loss, batch-averaged gradient and batchnorm stat updates.

    ``inputs`` enter at layer ``start``; layers before it get zero gradient.
    The returned ``stats`` is a list of ``(offset, values)`` pairs holding
    updated running statistics.
    """
    flat = _as_flat(model, params)
    x = _as_inputs(model, inputs, start)
    y = np.asarray(labels, dtype=float).ravel()
    if y.size != x.shape[0]:
        raise RejectedInputError(f"{x.shape[0]} inputs for {y.size} labels")
    last = len(model.layers) - 1
    z, caches = _run(model, flat, x, start, last, True)
    z = z[:, 0].astype(float)
    p = expit(z)
    value = bce_loss(p, y)
    n = y.size
    inside = (p > EPS) & (p < 1.0 - EPS)
    dout = (((p - y) / n) * inside)[:, None].astype(model.dtype)

    grad = np.zeros_like(flat)
    stats = []
    for i in range(last - 1, start - 1, -1):
        layer = model.layers[i]
        cache = caches[i - start]
        pv = _views(model, flat, i)
        if isinstance(layer, BatchNorm):
            new_mean, new_var = cache[3]
            slot = {s.name: s for s in model.layer_slots(i)}
            stats.append((slot["mean"].offset, new_mean))
            stats.append((slot["var"].offset, new_var))
        dout, g = _BWD[type(layer)](layer, pv, cache, dout, i > start)
        for s in model.layer_slots(i):
            if s.name in g:
                grad[s.offset:s.offset + s.size] = g[s.name].ravel()
    return value, grad, stats


def backward(model: Model, params, inputs, labels) -> np.ndarray:
    """Gradient of the batch-mean BCE with respect to every parameter."""
    return loss_and_grad(model, params, inputs, labels)[1]


def sgd_step(params, gradient, lr: float):
    """Return ``params - lr * gradient``; the input is not modified."""
    if not lr > 0:
        raise RejectedInputError(f"learning rate must be positive, got {lr}")
    if isinstance(params, ParameterSet):
        flat = sgd_step(params.merge(), gradient, lr)
        k = len(params.shared)
        return ParameterSet(flat[:k], flat[k:], params.layout)
    theta = np.asarray(params, dtype=float)
    g = gradient.merge() if isinstance(gradient, ParameterSet) else np.asarray(gradient, dtype=float)
    if theta.shape != g.shape:
        raise RejectedInputError(f"parameter shape {theta.shape} != gradient shape {g.shape}")
    return theta - lr * g


def apply_stats(flat: np.ndarray, stats) -> np.ndarray:
    if not stats:
        return flat
    out = flat.copy()
    for offset, values in stats:
        out[offset:offset + values.size] = values
    return out


def train_step(model: Model, flat, inputs, labels, lr: float, start: int = 0):
    """One SGD step plus the batchnorm running-stat update; returns ``(flat, loss)``."""
    value, grad, stats = loss_and_grad(model, flat, inputs, labels, start)
    return apply_stats(sgd_step(flat, grad, lr), stats), value


def gradient_check(model: Model, params, inputs, labels, h: float = 1e-5,
                   gradient=None, floor: float = 1e-6) -> float:
    """Max relative error between ``backward`` and central finite differences.

    Relative error is ``|a - b| / max(|a|, |b|, floor)``; the floor keeps
    near-zero entries from amplifying float noise. Pass ``gradient`` to check
    a vector other than ``backward``'s.
    """
    if not h > 0:
        raise RejectedInputError("h must be positive")
    flat = _as_flat(model, params).copy()
    analytic = backward(model, flat, inputs, labels) if gradient is None else np.asarray(gradient, float)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss(model, flat, inputs, labels)
        flat[i] = orig - h
        down = loss(model, flat, inputs, labels)
        flat[i] = orig
        numeric = (up - down) / (2 * h)
        err = abs(numeric - analytic[i]) / max(abs(numeric), abs(analytic[i]), floor)
        worst = max(worst, err)
    return worst
