"""Minimal deterministic reverse-mode network core.

Tensors are plain numpy arrays. Training runs in float32 end to end; every
layer op follows the dtype of its input, so gradient checks can promote to
float64 by handing in float64 inputs and weights.

Each stateful layer caches its input on a training forward pass and consumes
the cache on backward, which also applies a plain SGD step in place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .errors import InputError, NonFiniteError, ProtocolMisuse, ShapeError

DTYPE = np.float32

FORWARD = "forward"
BACKWARD = "backward"


# ---------------------------------------------------------------------------
# Layer specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int
    has_bias: bool = True
    name: str = "dense"

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise InputError(f"{self.name}: Dense dims must be >= 1, got {self.in_dim}->{self.out_dim}")


@dataclass(frozen=True)
class ReLU:
    name: str = "relu"


@dataclass(frozen=True)
class Conv2D:
    in_ch: int
    out_ch: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    name: str = "conv"

    def __post_init__(self):
        if min(self.in_ch, self.out_ch, self.kernel_h, self.kernel_w, self.stride) < 1:
            raise InputError(f"{self.name}: Conv2D channels, kernel and stride must be >= 1")


@dataclass(frozen=True)
class MaxPool2D:
    window: int
    stride: int
    name: str = "pool"

    def __post_init__(self):
        if self.window < 1 or self.stride < 1:
            raise InputError(f"{self.name}: MaxPool2D window and stride must be >= 1")


@dataclass(frozen=True)
class Flatten:
    name: str = "flatten"


@dataclass(frozen=True)
class Concat:
    input_arity: int
    axis: int = 1
    name: str = "concat"

    def __post_init__(self):
        if self.input_arity < 2:
            raise InputError(f"{self.name}: Concat needs input_arity >= 2")
        if self.axis != 1:
            raise InputError(f"{self.name}: Concat only supports the feature axis (1)")


@dataclass(frozen=True)
class SoftmaxCrossEntropy:
    num_classes: int
    name: str = "loss"


LayerSpec = Union[Dense, ReLU, Conv2D, MaxPool2D, Flatten, Concat, SoftmaxCrossEntropy]
PARAMETERIZED = (Dense, Conv2D)


def with_name(spec: LayerSpec, name: str) -> LayerSpec:
    return type(spec)(**{**spec.__dict__, "name": name})


# ---------------------------------------------------------------------------
# Shapes (per sample, batch axis excluded)
# ---------------------------------------------------------------------------

def _conv_out(size, kernel, stride):
    return (size - kernel) // stride + 1


def output_shape(spec: LayerSpec, in_shape):
    """Per-sample output shape of ``spec`` for per-sample ``in_shape``.

    For Concat, ``in_shape`` is a sequence of per-sample shapes.
    """
    if isinstance(spec, Concat):
        shapes = [tuple(s) for s in in_shape]
        if len(shapes) != spec.input_arity:
            raise ShapeError(spec.name, f"{spec.input_arity} inputs", f"{len(shapes)} inputs")
        if any(len(s) != 1 for s in shapes):
            raise ShapeError(spec.name, "[features] inputs", shapes)
        return (sum(s[0] for s in shapes),)
    in_shape = tuple(in_shape)
    if isinstance(spec, Dense):
        if in_shape != (spec.in_dim,):
            raise ShapeError(spec.name, (spec.in_dim,), in_shape)
        return (spec.out_dim,)
    if isinstance(spec, (ReLU,)):
        return in_shape
    if isinstance(spec, SoftmaxCrossEntropy):
        if in_shape != (spec.num_classes,):
            raise ShapeError(spec.name, (spec.num_classes,), in_shape)
        return in_shape
    if isinstance(spec, Flatten):
        return (math.prod(in_shape),)
    if isinstance(spec, Conv2D):
        if len(in_shape) != 3 or in_shape[0] != spec.in_ch:
            raise ShapeError(spec.name, (spec.in_ch, "H", "W"), in_shape)
        ho = _conv_out(in_shape[1], spec.kernel_h, spec.stride)
        wo = _conv_out(in_shape[2], spec.kernel_w, spec.stride)
        if ho < 1 or wo < 1:
            raise ShapeError(spec.name, f"spatial dims >= kernel {spec.kernel_h}x{spec.kernel_w}", in_shape)
        return (spec.out_ch, ho, wo)
    if isinstance(spec, MaxPool2D):
        if len(in_shape) != 3:
            raise ShapeError(spec.name, ("C", "H", "W"), in_shape)
        ho = _conv_out(in_shape[1], spec.window, spec.stride)
        wo = _conv_out(in_shape[2], spec.window, spec.stride)
        if ho < 1 or wo < 1:
            raise ShapeError(spec.name, f"spatial dims >= window {spec.window}", in_shape)
        return (in_shape[0], ho, wo)
    raise InputError(f"unknown layer spec {spec!r}")


def chain_shapes(specs: Sequence[LayerSpec], in_shape):
    """Per-sample input shape of every layer in ``specs``, plus the final output shape."""
    shapes = []
    shape = in_shape
    for spec in specs:
        shapes.append(shape)
        shape = output_shape(spec, shape)
    return shapes, shape


# ---------------------------------------------------------------------------
# FLOP model
# ---------------------------------------------------------------------------

def flops_per_sample(spec: LayerSpec, direction: str, in_shape=None) -> int:
    if direction not in (FORWARD, BACKWARD):
        raise InputError(f"direction must be {FORWARD!r} or {BACKWARD!r}")
    if isinstance(spec, Dense):
        base = 2 * spec.in_dim * spec.out_dim
        return base if direction == FORWARD else 2 * base
    if isinstance(spec, Concat):
        return 0
    if isinstance(spec, SoftmaxCrossEntropy):
        # forward and backward are fused in one call; charged once, on forward
        return 5 * spec.num_classes if direction == FORWARD else 0
    if in_shape is None:
        raise InputError(f"{spec.name}: FLOP count needs the per-sample input shape")
    out = output_shape(spec, in_shape)
    if isinstance(spec, Conv2D):
        base = 2 * spec.kernel_h * spec.kernel_w * spec.in_ch * spec.out_ch * out[1] * out[2]
        return base if direction == FORWARD else 2 * base
    # ReLU, MaxPool2D, Flatten: one per output element, either direction
    return math.prod(out)


def flops(spec: LayerSpec, batch: int, direction: str, in_shape=None) -> int:
    """FLOPs of one forward or backward pass of ``spec`` over ``batch`` samples."""
    return batch * flops_per_sample(spec, direction, in_shape)


def chain_flops(specs: Sequence[LayerSpec], in_shape, batch: int):
    """(forward, backward) FLOPs of running ``specs`` in sequence."""
    shapes, _ = chain_shapes(specs, in_shape)
    fwd = sum(flops(s, batch, FORWARD, sh) for s, sh in zip(specs, shapes))
    bwd = sum(flops(s, batch, BACKWARD, sh) for s, sh in zip(specs, shapes))
    return fwd, bwd


# ---------------------------------------------------------------------------
# Seeded initialisation
# ---------------------------------------------------------------------------

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def splitmix64(seed: int, n: int) -> np.ndarray:
    """First ``n`` outputs of the SplitMix64 generator started at ``seed``."""
    state = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    z = state + _GAMMA * np.arange(1, n + 1, dtype=np.uint64)
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def uniform(seed: int, n: int, low: float, high: float) -> np.ndarray:
    """``n`` float64 draws from [low, high) using the top 53 bits of SplitMix64."""
    u = (splitmix64(seed, n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
    return low + (high - low) * u


def init_weights(spec: LayerSpec, seed: int) -> list:
    """Glorot-uniform weights, zero bias. Keyed on (seed, layer name) only, so the
    same layer gets the same weights wherever it is placed."""
    if isinstance(spec, Dense):
        fan_in, fan_out, shape = spec.in_dim, spec.out_dim, (spec.in_dim, spec.out_dim)
        bias = spec.out_dim if spec.has_bias else 0
    elif isinstance(spec, Conv2D):
        area = spec.kernel_h * spec.kernel_w
        fan_in, fan_out = spec.in_ch * area, spec.out_ch * area
        shape = (spec.out_ch, spec.in_ch, spec.kernel_h, spec.kernel_w)
        bias = spec.out_ch
    else:
        return []
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    layer_seed = (seed ^ _fnv1a64(spec.name)) & 0xFFFFFFFFFFFFFFFF
    w = uniform(layer_seed, math.prod(shape), -limit, limit).astype(DTYPE).reshape(shape)
    weights = [w]
    if bias:
        weights.append(np.zeros(bias, dtype=DTYPE))
    return weights


# ---------------------------------------------------------------------------
# Layer state and passes
# ---------------------------------------------------------------------------

class LayerState:
    def __init__(self, spec: LayerSpec, weights=None, seed: int = 0):
        self.spec = spec
        self.weights = list(weights) if weights is not None else init_weights(spec, seed)
        self.grads = [np.zeros_like(w) for w in self.weights]
        self.cached_input = None
        self._cache = None

    @property
    def name(self):
        return self.spec.name

    def __repr__(self):
        shapes = [w.shape for w in self.weights]
        return f"LayerState({self.spec!r}, weights={shapes})"


def _check_finite(layer, arr):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"layer {layer.name!r} produced non-finite values")


def _windows(x, kh, kw, stride):
    # [B, C, H, W] -> [B, C, Ho, Wo, kh, kw] view
    view = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    return view[:, :, ::stride, ::stride]


def forward(layer: LayerState, x, train: bool = True):
    """Run one layer. ``x`` is a list of arrays for Concat.

    With ``train`` the input is cached for the following backward call.
    """
    spec = layer.spec
    if isinstance(spec, Concat):
        xs = list(x)
        if len(xs) != spec.input_arity:
            raise ShapeError(spec.name, f"{spec.input_arity} inputs", f"{len(xs)} inputs")
        if any(a.ndim != 2 or a.shape[0] != xs[0].shape[0] for a in xs):
            raise ShapeError(spec.name, "[batch, features] inputs with equal batch", [a.shape for a in xs])
        out = np.concatenate(xs, axis=1)
        if train:
            layer.cached_input = xs
            layer._cache = [a.shape[1] for a in xs]
        return out

    x = np.asarray(x)
    output_shape(spec, x.shape[1:])  # raises ShapeError naming both shapes
    if isinstance(spec, Dense):
        w = layer.weights[0].astype(x.dtype, copy=False)
        out = x @ w
        if spec.has_bias:
            out = out + layer.weights[1].astype(x.dtype, copy=False)
    elif isinstance(spec, ReLU):
        out = np.maximum(x, 0)
    elif isinstance(spec, SoftmaxCrossEntropy):
        out = x
    elif isinstance(spec, Flatten):
        out = x.reshape(x.shape[0], -1)
    elif isinstance(spec, Conv2D):
        b = x.shape[0]
        cols = _windows(x, spec.kernel_h, spec.kernel_w, spec.stride)
        ho, wo = cols.shape[2], cols.shape[3]
        cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, -1)
        wmat = layer.weights[0].astype(x.dtype, copy=False).reshape(spec.out_ch, -1)
        out = cols @ wmat.T + layer.weights[1].astype(x.dtype, copy=False)
        out = out.reshape(b, ho, wo, spec.out_ch).transpose(0, 3, 1, 2)
        if train:
            layer._cache = cols
    elif isinstance(spec, MaxPool2D):
        win = _windows(x, spec.window, spec.window, spec.stride)
        flat = win.reshape(*win.shape[:4], -1)
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        if train:
            layer._cache = arg
    else:
        raise InputError(f"unknown layer spec {spec!r}")
    out = np.ascontiguousarray(out)
    _check_finite(layer, out)
    if train:
        layer.cached_input = x
    return out


def _sgd(layer, lr):
    if lr:
        for w, g in zip(layer.weights, layer.grads):
            w -= w.dtype.type(lr) * g.astype(w.dtype, copy=False)


def backward(layer: LayerState, upstream, learning_rate: float):
    """Gradient w.r.t. the layer input(s); applies ``w -= lr * dL/dw`` in place.

    Parameter gradients stay available in ``layer.grads`` after the call.
    """
    spec = layer.spec
    if layer.cached_input is None:
        raise ProtocolMisuse(f"backward on layer {spec.name!r} without a preceding training forward")
    x = layer.cached_input
    g = np.asarray(upstream)

    if isinstance(spec, Concat):
        expect = (x[0].shape[0], sum(layer._cache))
        if g.shape != expect:
            raise ShapeError(spec.name, expect, g.shape)
        bounds = np.cumsum(layer._cache)[:-1]
        grad_in = [np.ascontiguousarray(p) for p in np.split(g, bounds, axis=1)]
        layer.cached_input = layer._cache = None
        return grad_in

    out_shape = (x.shape[0],) + tuple(output_shape(spec, x.shape[1:]))
    if g.shape != out_shape:
        raise ShapeError(spec.name, out_shape, g.shape)

    if isinstance(spec, Dense):
        w = layer.weights[0].astype(g.dtype, copy=False)
        grad_in = g @ w.T
        layer.grads[0] = x.T @ g
        if spec.has_bias:
            layer.grads[1] = g.sum(axis=0)
    elif isinstance(spec, ReLU):
        grad_in = g * (x > 0)
    elif isinstance(spec, (SoftmaxCrossEntropy,)):
        grad_in = g
    elif isinstance(spec, Flatten):
        grad_in = g.reshape(x.shape)
    elif isinstance(spec, Conv2D):
        b, c, _, _ = x.shape
        kh, kw, s = spec.kernel_h, spec.kernel_w, spec.stride
        ho, wo = out_shape[2], out_shape[3]
        g_col = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, spec.out_ch)
        wmat = layer.weights[0].astype(g.dtype, copy=False).reshape(spec.out_ch, -1)
        layer.grads[0] = (g_col.T @ layer._cache).reshape(layer.weights[0].shape)
        layer.grads[1] = g_col.sum(axis=0)
        dcols = (g_col @ wmat).reshape(b, ho, wo, c, kh, kw)
        grad_in = np.zeros_like(x, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                grad_in[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    elif isinstance(spec, MaxPool2D):
        k, s = spec.window, spec.stride
        ho, wo = out_shape[2], out_shape[3]
        arg = layer._cache
        grad_in = np.zeros_like(x, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                mask = arg == i * k + j
                grad_in[:, :, i:i + s * ho:s, j:j + s * wo:s] += g * mask
    else:
        raise InputError(f"unknown layer spec {spec!r}")

    _sgd(layer, learning_rate)
    layer.cached_input = layer._cache = None
    return np.ascontiguousarray(grad_in)


def loss_forward_backward(layer: LayerState, logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    spec = layer.spec
    if not isinstance(spec, SoftmaxCrossEntropy):
        raise InputError(f"layer {spec.name!r} is not a SoftmaxCrossEntropy layer")
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[1] != spec.num_classes:
        raise ShapeError(spec.name, ("batch", spec.num_classes), logits.shape)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(spec.name, (logits.shape[0],), labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= spec.num_classes):
        raise InputError(f"layer {spec.name!r}: labels must lie in [0, {spec.num_classes})")
    batch = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(denom)
    rows = np.arange(batch)
    loss = float(-log_probs[rows, labels].mean())
    grad = exp / denom
    grad[rows, labels] -= 1
    grad /= logits.dtype.type(batch)
    _check_finite(layer, grad)
    return loss, grad


def predict_classes(logits) -> np.ndarray:
    return np.asarray(logits).argmax(axis=1)
