"""Independent reference computations used by the tests.

Nothing here calls the package's backward passes: gradients come from
central differences in float64, and the training reference is a plain
numpy MLP written out by hand.
"""

import numpy as np

from splitnn import nn_core as nn

LAYER_KINDS = ("dense", "relu", "conv2d", "maxpool2d", "flatten", "concat", "softmax_ce")


def numeric_grad(f, x, eps=1e-3):
    """Central differences of scalar ``f()`` w.r.t. the float64 array ``x``, perturbed in place."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def rel_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.abs(a) + np.abs(b), 1e-8)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def random_instance(kind, rng):
    """A random (spec, inputs) pair for one layer kind; inputs are float64."""
    b = int(rng.integers(1, 4))
    if kind == "dense":
        i, o = rng.integers(1, 7, size=2)
        return nn.Dense(int(i), int(o), has_bias=bool(rng.integers(0, 2))), rng.normal(size=(b, i))
    if kind == "relu":
        x = rng.normal(size=(b, int(rng.integers(1, 9))))
        return nn.ReLU(), x + np.sign(x) * 0.01  # keep clear of the kink
    if kind == "conv2d":
        c, o, k = (int(v) for v in rng.integers(1, 4, size=3))
        s = int(rng.integers(1, 3))
        h, w = (int(v) for v in rng.integers(k, k + 4, size=2))
        return nn.Conv2D(c, o, k, k, stride=s), rng.normal(size=(b, c, h, w))
    if kind == "maxpool2d":
        win = int(rng.integers(1, 3))
        s = int(rng.integers(1, 3))
        c = int(rng.integers(1, 3))
        h, w = (int(v) for v in rng.integers(win, win + 4, size=2))
        x = rng.permutation(b * c * h * w).reshape(b, c, h, w) * 0.1  # distinct values, no ties
        return nn.MaxPool2D(win, s), x.astype(np.float64)
    if kind == "flatten":
        return nn.Flatten(), rng.normal(size=(b, 2, int(rng.integers(1, 4)), 3))
    if kind == "concat":
        arity = int(rng.integers(2, 4))
        return nn.Concat(arity), [rng.normal(size=(b, int(rng.integers(1, 5)))) for _ in range(arity)]
    if kind == "softmax_ce":
        c = int(rng.integers(2, 6))
        return nn.SoftmaxCrossEntropy(c), rng.normal(size=(b, c)) * 2
    raise ValueError(kind)


def check_layer(spec, x, rng):
    """Max relative error between analytic and numeric gradients (inputs and parameters)."""
    if isinstance(spec, nn.SoftmaxCrossEntropy):
        layer = nn.LayerState(spec)
        labels = rng.integers(0, spec.num_classes, size=x.shape[0])
        _, analytic = nn.loss_forward_backward(layer, x, labels)
        numeric = numeric_grad(lambda: nn.loss_forward_backward(layer, x, labels)[0], x)
        return rel_error(analytic, numeric)

    layer = nn.LayerState(spec, seed=int(rng.integers(0, 2**31)))
    layer.weights = [w.astype(np.float64) for w in layer.weights]
    out = nn.forward(layer, x)
    probe = rng.normal(size=out.shape)
    objective = lambda: float(np.sum(nn.forward(layer, x, train=False) * probe))
    grad_in = nn.backward(layer, probe, 0.0)
    errors = []
    inputs = x if isinstance(x, list) else [x]
    grads = grad_in if isinstance(grad_in, list) else [grad_in]
    for xi, gi in zip(inputs, grads):
        errors.append(rel_error(gi, numeric_grad(objective, xi)))
    for w, g in zip(layer.weights, layer.grads):
        errors.append(rel_error(g, numeric_grad(objective, w)))
    return max(errors)


class ReferenceMLP:
    """Hand-written dense/ReLU network with softmax cross-entropy and plain SGD."""

    def __init__(self, weights):
        self.params = [(w.copy(), b.copy()) for w, b in weights]

    def step(self, x, y, lr):
        acts = [x]
        for i, (w, b) in enumerate(self.params):
            z = acts[-1] @ w + b
            acts.append(np.maximum(z, 0) if i < len(self.params) - 1 else z)
        logits = acts[-1]
        shifted = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        n = len(y)
        loss = -np.mean(np.log(p[np.arange(n), y]))
        g = p.copy()
        g[np.arange(n), y] -= 1
        g /= n
        for i in range(len(self.params) - 1, -1, -1):
            w, b = self.params[i]
            gw, gb = acts[i].T @ g, g.sum(axis=0)
            g = g @ w.T
            if i > 0:
                g = g * (acts[i] > 0)
            self.params[i] = (w - lr * gw, b - lr * gb)
        return float(loss)


def mlp(widths, classes):
    layers = []
    for a, b in zip(widths, widths[1:]):
        layers += [nn.Dense(a, b), nn.ReLU()]
    layers += [nn.Dense(widths[-1], classes), nn.SoftmaxCrossEntropy(classes)]
    return layers


def random_frame(rng):
    """A random, well-formed frame of any type."""
    from splitnn.protocol import TENSOR_FRAMES, Frame, FrameType

    ft = FrameType(int(rng.integers(1, 7)))
    step, tag = int(rng.integers(0, 2**32)), int(rng.integers(0, 2**16))
    if ft in TENSOR_FRAMES:
        tensors = []
        for _ in range(int(rng.integers(0, 4))):
            shape = tuple(int(d) for d in rng.integers(0, 5, size=int(rng.integers(0, 4))))
            tensors.append((rng.normal(size=shape) * 10 ** rng.uniform(-3, 3)).astype(np.float32))
        return Frame(ft, step, tag, tensors=tuple(tensors))
    if ft == FrameType.LABELS:
        return Frame(ft, step, tag, labels=rng.integers(0, 2**16, size=int(rng.integers(0, 70))))
    args = tuple(int(a) for a in rng.integers(0, 2**32, size=int(rng.integers(0, 4))))
    return Frame(ft, step, tag, opcode=int(rng.integers(0, 256)), args=args)


def malformations(data, rng):
    """Broken variants of an encoded frame, each of which a decoder must reject."""
    import struct

    out = [b"XXXX" + data[4:], data[:4] + bytes([2]) + data[5:], data[:5] + bytes([0]) + data[6:],
           data[:5] + bytes([int(rng.integers(7, 256))]) + data[6:], data + b"\x00",
           data[:int(rng.integers(0, len(data)))]]
    length = struct.unpack_from("<I", data, 12)[0]
    out.append(data[:12] + struct.pack("<I", length + int(rng.integers(1, 100))) + data[16:])
    return out


# criterion number -> (passed, detail); printed by conftest at the end of the session
ACCEPTANCE = {}


def verdict(number, passed, detail):
    ACCEPTANCE[number] = (bool(passed), detail)
    assert passed, f"criterion {number}: {detail}"
